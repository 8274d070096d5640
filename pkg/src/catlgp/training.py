"""Fitting: initialization, stochastic gradient ascent on the ELBO, and model selection over Q."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import CatLGPError, DivergenceDetected, InsufficientData
from .inference import (
    ElboEstimate,
    ElboObjective,
    VariationalPosterior,
    draw_noise,
    param_tensors,
)
from .kernel import KernelParams, unstack_params
from .model import MISSING, CategoricalDataset, ModelConfig, as_rng

log = logging.getLogger(__name__)

# standard deviation of the fallback init used when PCA gives nothing
DEGENERATE_INIT_STD = 0.1


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    elbo: float
    kl_x: float
    kl_u: float
    exp_loglik: float
    grad_norm: float
    wall_clock: float

    def as_dict(self, timing=True):
        out = {
            "iteration": self.iteration,
            "elbo": self.elbo,
            "kl_x": self.kl_x,
            "kl_u": self.kl_u,
            "exp_loglik": self.exp_loglik,
            "grad_norm": self.grad_norm,
        }
        if timing:
            out["wall_clock"] = self.wall_clock
        return out


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)
    ard_weights: np.ndarray | None = None
    converged: bool = False

    def __len__(self):
        return len(self.records)

    def elbos(self) -> np.ndarray:
        return np.array([r.elbo for r in self.records])

    def smoothed(self, window: int = 50) -> np.ndarray:
        """Trailing moving average; entry ``i`` averages iterations ``i-window+1..i``."""
        e = self.elbos()
        if len(e) < window:
            return np.array([])
        c = np.cumsum(np.concatenate([[0.0], e]))
        return (c[window:] - c[:-window]) / window


@dataclass
class FittedModel:
    posterior: VariationalPosterior
    kernels: list
    config: ModelConfig
    trace: TrainTrace

    @property
    def ard_weights(self) -> np.ndarray:
        """``[D, Q]`` ARD weights."""
        return np.stack([k.ard_weights for k in self.kernels])


def _pca_scores(Y, q):
    Yc = Y - Y.mean(axis=0)
    if Yc.shape[1] == 0:
        return np.zeros((Y.shape[0], 0)), np.zeros(0)
    U, s, Vt = np.linalg.svd(Yc, full_matrices=False)
    # deterministic sign: largest-magnitude loading of each component positive
    signs = np.sign(Vt[np.arange(len(s)), np.abs(Vt).argmax(axis=1)])
    signs[signs == 0] = 1.0
    scores = U * s * signs
    return scores[:, :q], s[:q]


def initialize(data: CategoricalDataset, config: ModelConfig, rng=None):
    """PCA initialization of the posterior plus unit kernel hyperparameters.

    Latent means are the leading principal-component scores of the one-hot
    data, each scaled to unit variance. Components that carry no variance
    are replaced by small Gaussian noise.
    """
    rng = as_rng(config.rng_seed if rng is None else rng)
    n, q, m = data.n_obs, config.latent_dim, config.n_inducing
    if n < 2:
        raise InsufficientData(f"need at least 2 observations, got {n}")
    config.check_against(data)

    scores, sv = _pca_scores(data.one_hot(), q)
    x = np.zeros((n, q))
    for j in range(q):
        col = scores[:, j] if j < scores.shape[1] else None
        if col is not None and sv[j] > 1e-8 * max(sv[0], 1.0):
            x[:, j] = (col - col.mean()) / col.std()
        else:
            x[:, j] = DEGENERATE_INIT_STD * rng.standard_normal(n)

    # identical data rows share a latent mean; draw inducing inputs from distinct
    # means and fill any shortfall with perturbed copies
    _, first = np.unique(x, axis=0, return_index=True)
    distinct = x[np.sort(first)]
    if m <= distinct.shape[0]:
        z = distinct[rng.choice(distinct.shape[0], size=m, replace=False)].copy()
    else:
        short = m - distinct.shape[0]
        extra = distinct[rng.integers(0, distinct.shape[0], size=short)]
        z = np.vstack([distinct, extra + DEGENERATE_INIT_STD * rng.standard_normal((short, q))])

    d, kmax = data.n_vars, max(data.cardinalities)
    post = VariationalPosterior(
        x_means=x,
        x_log_vars=np.full((n, q), math.log(config.init_x_var)),
        inducing_inputs=z,
        u_means=np.zeros((d, kmax, m)),
        u_chol_raw=np.broadcast_to(0.5 * math.log(config.init_u_var) * np.eye(m), (d, m, m)).copy(),
        cardinalities=data.cardinalities,
    )
    kernels = [KernelParams.from_natural(1.0, np.ones(q)) for _ in range(d)]
    return post, kernels


def _converged(elbos, window, tol):
    """Compare the means of the last two disjoint ``window``-length blocks."""
    if tol <= 0 or len(elbos) < 2 * window or len(elbos) % window:
        return False
    now = float(np.mean(elbos[-window:]))
    prev = float(np.mean(elbos[-2 * window:-window]))
    return abs(now - prev) <= tol * abs(prev)


def fit(data: CategoricalDataset, config: ModelConfig, rng=None, init=None, callback=None) -> FittedModel:
    """Maximize the ELBO with Adam on all free parameters.

    Each iteration evaluates the bound (``mc_samples_train`` fresh draws) at
    the current parameters, records it, and then takes a step; the final
    recorded entry is therefore the bound at the returned parameters.
    Stops at ``max_iters`` or when the windowed ELBO average stops moving
    (see ``ModelConfig.tol``).

    Args:
        init: optional ``(posterior, kernels)`` to start from instead of
            :func:`initialize`.
        callback: called as ``callback(iteration, params)`` after each record.
    """
    rng = as_rng(config.rng_seed if rng is None else rng)
    post, kernels = init if init is not None else initialize(data, config, rng)
    t = param_tensors(post, kernels, requires_grad=True)
    names = [k for k in t if not (config.freeze_inducing and k == "z")]
    if config.freeze_inducing:
        t["z"].requires_grad_(False)
    opt = torch.optim.Adam([t[k] for k in names], lr=config.step_size)
    obj = ElboObjective(data, config)
    trace = TrainTrace()
    elbos = []
    start = time.perf_counter()

    for it in range(config.max_iters):
        noise = draw_noise(config.mc_samples_train, post, rng)
        opt.zero_grad()
        value, est = obj.evaluate(t, noise)
        if not math.isfinite(est.value):
            raise DivergenceDetected(f"non-finite ELBO estimate at iteration {it}")
        (-value).backward()
        gnorm = math.sqrt(sum(float((t[k].grad ** 2).sum()) for k in names))
        trace.records.append(TraceRecord(it, est.value, est.kl_x, est.kl_u, est.exp_loglik,
                                         gnorm, time.perf_counter() - start))
        elbos.append(est.value)
        if callback is not None:
            callback(it, t)
        if it == config.max_iters - 1:
            break
        if _converged(elbos, config.smoothing_window, config.tol):
            trace.converged = True
            log.info("converged at iteration %d", it)
            break
        if it < config.warmup_iters:
            for k in ("x_mean", "x_log_var"):
                t[k].grad = None
        opt.step()
        if it % 200 == 0:
            log.debug("iter %d elbo %.3f", it, est.value)

    fitted_post = VariationalPosterior.from_tensors(t, data.cardinalities)
    fitted_kernels = unstack_params(t["log_sf2"], t["log_alpha"])
    trace.ard_weights = np.stack([k.ard_weights for k in fitted_kernels])
    return FittedModel(fitted_post, fitted_kernels, config, trace)


def evaluate_elbo(model: FittedModel, data: CategoricalDataset, rng=None, n_samples=None) -> ElboEstimate:
    obj = ElboObjective(data, model.config)
    t = param_tensors(model.posterior, model.kernels)
    return obj.evaluate_chunked(t, n_samples or model.config.mc_samples_eval,
                                as_rng(model.config.rng_seed if rng is None else rng))


def fit_with_restarts(data, config: ModelConfig, restarts: int = 1, rng=None):
    """Best of ``restarts`` independent fits, ranked by the eval-size ELBO.

    Returns ``(model, estimate)``.
    """
    rng = as_rng(config.rng_seed if rng is None else rng)
    best = None
    for r in range(max(restarts, 1)):
        sub = np.random.default_rng(rng.integers(2 ** 63))
        model = fit(data, config, sub)
        est = evaluate_elbo(model, data, sub)
        if best is None or est.value > best[1].value:
            best = (model, est)
    return best


def dim_relevance(model: FittedModel) -> np.ndarray:
    """Per-dimension relevance: the largest ARD weight over variables."""
    return model.ard_weights.max(axis=0)


def effective_dims(model: FittedModel, threshold_ratio: float = 0.05) -> list:
    rel = dim_relevance(model)
    return [q for q in range(rel.shape[0]) if rel[q] >= threshold_ratio * rel.max()]


@dataclass
class SelectionResult:
    table: list
    best_q: int
    models: dict


def select_latent_dim(data, q_candidates, config: ModelConfig, rng=None, threshold_ratio=0.05):
    """Fit one model per candidate Q and pick the largest evaluated ELBO.

    Each candidate gets its own stream seeded by ``(base, Q)``, so results do
    not depend on candidate order. Ties go to the smaller Q, and between
    equal Q to the first occurrence. A failed candidate is recorded in the
    table; the call raises only if every candidate fails.
    """
    q_candidates = list(q_candidates)
    if not q_candidates:
        raise ValueError("need at least one candidate")
    rng = as_rng(config.rng_seed if rng is None else rng)
    base = int(rng.integers(2 ** 63))
    table, models, best, last_err = [], {}, None, None
    for i, q in enumerate(q_candidates):
        sub = np.random.default_rng([base, int(q)])
        cfg = config.replace(latent_dim=int(q))
        try:
            model = fit(data, cfg, sub)
            est = evaluate_elbo(model, data, sub)
        except CatLGPError as err:
            log.warning("Q=%d failed: %s", q, err)
            table.append({"q": int(q), "elbo": math.nan, "mc_std_error": math.nan,
                          "effective_dims": [], "error": str(err)})
            last_err = err
            continue
        models[i] = model
        table.append({"q": int(q), "elbo": est.value, "mc_std_error": est.mc_std_error,
                      "effective_dims": effective_dims(model, threshold_ratio), "error": ""})
        if best is None or est.value > best[1] or (est.value == best[1] and q < best[0]):
            best = (int(q), est.value)
    if best is None:
        raise last_err
    return SelectionResult(table, best[0], models)


def predictive_probs(model: FittedModel, data: CategoricalDataset, rng=None, n_samples=None):
    """``[N, D, Kmax]`` MC-averaged category probabilities."""
    obj = ElboObjective(data, model.config)
    t = param_tensors(model.posterior, model.kernels)
    return obj.predictive_probs(t, n_samples or model.config.mc_samples_eval,
                                as_rng(model.config.rng_seed if rng is None else rng))


def error_from_probs(probs, data: CategoricalDataset):
    """Argmax misclassification rate over observed entries, or ``None`` if nothing is observed."""
    obs = data.values != MISSING
    if not obs.any():
        return None
    pred = np.argmax(probs, axis=-1)
    return float(np.mean(pred[obs] != data.values[obs]))


def train_error(model: FittedModel, data: CategoricalDataset, rng=None):
    return error_from_probs(predictive_probs(model, data, rng), data)


def majority_baseline_error(data: CategoricalDataset) -> float:
    """Error of predicting each variable's most frequent observed category."""
    wrong = total = 0
    for d, k in enumerate(data.cardinalities):
        col = data.values[:, d]
        col = col[col != MISSING]
        if col.size:
            wrong += col.size - np.bincount(col, minlength=k).max()
            total += col.size
    return wrong / total if total else math.nan
