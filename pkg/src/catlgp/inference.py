"""Sparse variational inference for the categorical latent GP.

Variational family::

    q(X) = prod_nq N(x_nq | m_nq, s2_nq)
    q(U) = prod_dk N(u_dk | mu_dk, Sigma_d)      Sigma_d shared over k

The bound is

    ELBO = E_q[sum_nd log softmax(f_nd)[y_nd]] - KL(q(X)||p(X)) - KL(q(U)||p(U))

where f_nd is drawn from the sparse conditional p(f_nd | x_n, U_d). The
expectation is estimated by Monte Carlo with every draw reparameterized
(x, u and f), so gradients are pathwise and come from torch autograd.
Passing the same :class:`Noise` to several evaluations gives common random
numbers, which makes the estimate a deterministic function of the parameters.

All computation is float64. Per-variable category blocks are padded to
``Kmax = max_d K_d``; padded entries never contribute to any term.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DimensionMismatch, NonPositiveVariance
from .kernel import KernelParams, ard_cross_gram, stack_params
from .linalg import jittered_cholesky
from .model import MISSING, CategoricalDataset, ModelConfig, as_rng

# floor under the conditional variance before the square root (keeps sqrt' finite)
VAR_FLOOR = 1e-12
# number of MC samples evaluated together when no gradient is needed
EVAL_CHUNK = 50

PARAM_NAMES = ("x_mean", "x_log_var", "z", "u_mean", "u_chol", "log_sf2", "log_alpha")


def tril_factor(raw):
    """Lower-triangular factor with positive diagonal from an unconstrained matrix.

    Strictly-lower entries are used as-is and the diagonal is exponentiated;
    the upper triangle of ``raw`` is ignored.
    """
    raw = torch.as_tensor(raw)
    return torch.tril(raw, -1) + torch.diag_embed(torch.exp(raw.diagonal(dim1=-2, dim2=-1)))


@dataclass
class VariationalPosterior:
    """Free variational parameters, stored unconstrained.

    Attributes:
        x_means: ``[N, Q]`` means of q(X).
        x_log_vars: ``[N, Q]`` log variances of q(X).
        inducing_inputs: ``[M, Q]`` inducing locations Z.
        u_means: ``[D, Kmax, M]`` means mu_dk; entries with ``k >= K_d`` are padding.
        u_chol_raw: ``[D, M, M]`` unconstrained factor of Sigma_d (see :func:`tril_factor`).
        cardinalities: K_d per variable.
    """

    x_means: np.ndarray
    x_log_vars: np.ndarray
    inducing_inputs: np.ndarray
    u_means: np.ndarray
    u_chol_raw: np.ndarray
    cardinalities: tuple

    def __post_init__(self):
        self.cardinalities = tuple(int(k) for k in self.cardinalities)
        n, q = self.x_means.shape
        m = self.inducing_inputs.shape[0]
        d, kmax = len(self.cardinalities), max(self.cardinalities)
        expected = {
            "x_log_vars": (n, q),
            "inducing_inputs": (m, q),
            "u_means": (d, kmax, m),
            "u_chol_raw": (d, m, m),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionMismatch(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def n_obs(self):
        return self.x_means.shape[0]

    @property
    def latent_dim(self):
        return self.x_means.shape[1]

    @property
    def n_inducing(self):
        return self.inducing_inputs.shape[0]

    @property
    def x_vars(self):
        return np.exp(self.x_log_vars)

    @property
    def u_factor(self):
        return tril_factor(torch.as_tensor(self.u_chol_raw)).numpy()

    @property
    def u_covs(self):
        L = self.u_factor
        return L @ np.swapaxes(L, -1, -2)

    def u_means_list(self):
        """Unpadded ``[K_d, M]`` mean blocks, one per variable."""
        return [self.u_means[d, :k] for d, k in enumerate(self.cardinalities)]

    def to_tensors(self, requires_grad=False) -> dict:
        out = {
            "x_mean": self.x_means,
            "x_log_var": self.x_log_vars,
            "z": self.inducing_inputs,
            "u_mean": self.u_means,
            "u_chol": self.u_chol_raw,
        }
        return {
            k: torch.tensor(v, dtype=torch.float64, requires_grad=requires_grad)
            for k, v in out.items()
        }

    @classmethod
    def from_tensors(cls, t: dict, cardinalities):
        get = lambda k: t[k].detach().numpy().copy()  # noqa: E731
        return cls(get("x_mean"), get("x_log_var"), get("z"), get("u_mean"), get("u_chol"),
                   cardinalities)

    def copy(self):
        return VariationalPosterior(
            self.x_means.copy(), self.x_log_vars.copy(), self.inducing_inputs.copy(),
            self.u_means.copy(), self.u_chol_raw.copy(), self.cardinalities,
        )

    def with_u_covs(self, covs):
        """Copy whose Sigma_d are set from dense SPD matrices ``[D, M, M]``."""
        L = np.linalg.cholesky(np.asarray(covs, dtype=np.float64))
        raw = np.tril(L, -1) + np.einsum("...i,ij->...ij", np.log(np.diagonal(L, axis1=-2, axis2=-1)),
                                         np.eye(L.shape[-1]))
        out = self.copy()
        out.u_chol_raw = raw
        return out


@dataclass(frozen=True)
class ElboEstimate:
    value: float
    kl_x: float
    kl_u: float
    exp_loglik: float
    mc_std_error: float
    n_samples: int


@dataclass
class Noise:
    """Standard-normal draws behind one Monte Carlo estimate.

    Shapes: ``x [S, N, Q]``, ``u [S, D, Kmax, M]``, ``f [S, D, N, Kmax]``.
    """

    x: np.ndarray
    u: np.ndarray
    f: np.ndarray

    @property
    def n_samples(self):
        return self.x.shape[0]

    def chunks(self, size):
        for i in range(0, self.n_samples, size):
            yield Noise(self.x[i:i + size], self.u[i:i + size], self.f[i:i + size])


def draw_noise(n_samples, post: VariationalPosterior, rng) -> Noise:
    rng = as_rng(rng)
    s, (n, q) = n_samples, post.x_means.shape
    d, kmax, m = post.u_means.shape
    return Noise(
        rng.standard_normal((s, n, q)),
        rng.standard_normal((s, d, kmax, m)),
        rng.standard_normal((s, d, n, kmax)),
    )


# --------------------------------------------------------------------------
# analytic KL terms


def _kl_latents_t(x_mean, x_log_var, prior_var):
    ratio = torch.exp(x_log_var) / prior_var
    return 0.5 * (ratio + x_mean ** 2 / prior_var - 1.0 - torch.log(ratio)).sum()


def kl_latents(post: VariationalPosterior, prior_var: float) -> float:
    """KL(q(X) || p(X)) for the mean-field Gaussian q and an isotropic prior."""
    if prior_var <= 0:
        raise NonPositiveVariance("prior variance must be positive")
    if not np.all(np.isfinite(post.x_log_vars)):
        raise NonPositiveVariance("latent variances must be positive and finite")
    return float(_kl_latents_t(torch.as_tensor(post.x_means), torch.as_tensor(post.x_log_vars),
                               prior_var))


def _kmm_factor(z, log_sf2, log_alpha, jitter):
    kmm = ard_cross_gram(z, z, log_sf2, log_alpha)
    kmm = 0.5 * (kmm + kmm.mT)
    if jitter:
        eye = torch.eye(z.shape[0], dtype=z.dtype)
        kmm = kmm + (jitter * torch.exp(log_sf2))[:, None, None] * eye
    L, _ = jittered_cholesky(kmm)
    return L


def _kl_inducing_t(Lk, u_mean, u_chol, kmask):
    m = Lk.shape[-1]
    Ls = tril_factor(u_chol)
    trace = (torch.linalg.solve_triangular(Lk, Ls, upper=False) ** 2).sum((-1, -2))
    logdet_k = 2.0 * torch.log(Lk.diagonal(dim1=-2, dim2=-1)).sum(-1)
    logdet_s = 2.0 * u_chol.diagonal(dim1=-2, dim2=-1).sum(-1)
    maha = (torch.linalg.solve_triangular(Lk, u_mean.mT, upper=False) ** 2).sum(-2)
    n_k = kmask.sum(-1).to(Lk.dtype)
    per_d = n_k * (trace - m + logdet_k - logdet_s) + (maha * kmask).sum(-1)
    return 0.5 * per_d.sum()


def _kmask(cardinalities):
    kmax = max(cardinalities)
    return torch.as_tensor(np.arange(kmax)[None, :] < np.asarray(cardinalities)[:, None])


def kl_inducing(post: VariationalPosterior, kernels, jitter: float = 0.0) -> float:
    """KL(q(U) || p(U)) with p(u_dk) = N(0, K_d(Z, Z) + jitter * sf2_d * I)."""
    t = post.to_tensors()
    log_sf2, log_alpha = stack_params(kernels)
    Lk = _kmm_factor(t["z"], log_sf2, log_alpha, jitter)
    return float(_kl_inducing_t(Lk, t["u_mean"], t["u_chol"], _kmask(post.cardinalities)))


# --------------------------------------------------------------------------
# sparse conditional


def conditional_f(x, u_d, z, p: KernelParams, jitter: float = 0.0):
    """Moments of p(f_nd | x_n, U_d).

    Args:
        x: ``[Q]`` latent input.
        u_d: ``[K, M]`` inducing values, one row per category.
        z: ``[M, Q]`` inducing inputs.

    Returns:
        ``(means [K], variance)``; the variance is shared by all categories
        and clamped at zero.
    """
    x = np.asarray(x, dtype=np.float64)
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    u_d = np.atleast_2d(np.asarray(u_d, dtype=np.float64))
    if x.shape != (z.shape[1],) or u_d.shape[1] != z.shape[0] or z.shape[1] != p.latent_dim:
        raise DimensionMismatch(f"x {x.shape}, u {u_d.shape}, z {z.shape}, Q={p.latent_dim}")
    log_sf2 = torch.tensor([p.log_signal_variance], dtype=torch.float64)
    log_alpha = torch.as_tensor(p.log_ard_weights)[None]
    zt = torch.as_tensor(z)
    Lk = _kmm_factor(zt, log_sf2, log_alpha, jitter)[0]
    knm = ard_cross_gram(torch.as_tensor(x)[None], zt, log_sf2[0], log_alpha[0])
    w = torch.linalg.solve_triangular(Lk, knm.mT, upper=False)
    var = (p.signal_variance - (w ** 2).sum()).clamp_min(0.0)
    v = torch.linalg.solve_triangular(Lk, torch.as_tensor(u_d).mT, upper=False)
    means = (w.mT @ v)[0]
    return means.numpy(), float(var)


# --------------------------------------------------------------------------
# reparameterized draws


def sample_qx(post: VariationalPosterior, n: int, rng):
    """``x = m_n + s_n * eps``; returns ``(x, eps)``."""
    eps = as_rng(rng).standard_normal(post.latent_dim)
    return post.x_means[n] + np.sqrt(post.x_vars[n]) * eps, eps


def sample_qu(post: VariationalPosterior, d: int, rng):
    """``u_dk = mu_dk + L_d eps_k`` for every category of variable d; returns ``(u, eps)``."""
    k = post.cardinalities[d]
    eps = as_rng(rng).standard_normal((k, post.n_inducing))
    L = post.u_factor[d]
    return post.u_means[d, :k] + eps @ L.T, eps


# --------------------------------------------------------------------------
# the bound


class ElboObjective:
    """The ELBO of one dataset as a torch function of the parameter tensors."""

    def __init__(self, data: CategoricalDataset, config: ModelConfig):
        self.data = data
        self.config = config
        vals = data.values.T
        self.y = torch.as_tensor(np.where(vals == MISSING, 0, vals))
        self.obs = torch.as_tensor((vals != MISSING).astype(np.float64))
        self.kmask = _kmask(data.cardinalities)

    def kl_terms(self, t):
        kl_x = _kl_latents_t(t["x_mean"], t["x_log_var"], self.config.prior_var_x)
        Lk = _kmm_factor(t["z"], t["log_sf2"], t["log_alpha"], self.config.jitter)
        kl_u = _kl_inducing_t(Lk, t["u_mean"], t["u_chol"], self.kmask)
        return kl_x, kl_u, Lk

    def f_samples(self, t, Lk, noise: Noise):
        """Reparameterized weight draws ``[S, D, N, Kmax]`` plus conditional variances ``[S, D, N]``.

        The draws are built category-major and returned as a transposed view.
        """
        ex, eu, ef = (torch.as_tensor(a) for a in (noise.x, noise.u, noise.f))
        x = t["x_mean"] + torch.exp(0.5 * t["x_log_var"]) * ex
        # unit-variance correlations [S, D, N, M]; sf2 is folded into the small
        # [D, M, M] inverse, and matmuls against it are much cheaper than
        # triangular solves on the big tensor
        sf2 = torch.exp(t["log_sf2"])
        corr = ard_cross_gram(x[:, None], t["z"], None, t["log_alpha"])
        a = corr @ (sf2[:, None, None] * torch.cholesky_inverse(Lk))
        var = sf2[:, None] * (1.0 - (a * corr).sum(-1))
        u = t["u_mean"] + eu @ tril_factor(t["u_chol"]).mT[None]
        f = u @ a.mT + torch.sqrt(var.clamp_min(VAR_FLOOR))[:, :, None, :] * ef.mT
        return f.mT, var

    def _masked_logits(self, t, Lk, noise):
        # [S, D, Kmax, N] with padded categories at -inf
        f, _ = self.f_samples(t, Lk, noise)
        return f.mT.masked_fill(~self.kmask[:, :, None], -math.inf)

    def loglik_per_sample(self, t, Lk, noise: Noise):
        g = self._masked_logits(t, Lk, noise)
        top = g.detach().amax(-2)
        lse = top + torch.log(torch.exp(g - top[:, :, None]).sum(-2))
        idx = self.y[None, :, None, :].expand(g.shape[0], -1, 1, -1)
        picked = g.gather(-2, idx)[:, :, 0] - lse
        return (picked * self.obs).sum((1, 2))

    def evaluate(self, t, noise: Noise):
        """Returns ``(elbo_tensor, ElboEstimate)`` on the given noise."""
        kl_x, kl_u, Lk = self.kl_terms(t)
        per_sample = self.loglik_per_sample(t, Lk, noise)
        exp_ll = per_sample.mean()
        value = exp_ll - kl_x - kl_u
        return value, _estimate(per_sample.detach().numpy(), float(kl_x.detach()), float(kl_u.detach()))

    @torch.no_grad()
    def evaluate_chunked(self, t, n_samples, rng=None, noise=None):
        kl_x, kl_u, Lk = self.kl_terms(t)
        if noise is not None:
            chunks = noise.chunks(EVAL_CHUNK)
        else:
            rng = as_rng(rng)
            post_shape = _ShapeOnly(t)
            chunks = (
                draw_noise(min(EVAL_CHUNK, n_samples - i), post_shape, rng)
                for i in range(0, n_samples, EVAL_CHUNK)
            )
        per_sample = np.concatenate([self.loglik_per_sample(t, Lk, c).numpy() for c in chunks])
        return _estimate(per_sample, float(kl_x), float(kl_u))

    @torch.no_grad()
    def predictive_probs(self, t, n_samples, rng):
        """MC average of softmax(f_nd): ``[N, D, Kmax]`` with zeros on padding."""
        rng = as_rng(rng)
        Lk = _kmm_factor(t["z"], t["log_sf2"], t["log_alpha"], self.config.jitter)
        shape = _ShapeOnly(t)
        total = 0.0
        for i in range(0, n_samples, EVAL_CHUNK):
            noise = draw_noise(min(EVAL_CHUNK, n_samples - i), shape, rng)
            total = total + torch.softmax(self._masked_logits(t, Lk, noise), dim=-2).sum(0)
        # [D, Kmax, N] -> [N, D, Kmax]
        return (total / n_samples).permute(2, 0, 1).numpy()


class _ShapeOnly:
    """Duck-types the shape attributes :func:`draw_noise` reads."""

    def __init__(self, t):
        self.x_means = t["x_mean"]
        self.u_means = t["u_mean"]


def _estimate(per_sample, kl_x, kl_u):
    s = per_sample.shape[0]
    exp_ll = float(per_sample.mean())
    se = float(per_sample.std(ddof=1) / np.sqrt(s)) if s > 1 else 0.0
    return ElboEstimate(exp_ll - kl_x - kl_u, kl_x, kl_u, exp_ll, se, s)


def param_tensors(post: VariationalPosterior, kernels, requires_grad=False) -> dict:
    t = post.to_tensors(requires_grad)
    log_sf2, log_alpha = stack_params(kernels)
    t["log_sf2"] = log_sf2.clone().requires_grad_(requires_grad)
    t["log_alpha"] = log_alpha.clone().requires_grad_(requires_grad)
    return t


def elbo(data, post, kernels, config: ModelConfig, rng=None, n_samples=None, noise=None) -> ElboEstimate:
    """Monte Carlo ELBO estimate.

    Uses ``noise`` when given (common random numbers); otherwise draws
    ``n_samples`` (default ``config.mc_samples_eval``) from ``rng``.
    """
    _check_shapes(data, post, kernels)
    if noise is None:
        n_samples = n_samples or config.mc_samples_eval
        rng = as_rng(config.rng_seed if rng is None else rng)
    else:
        n_samples = noise.n_samples
    obj = ElboObjective(data, config)
    return obj.evaluate_chunked(param_tensors(post, kernels), n_samples, rng, noise)


def elbo_gradients(data, post, kernels, config: ModelConfig, rng=None, noise=None, n_samples=None):
    """ELBO estimate and its pathwise gradient on the same draws.

    Returns ``(ElboEstimate, grads)`` where ``grads`` maps each name in
    ``PARAM_NAMES`` to an array shaped like the parameter: the posterior
    fields in their unconstrained form, then ``log_sf2 [D]`` and
    ``log_alpha [D, Q]``.
    """
    _check_shapes(data, post, kernels)
    if noise is None:
        noise = draw_noise(n_samples or config.mc_samples_train, post,
                           as_rng(config.rng_seed if rng is None else rng))
    t = param_tensors(post, kernels, requires_grad=True)
    value, est = ElboObjective(data, config).evaluate(t, noise)
    grads = torch.autograd.grad(value, [t[k] for k in PARAM_NAMES])
    return est, {k: g.numpy().copy() for k, g in zip(PARAM_NAMES, grads)}


def _check_shapes(data, post, kernels):
    if data.n_obs != post.n_obs or tuple(data.cardinalities) != post.cardinalities:
        raise DimensionMismatch("posterior does not match the dataset")
    if len(kernels) != data.n_vars or any(k.latent_dim != post.latent_dim for k in kernels):
        raise DimensionMismatch("kernels do not match the dataset/posterior")
