"""Data/config types, the softmax link, and forward simulation of the generative model.

Generative process for N observations of D categorical variables:

    x_nq   ~ N(0, prior_var_x)
    F_dk   ~ GP(0, k_d)           one kernel per variable d, shared over k
    f_ndk  = F_dk(x_n)
    y_nd   ~ Categorical(softmax(f_nd))
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionMismatch, EmptyVector, IndexOutOfRange, InputError
from .kernel import KernelParams, gram
from .linalg import jittered_cholesky

MISSING = -1

# two-cluster generator: component means +-2, unit variance, equal weights
CLUSTER_MEANS = (-2.0, 2.0)
CLUSTER_STD = 1.0


def as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


@dataclass(frozen=True)
class CategoricalDataset:
    """N x D matrix of category indices; ``MISSING`` (-1) marks absent entries.

    ``strict=False`` skips the check that every row has an observed entry
    (needed for fully-missing edge cases).
    """

    values: np.ndarray
    cardinalities: tuple
    strict: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.int64, copy=True)
        if values.ndim != 2:
            raise DimensionMismatch(f"values must be N x D, got shape {values.shape}")
        card = tuple(int(k) for k in self.cardinalities)
        if len(card) != values.shape[1]:
            raise DimensionMismatch(f"{len(card)} cardinalities for {values.shape[1]} variables")
        if any(k < 2 for k in card):
            raise InputError(f"every cardinality must be >= 2, got {card}")
        observed = values != MISSING
        if np.any(values[observed] < 0) or np.any(values >= np.asarray(card)[None, :]):
            raise InputError("category index outside [0, K_d)")
        if self.strict and values.shape[0] and not observed.any(axis=1).all():
            bad = int(np.flatnonzero(~observed.any(axis=1))[0])
            raise InputError(f"observation {bad} has no observed values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "cardinalities", card)

    @property
    def n_obs(self) -> int:
        return self.values.shape[0]

    @property
    def n_vars(self) -> int:
        return self.values.shape[1]

    @property
    def observed(self) -> np.ndarray:
        return self.values != MISSING

    def one_hot(self) -> np.ndarray:
        """N x sum(K_d) indicator matrix; missing entries are all-zero blocks."""
        blocks = []
        for d, k in enumerate(self.cardinalities):
            col = self.values[:, d]
            block = np.zeros((self.n_obs, k))
            obs = col != MISSING
            block[np.flatnonzero(obs), col[obs]] = 1.0
            blocks.append(block)
        return np.hstack(blocks) if blocks else np.zeros((self.n_obs, 0))


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 2
    n_inducing: int = 10
    prior_var_x: float = 1.0
    mc_samples_train: int = 10
    mc_samples_eval: int = 500
    step_size: float = 1e-2
    max_iters: int = 2000
    # relative change of the smoothed ELBO that counts as converged; 0 disables
    tol: float = 1e-4
    smoothing_window: int = 50
    freeze_inducing: bool = False
    # iterations at the start during which q(X) is held at its initial value
    warmup_iters: int = 100
    # added to K_MM as jitter * sf2 before factorizing
    jitter: float = 1e-6
    init_x_var: float = 0.1
    init_u_var: float = 0.1
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("latent_dim", "n_inducing", "mc_samples_train", "mc_samples_eval"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1")
        if self.max_iters < 0 or self.warmup_iters < 0:
            raise InputError("max_iters and warmup_iters must be >= 0")
        if self.prior_var_x <= 0:
            raise InputError("prior_var_x must be positive")
        if self.step_size <= 0:
            raise InputError("step_size must be positive")

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def check_against(self, data: CategoricalDataset) -> None:
        if self.n_inducing > data.n_obs:
            warnings.warn(
                f"n_inducing={self.n_inducing} exceeds the number of observations {data.n_obs}",
                stacklevel=2,
            )


@dataclass(frozen=True)
class LatentWeights:
    """Per-variable weight blocks; ``f[d]`` has shape ``(N, K_d)``."""

    f: list

    def __getitem__(self, nd):
        n, d = nd
        return self.f[d][n]


def softmax(f) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.size == 0:
        raise EmptyVector("softmax of an empty vector")
    e = np.exp(f - f.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_at(f, k: int) -> float:
    f = np.asarray(f, dtype=np.float64)
    if f.size == 0:
        raise EmptyVector("log-softmax of an empty vector")
    if not 0 <= k < f.shape[-1]:
        raise IndexOutOfRange(f"category {k} outside [0, {f.shape[-1]})")
    top = f.max()
    return float(f[k] - top - np.log(np.exp(f - top).sum()))


def sample_categories(probs, rng) -> np.ndarray:
    """One categorical draw per row of ``probs`` by inverse-CDF."""
    probs = np.atleast_2d(probs)
    u = as_rng(rng).random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def sample_prior_latents(n: int, config: ModelConfig, rng) -> np.ndarray:
    return np.sqrt(config.prior_var_x) * as_rng(rng).standard_normal((n, config.latent_dim))


def forward_simulate(X, kernels, cardinalities, rng):
    """Draw GP weights at the rows of ``X`` and sample a dataset from them.

    Returns ``(LatentWeights, CategoricalDataset)``.
    """
    rng = as_rng(rng)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if len(kernels) != len(cardinalities):
        raise DimensionMismatch(f"{len(kernels)} kernels for {len(cardinalities)} variables")
    n = X.shape[0]
    f = []
    values = np.empty((n, len(cardinalities)), dtype=np.int64)
    for d, (p, k) in enumerate(zip(kernels, cardinalities)):
        L, _ = jittered_cholesky(gram(X, p))
        fd = L @ rng.standard_normal((n, k))
        f.append(fd)
        values[:, d] = sample_categories(softmax(fd), rng)
    return LatentWeights(f), CategoricalDataset(values, tuple(cardinalities))


def make_two_cluster_inputs(n: int, rng, return_labels: bool = False):
    """Scalar inputs from an equal-weight two-Gaussian mixture (means +-2, sd 1).

    Component labels are a shuffled balanced assignment, so any ``n >= 2``
    has both components represented.
    """
    rng = as_rng(rng)
    labels = rng.permutation(np.arange(n) % 2)
    X = np.asarray(CLUSTER_MEANS)[labels] + CLUSTER_STD * rng.standard_normal(n)
    X = X[:, None]
    return (X, labels) if return_labels else X


# ground-truth kernel of the two-cluster experiment: logit sd 3, lengthscale 2
TRUTH_SIGNAL_VARIANCE = 9.0
TRUTH_ARD_WEIGHT = 0.25


def default_truth_kernels(n_vars: int, latent_dim: int = 1, signal_variance: float = TRUTH_SIGNAL_VARIANCE,
                          ard_weight: float = TRUTH_ARD_WEIGHT):
    """Ground-truth kernels used by the synthetic generators."""
    return [
        KernelParams.from_natural(signal_variance, np.full(latent_dim, ard_weight))
        for _ in range(n_vars)
    ]
