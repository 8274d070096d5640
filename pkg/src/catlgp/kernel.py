"""ARD squared-exponential kernel.

    k(x, x') = sf2 * exp(-0.5 * sum_q alpha_q (x_q - x'_q)^2)

Each categorical variable owns one :class:`KernelParams`. Positive
hyperparameters are stored as logs so unconstrained gradient steps keep them
positive.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DimensionMismatch


@dataclass(frozen=True)
class KernelParams:
    log_signal_variance: float
    log_ard_weights: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.log_ard_weights, dtype=np.float64))
        if w.ndim != 1:
            raise DimensionMismatch("ARD weights must be a vector")
        object.__setattr__(self, "log_ard_weights", w)
        object.__setattr__(self, "log_signal_variance", float(self.log_signal_variance))

    @classmethod
    def from_natural(cls, signal_variance, ard_weights):
        if signal_variance <= 0:
            raise ValueError("signal variance must be positive")
        ard = np.atleast_1d(np.asarray(ard_weights, dtype=np.float64))
        if np.any(ard < 0):
            raise ValueError("ARD weights must be non-negative")
        with np.errstate(divide="ignore"):
            return cls(np.log(signal_variance), np.log(ard))

    @property
    def signal_variance(self) -> float:
        return float(np.exp(self.log_signal_variance))

    @property
    def ard_weights(self) -> np.ndarray:
        return np.exp(self.log_ard_weights)

    @property
    def latent_dim(self) -> int:
        return self.log_ard_weights.shape[0]


def stack_params(kernels):
    """Per-variable params -> ``(log_sf2 [D], log_alpha [D, Q])`` float64 tensors."""
    log_sf2 = torch.tensor([k.log_signal_variance for k in kernels], dtype=torch.float64)
    log_alpha = torch.as_tensor(np.stack([k.log_ard_weights for k in kernels]))
    return log_sf2, log_alpha


def unstack_params(log_sf2, log_alpha):
    sf = np.asarray(log_sf2.detach() if isinstance(log_sf2, torch.Tensor) else log_sf2)
    la = np.asarray(log_alpha.detach() if isinstance(log_alpha, torch.Tensor) else log_alpha)
    return [KernelParams(float(sf[d]), la[d].copy()) for d in range(sf.shape[0])]


def ard_cross_gram(X, Z, log_sf2, log_alpha):
    """Batched torch cross-covariance.

    Shapes: ``X [..., A, Q]``, ``Z [..., M, Q]``, ``log_sf2 [...]``,
    ``log_alpha [..., Q]`` with broadcastable leading dims. Returns ``[..., A, M]``.
    ``log_sf2=None`` gives the unit-variance correlation.

    The exponent comes out of a single matmul of augmented inputs,
    ``[x*alpha, -x'Ax/2, 1] . [z, 1, -z'Az/2] = -r2/2``, clamped at zero.
    """
    alpha = torch.exp(log_alpha)[..., None, :]
    xa = X * alpha
    hx = -0.5 * (xa * X).sum(-1, keepdim=True)
    hz = -0.5 * (Z * Z * alpha).sum(-1, keepdim=True)
    left = torch.cat([xa, hx, torch.ones_like(hx)], -1)
    zb = Z.expand(hz.shape[:-1] + Z.shape[-1:])
    right = torch.cat([zb, torch.ones_like(hz), hz], -1)
    K = torch.exp((left @ right.mT).clamp_max(0.0))
    if log_sf2 is None:
        return K
    return torch.exp(log_sf2)[..., None, None] * K


def _as_2d(X, name):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise DimensionMismatch(f"{name} must be a matrix, got shape {X.shape}")
    return X


def _check_q(X, p, name="X"):
    if X.shape[1] != p.latent_dim:
        raise DimensionMismatch(
            f"{name} has {X.shape[1]} columns but the kernel has {p.latent_dim} ARD weights"
        )


def eval_kernel(x, x2, p: KernelParams) -> float:
    x = np.asarray(x, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x.shape != x2.shape or x.shape != (p.latent_dim,):
        raise DimensionMismatch(f"shapes {x.shape}, {x2.shape} vs Q={p.latent_dim}")
    return p.signal_variance * float(np.exp(-0.5 * np.sum(p.ard_weights * (x - x2) ** 2)))


def cross_gram(X, Z, p: KernelParams) -> np.ndarray:
    X = _as_2d(X, "X")
    Z = _as_2d(Z, "Z")
    _check_q(X, p)
    _check_q(Z, p, "Z")
    K = ard_cross_gram(
        torch.as_tensor(X),
        torch.as_tensor(Z),
        torch.tensor(p.log_signal_variance, dtype=torch.float64),
        torch.as_tensor(p.log_ard_weights),
    )
    return K.numpy()


def gram(X, p: KernelParams) -> np.ndarray:
    """Symmetric Gram matrix with the diagonal pinned to exactly ``sf2``."""
    K = cross_gram(X, X, p)
    K = 0.5 * (K + K.T)
    np.fill_diagonal(K, p.signal_variance)
    return K


def kernel_param_grads(X, Z, p: KernelParams):
    """Derivatives of ``cross_gram(X, Z, p)`` w.r.t. the log hyperparameters.

    Returns ``(dK_dlog_sf2 [A, M], dK_dlog_alpha [Q, A, M])``.
    """
    X = _as_2d(X, "X")
    Z = _as_2d(Z, "Z")
    _check_q(X, p)
    _check_q(Z, p, "Z")
    K = cross_gram(X, Z, p)
    sq = (X[:, None, :] - Z[None, :, :]) ** 2
    d_alpha = -0.5 * p.ard_weights[:, None, None] * np.moveaxis(sq, -1, 0) * K[None]
    return K.copy(), d_alpha
