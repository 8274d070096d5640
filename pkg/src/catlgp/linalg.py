"""Dense linear algebra helpers: jittered Cholesky, triangular solves, log-determinants.

Every function accepts either NumPy arrays or float64 torch tensors (optionally
with leading batch dimensions) and returns the same kind it was given. Torch
inputs stay on the autograd tape.
"""
from __future__ import annotations

import numpy as np
import torch

from .errors import DimensionMismatch, NotPositiveDefinite

DEFAULT_JITTER = 1e-6
MAX_ESCALATIONS = 10


def _to_tensor(a):
    if isinstance(a, torch.Tensor):
        return a, False
    return torch.as_tensor(np.asarray(a, dtype=np.float64)), True


def _back(t, was_numpy):
    return t.detach().numpy().copy() if was_numpy else t


def _check_square(A):
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise DimensionMismatch(f"expected square matrix, got shape {tuple(A.shape)}")


def jittered_cholesky(A, base_jitter: float = DEFAULT_JITTER, max_escalations: int = MAX_ESCALATIONS):
    """Lower Cholesky factor of ``A``, adding diagonal jitter only if needed.

    The plain factorization is tried first. On failure the jitter starts at
    ``base_jitter * mean(diag(A))`` and doubles on every further failure, up
    to ``max_escalations`` attempts. Batched inputs get one jitter per matrix.

    Returns:
        ``(L, jitter)`` where ``L @ L.T == A + jitter * I``. ``jitter`` is a
        float for a single matrix and an array of shape ``A.shape[:-2]`` for
        a batch.

    Raises:
        NotPositiveDefinite: if every escalation fails.
    """
    At, was_numpy = _to_tensor(A)
    _check_square(At)
    batch = At.shape[:-2]
    n = At.shape[-1]
    eye = torch.eye(n, dtype=At.dtype)

    L, info = torch.linalg.cholesky_ex(At)
    jitter = torch.zeros(batch, dtype=At.dtype)
    failed = info != 0
    if failed.any():
        diag_mean = At.detach().diagonal(dim1=-2, dim2=-1).mean(-1)
        scale = torch.where(diag_mean > 0, diag_mean, torch.ones_like(diag_mean))
        step = base_jitter * scale
        for _ in range(max_escalations):
            jitter = torch.where(failed, step, jitter)
            L, info = torch.linalg.cholesky_ex(At + jitter[..., None, None] * eye)
            failed = info != 0
            if not failed.any():
                break
            step = torch.where(failed, 2.0 * step, step)
        else:
            raise NotPositiveDefinite(
                f"Cholesky failed after {max_escalations} jitter escalations "
                f"(last jitter {float(jitter.max()):.3g}); check kernel hyperparameters "
                "or duplicated inducing inputs"
            )
    jit = float(jitter) if jitter.ndim == 0 else _back(jitter, True)
    return _back(L, was_numpy), jit


def tri_solve(L, B, side: str = "forward"):
    """Solve ``L X = B`` (``side="forward"``) or ``L^T X = B`` (``side="backward"``)."""
    Lt, was_numpy = _to_tensor(L)
    Bt, _ = _to_tensor(B)
    _check_square(Lt)
    vector = Bt.ndim == 1
    if vector:
        Bt = Bt[:, None]
    if Bt.shape[-2] != Lt.shape[-1]:
        raise DimensionMismatch(
            f"factor is {tuple(Lt.shape[-2:])} but right-hand side has {Bt.shape[-2]} rows"
        )
    if side == "forward":
        X = torch.linalg.solve_triangular(Lt, Bt, upper=False)
    elif side == "backward":
        X = torch.linalg.solve_triangular(Lt.mT, Bt, upper=True)
    else:
        raise ValueError(f"side must be 'forward' or 'backward', not {side!r}")
    if vector:
        X = X[:, 0]
    return _back(X, was_numpy)


def logdet_from_factor(L):
    """``log|A|`` from the Cholesky factor of ``A``."""
    Lt, was_numpy = _to_tensor(L)
    out = 2.0 * torch.log(Lt.diagonal(dim1=-2, dim2=-1)).sum(-1)
    if was_numpy:
        return float(out) if out.ndim == 0 else out.numpy()
    return out


def cho_solve(L, B):
    """``A^{-1} B`` given the lower factor ``L`` of ``A``."""
    return tri_solve(L, tri_solve(L, B, "forward"), "backward")
