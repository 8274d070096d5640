import numpy as np
import pytest
import torch

from catlgp.errors import DimensionMismatch, NotPositiveDefinite
from catlgp.linalg import cho_solve, jittered_cholesky, logdet_from_factor, tri_solve


def random_spd(rng, n, cond=10.0):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (q * np.geomspace(1.0, 1.0 / cond, n)) @ q.T


def test_cholesky_2x2_by_hand():
    L, jit = jittered_cholesky(np.array([[4.0, 2.0], [2.0, 3.0]]))
    np.testing.assert_allclose(L, [[2.0, 0.0], [1.0, np.sqrt(2.0)]], atol=1e-15)
    assert jit == 0.0


def test_identity_and_diagonal():
    L, _ = jittered_cholesky(np.eye(3))
    np.testing.assert_array_equal(L, np.eye(3))
    L, _ = jittered_cholesky(np.diag([4.0, 9.0, 0.25]))
    np.testing.assert_allclose(np.diag(L), [2.0, 3.0, 0.5])


@pytest.mark.parametrize("n", [1, 3, 8, 20])
def test_reconstruction_random_spd(n):
    rng = np.random.default_rng(n)
    A = random_spd(rng, n, cond=1e4)
    L, jit = jittered_cholesky(A)
    assert jit == 0.0
    assert np.allclose(np.triu(L, 1), 0.0)
    np.testing.assert_allclose(L @ L.T, A, atol=1e-12)


def test_rank_deficient_needs_jitter():
    v = np.array([[1.0], [2.0], [3.0]])
    A = v @ v.T
    L, jit = jittered_cholesky(A)
    base = 1e-6 * np.mean(np.diag(A))
    assert jit >= base
    # jitter follows the doubling ladder
    k = np.log2(jit / base)
    assert abs(k - round(k)) < 1e-9
    np.testing.assert_allclose(L @ L.T, A + jit * np.eye(3), atol=1e-10)


def test_escalation_exhausted():
    with pytest.raises(NotPositiveDefinite):
        jittered_cholesky(-np.eye(2), max_escalations=3)


def test_non_square_rejected():
    with pytest.raises(DimensionMismatch):
        jittered_cholesky(np.ones((2, 3)))


def test_batched_torch_per_matrix_jitter():
    v = torch.tensor([[1.0], [1.0]], dtype=torch.float64)
    A = torch.stack([torch.eye(2, dtype=torch.float64) * 2, v @ v.T])
    L, jit = jittered_cholesky(A)
    assert isinstance(L, torch.Tensor)
    assert jit[0] == 0.0 and jit[1] > 0.0
    torch.testing.assert_close(L[0] @ L[0].T, A[0])


def test_tri_solve_both_sides():
    rng = np.random.default_rng(1)
    A = random_spd(rng, 5)
    L = np.linalg.cholesky(A)
    b = rng.standard_normal(5)
    np.testing.assert_allclose(L @ tri_solve(L, b), b, atol=1e-12)
    np.testing.assert_allclose(L.T @ tri_solve(L, b, "backward"), b, atol=1e-12)
    B = rng.standard_normal((5, 3))
    np.testing.assert_allclose(A @ cho_solve(L, B), B, atol=1e-10)
    with pytest.raises(ValueError):
        tri_solve(L, b, "sideways")
    with pytest.raises(DimensionMismatch):
        tri_solve(L, np.ones(4))


def _charpoly_det(A):
    # determinant as the constant term of the characteristic polynomial (Faddeev-LeVerrier)
    n = A.shape[0]
    M = np.zeros_like(A)
    c = 1.0
    for k in range(1, n + 1):
        M = A @ M + c * np.eye(n)
        c = -np.trace(A @ M) / k
    return (-1) ** n * c


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_logdet_matches_charpoly(n):
    rng = np.random.default_rng(10 + n)
    A = random_spd(rng, n, cond=50.0) * 3.0
    L, _ = jittered_cholesky(A)
    assert logdet_from_factor(L) == pytest.approx(np.log(_charpoly_det(A)), rel=1e-10, abs=1e-12)


def test_logdet_by_hand():
    L, _ = jittered_cholesky(np.array([[4.0, 2.0], [2.0, 3.0]]))
    assert logdet_from_factor(L) == pytest.approx(np.log(8.0), abs=1e-14)


def test_torch_inputs_keep_gradients():
    a = torch.tensor([[2.0, 0.5], [0.5, 1.0]], dtype=torch.float64, requires_grad=True)
    L, _ = jittered_cholesky(a)
    logdet_from_factor(L).backward()
    # d log|A| / dA = A^{-1}
    torch.testing.assert_close(a.grad, torch.linalg.inv(a.detach()))
