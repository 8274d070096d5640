import os

import numpy as np
import pytest
import torch

from catlgp.inference import VariationalPosterior
from catlgp.kernel import KernelParams
from catlgp.model import CategoricalDataset, ModelConfig

torch.set_num_threads(int(os.environ.get("CATLGP_THREADS", "1")))


def random_problem(rng, n=5, card=(3, 3), q=2, m=3, missing_frac=0.0):
    """Small dataset plus a generic (non-initial) posterior and kernels."""
    rng = np.random.default_rng(rng)
    d, kmax = len(card), max(card)
    values = np.stack([rng.integers(0, k, size=n) for k in card], axis=1)
    if missing_frac:
        drop = rng.random(values.shape) < missing_frac
        drop[:, 0] = False
        values[drop] = -1
    data = CategoricalDataset(values, card)
    a = rng.standard_normal((d, m, m))
    raw = 0.3 * np.tril(a, -1) + np.einsum("dm,mn->dmn", rng.uniform(-1.5, -0.3, (d, m)), np.eye(m))
    post = VariationalPosterior(
        x_means=rng.standard_normal((n, q)),
        x_log_vars=rng.uniform(-2.0, -0.5, (n, q)),
        inducing_inputs=1.5 * rng.standard_normal((m, q)),
        u_means=rng.standard_normal((d, kmax, m)),
        u_chol_raw=raw,
        cardinalities=card,
    )
    kernels = [KernelParams.from_natural(rng.uniform(0.5, 2.0), rng.uniform(0.3, 1.5, q)) for _ in card]
    return data, post, kernels


@pytest.fixture
def tiny():
    """The N=5, D=2, K=3, Q=2, M=3 model."""
    data, post, kernels = random_problem(0)
    return data, post, kernels, ModelConfig(latent_dim=2, n_inducing=3, mc_samples_train=8)


# one PASS/FAIL line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
