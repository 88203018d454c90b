from __future__ import annotations

import numpy as np
import pytest
from scipy.linalg import block_diag

from lmmscore.data import ParamVector, from_arrays
from lmmscore.estimator import FitOptions, fit_ml
from lmmscore.likelihood import data_kernels
from lmmscore.data import FittedModel

ACCEPTANCE_LINES: list[str] = []


def random_instance(rng: np.random.Generator, q: int | None = None, max_J: int = 8, max_n: int = 6):
    """Small unbalanced dataset plus an arbitrary valid parameter vector."""
    q = q or int(rng.integers(1, 3))
    J = int(rng.integers(2, max_J + 1))
    sizes = rng.integers(1, max_n + 1, size=J)
    sizes[0] = max(sizes[0], 3)
    g = np.repeat(np.arange(J), sizes)
    N = len(g)
    t = rng.normal(size=N)
    X = np.column_stack([np.ones(N), t, rng.normal(size=N)])
    Z = X[:, :q]
    A = rng.normal(size=(q, q))
    D = A @ A.T + 0.3 * np.eye(q)
    params = ParamVector(rng.normal(size=3), D, float(rng.uniform(0.5, 2.0)))
    y = rng.normal(size=N) * 2 + X @ params.beta
    return from_arrays(y, X, Z, g), params


def dense_V(data, params):
    blocks = []
    for j in range(data.J):
        s = slice(data.offsets[j], data.offsets[j + 1])
        Zj = data.Z[s]
        blocks.append(Zj @ params.D @ Zj.T + params.sigma_r2 * np.eye(Zj.shape[0]))
    return block_diag(*blocks)


def model_at(data, params) -> FittedModel:
    """A FittedModel evaluated at arbitrary parameters (no optimisation)."""
    return FittedModel(params=params, loglik=np.nan, converged=True, n_iter=0, grad_norm=np.nan,
                       kernels=data_kernels(data, params))


def sleepstudy_like(rng: np.random.Generator, J: int = 18, beta=(251.4, 10.47)):
    days = np.tile(np.arange(10.0), J)
    g = np.repeat(np.arange(J), 10)
    D = np.array([[612.1, 9.6], [9.6, 35.07]])
    b = rng.multivariate_normal([0, 0], D, size=J)
    y = beta[0] + beta[1] * days + b[g, 0] + b[g, 1] * days + rng.normal(0, np.sqrt(654.9), 10 * J)
    X = np.column_stack([np.ones_like(days), days])
    return from_arrays(y, X, X, g)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def sleep_fit():
    data = sleepstudy_like(np.random.default_rng(7), J=48)
    return data, fit_ml(data, FitOptions())


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
