"""Marginal maximum-likelihood fitting with beta profiled out.

The variance block is optimised on an unconstrained log-Cholesky scale
(``D = L L^T`` with log-diagonal ``L``, ``sigma_r^2 = exp(tau)``) by BFGS
using analytic scores. An interior optimum is then polished by a few
Fisher-scoring steps on the natural scale so that the score sum reaches the
absolute gradient tolerance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy import optimize

from .data import Dataset, FittedModel, ParamVector, cluster_views
from .likelihood import (
    ClusterKernel,
    NotPositiveDefiniteError,
    build_kernel,
    gls_cross_products,
    kernel_loglik,
)
from .scores import cluster_variance_scores, gradient, variance_information

log = logging.getLogger(__name__)

BOUNDARY_EIG = 1e-6
INFO_COND = 1e-8


@dataclass(frozen=True)
class FitOptions:
    max_iter: int = 500
    rel_tol: float = 1e-10
    grad_tol: float = 1e-6
    max_polish: int = 50
    initializer: str = "ols"

    def __post_init__(self) -> None:
        if self.rel_tol <= 0 or self.grad_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.initializer not in ("ols", "given"):
            raise ValueError(f"unknown initializer {self.initializer!r}")


class FitError(RuntimeError):
    pass


def profile_beta(
    sigma2: NDArray[np.float64], data: Dataset
) -> tuple[NDArray[np.float64], float]:
    """GLS estimate of beta for fixed variance parameters and the log-likelihood there."""
    beta, kernels, ll = _profile(np.asarray(sigma2, dtype=float), data)
    return beta, ll


def _profile(sigma2: NDArray[np.float64], data: Dataset):
    params = ParamVector.from_sigma2(np.zeros(data.p), sigma2, data.q, data.diagonal)
    kernels = [build_kernel(b.Z, params) for b in data.buckets]
    XtVX, XtVy = gls_cross_products(kernels, data)
    try:
        beta = np.linalg.solve(XtVX, XtVy)
    except np.linalg.LinAlgError:
        raise FitError("singular GLS normal equations") from None
    for ker, b in zip(kernels, data.buckets):
        ker.resid = b.y - b.X @ beta
    return beta, kernels, kernel_loglik(kernels, data)


# ---------------------------------------------------------------------------
# log-Cholesky working scale
# ---------------------------------------------------------------------------


def _to_working(D: NDArray[np.float64], sigma_r2: float, data: Dataset) -> NDArray[np.float64]:
    if data.diagonal:
        L = np.diag(np.sqrt(np.maximum(np.diag(D), 1e-12)))
    else:
        w, U = np.linalg.eigh(D)
        scale = max(w.max(), sigma_r2, 1e-12)
        w = np.maximum(w, 1e-8 * scale)
        L = np.linalg.cholesky((U * w) @ U.T)
    theta = []
    for a, b in data.structure:
        theta.append(np.log(L[a, a]) if a == b else L[a, b])
    theta.append(np.log(sigma_r2))
    return np.array(theta)


def _cholesky_factor(theta: NDArray[np.float64], data: Dataset) -> NDArray[np.float64]:
    L = np.zeros((data.q, data.q))
    for value, (a, b) in zip(theta[:-1], data.structure):
        L[a, b] = np.exp(value) if a == b else value
    return L


def _from_working(theta: NDArray[np.float64], data: Dataset) -> NDArray[np.float64]:
    L = _cholesky_factor(theta, data)
    D = L @ L.T
    return np.array([D[a, b] for a, b in data.structure] + [np.exp(theta[-1])])


def _chain(theta: NDArray[np.float64], g_sigma2: NDArray[np.float64], data: Dataset) -> NDArray[np.float64]:
    """Map natural-scale variance scores to the working scale."""
    L = _cholesky_factor(theta, data)
    G = np.zeros((data.q, data.q))
    for g, (a, b) in zip(g_sigma2[:-1], data.structure):
        if a == b:
            G[a, a] = g
        else:
            G[a, b] = G[b, a] = 0.5 * g
    dL = 2.0 * G @ L
    out = []
    for a, b in data.structure:
        out.append(dL[a, b] * L[a, a] if a == b else dL[a, b])
    out.append(g_sigma2[-1] * np.exp(theta[-1]))
    return np.array(out)


def _variance_gradient(kernels: list[ClusterKernel], data: Dataset) -> NDArray[np.float64]:
    g = np.zeros(data.K)
    for ker, b in zip(kernels, data.buckets):
        g += cluster_variance_scores(ker, b, data.structure).sum(axis=0)
    return g


# ---------------------------------------------------------------------------
# initial values
# ---------------------------------------------------------------------------


def initial_params(data: Dataset) -> ParamVector:
    """OLS beta, per-cluster OLS random-coefficient covariance, pooled residual variance."""
    beta, *_ = np.linalg.lstsq(data.X, data.y, rcond=None)
    e = data.y - data.X @ beta
    total_var = max(float(np.var(e)), 1e-12)
    coefs, ss, df = [], 0.0, 0
    for j, (yj, Xj, Zj) in enumerate(cluster_views(data)):
        ej = e[data.offsets[j]:data.offsets[j + 1]]
        if len(ej) > data.q and np.linalg.matrix_rank(Zj) == data.q:
            bj, *_ = np.linalg.lstsq(Zj, ej, rcond=None)
            coefs.append(bj)
            ss += float(np.sum((ej - Zj @ bj) ** 2))
            df += len(ej) - data.q
    if len(coefs) >= 2 and df > 0 and ss > 0:
        D = np.atleast_2d(np.cov(np.array(coefs), rowvar=False))
        sigma_r2 = ss / df
    else:
        D = 0.5 * total_var * np.eye(data.q)
        sigma_r2 = 0.5 * total_var
    if data.diagonal:
        D = np.diag(np.diag(D))
    w, U = np.linalg.eigh(D)
    floor = 1e-2 * max(w.max(), 1e-3 * sigma_r2)
    D = (U * np.maximum(w, floor)) @ U.T
    return ParamVector(beta, 0.5 * (D + D.T), sigma_r2, data.diagonal)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def fit_ml(data: Dataset, opts: FitOptions | None = None, start: ParamVector | None = None) -> FittedModel:
    """Fit the two-level LMM by marginal maximum likelihood.

    Never raises on non-convergence: the best iterate is returned with
    ``converged=False``. Fits whose ``D`` is near-singular, whose residual
    variance collapses, or whose expected information is ill-conditioned
    are flagged ``boundary=True``.
    """
    opts = opts or FitOptions()
    if start is None:
        if opts.initializer == "given":
            raise ValueError("initializer 'given' requires start parameters")
        start = initial_params(data)
    N = data.N
    theta0 = _to_working(start.D, start.sigma_r2, data)
    init_ll = _profile(_from_working(theta0, data), data)[2]

    def objective(theta):
        try:
            _, kernels, ll = _profile(_from_working(theta, data), data)
        except (NotPositiveDefiniteError, FitError):
            return np.inf, np.zeros_like(theta)
        g = _chain(theta, _variance_gradient(kernels, data), data)
        return -ll / N, -g / N

    res = optimize.minimize(
        objective, theta0, jac=True, method="BFGS",
        options={"maxiter": opts.max_iter, "gtol": opts.grad_tol / N},
    )
    theta = res.x
    sigma2 = _from_working(theta, data)
    beta, kernels, ll = _profile(sigma2, data)
    n_iter = int(res.nit)
    working_grad = float(np.max(np.abs(_chain(theta, _variance_gradient(kernels, data), data))))

    sigma2, beta, kernels, ll, steps, last_change, blocked = _polish(sigma2, beta, kernels, ll, data, opts)
    n_iter += steps

    params = ParamVector.from_sigma2(beta, sigma2, data.q, data.diagonal)
    g = gradient(kernels, data)
    grad_norm = float(np.max(np.abs(g)))
    boundary, reason = _boundary(params, kernels, data, blocked and grad_norm >= opts.grad_tol)
    rel_ok = last_change <= opts.rel_tol * max(1.0, abs(ll))
    if boundary:
        converged = working_grad < opts.grad_tol * max(1.0, abs(ll)) or grad_norm < opts.grad_tol
    else:
        converged = grad_norm < opts.grad_tol and rel_ok
    msg = res.message if isinstance(res.message, str) else str(res.message)
    if not converged:
        log.debug("fit did not converge: grad=%.3g change=%.3g (%s)", grad_norm, last_change, msg)
    return FittedModel(
        params=params, loglik=ll, converged=bool(converged), n_iter=n_iter, grad_norm=grad_norm,
        kernels=kernels, boundary=boundary, boundary_reason=reason, message=msg, init_loglik=init_ll,
    )


def _polish(sigma2, beta, kernels, ll, data: Dataset, opts: FitOptions):
    """Fisher scoring on the natural scale with step halving.

    Returns the updated state plus the number of accepted steps, the last
    log-likelihood change and whether a step was blocked by the PSD cone.
    """
    steps, last_change, blocked = 0, np.inf, False
    for _ in range(opts.max_polish):
        g = _variance_gradient(kernels, data)
        if np.max(np.abs(g)) < opts.grad_tol and last_change <= opts.rel_tol * max(1.0, abs(ll)):
            break
        info = variance_information(kernels, data)
        try:
            delta = np.linalg.solve(info, g)
        except np.linalg.LinAlgError:
            break
        step = 1.0
        accepted = False
        for _ in range(30):
            cand = sigma2 + step * delta
            if _admissible(cand, data):
                try:
                    new_beta, new_kernels, new_ll = _profile(cand, data)
                except (NotPositiveDefiniteError, FitError):
                    new_ll = -np.inf
                if new_ll >= ll - 1e-12 * max(1.0, abs(ll)):
                    accepted = True
                    break
            else:
                blocked = True
            step *= 0.5
        if not accepted:
            break
        last_change = abs(new_ll - ll)
        sigma2, beta, kernels, ll = cand, new_beta, new_kernels, new_ll
        steps += 1
    return sigma2, beta, kernels, ll, steps, last_change, blocked


def _admissible(sigma2: NDArray[np.float64], data: Dataset) -> bool:
    if sigma2[-1] <= 0:
        return False
    D = ParamVector.from_sigma2(np.zeros(data.p), np.r_[sigma2[:-1], 1.0], data.q, data.diagonal).D
    return bool(np.linalg.eigvalsh(D).min() >= 0)


def _boundary(params: ParamVector, kernels, data: Dataset, blocked: bool) -> tuple[bool, str]:
    w = np.linalg.eigvalsh(params.D)
    scale = w.max() + params.sigma_r2
    if w.min() < BOUNDARY_EIG * scale:
        return True, f"random-effect covariance is near singular (min eigenvalue {w.min():.3g})"
    if params.sigma_r2 < BOUNDARY_EIG * scale:
        return True, f"residual variance collapsed to {params.sigma_r2:.3g}"
    XtVX, _ = gls_cross_products(kernels, data)
    blocks = [np.linalg.eigvalsh(XtVX), np.linalg.eigvalsh(variance_information(kernels, data))]
    eig = np.concatenate(blocks)
    if eig.min() < INFO_COND * eig.max():
        return True, f"expected information is ill-conditioned (ratio {eig.min() / eig.max():.3g})"
    if blocked:
        g = _variance_gradient(kernels, data)
        return True, f"optimum is on the PSD boundary (score norm {np.max(np.abs(g)):.3g})"
    return False, ""
