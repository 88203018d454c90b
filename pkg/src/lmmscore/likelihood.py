"""Per-cluster marginal covariance, log-likelihood and covariance derivatives.

All functions work on a single cluster (``Z`` of shape ``(n, q)``) or on a
stack of equal-size clusters (``(B, n, q)``); the full ``N x N`` marginal
covariance is never formed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .data import Dataset, FittedModel, ParamVector, variance_structure

LOG_2PI = np.log(2.0 * np.pi)


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """A marginal covariance block or information matrix is not positive definite."""


@dataclass
class ClusterKernel:
    """Cholesky-factored marginal covariance of one cluster or a stack of them.

    Attributes:
        V: ``Z D Z^T + sigma_r^2 I``.
        chol: lower Cholesky factor of ``V``.
        Vinv: ``V^{-1}``.
        logdet: ``log|V|`` per cluster.
        resid: ``y - X beta``, or ``None`` if built without data.
    """

    V: NDArray[np.float64]
    chol: NDArray[np.float64]
    Vinv: NDArray[np.float64]
    logdet: NDArray[np.float64]
    resid: NDArray[np.float64] | None = None

    def solve(self, b: NDArray[np.float64]) -> NDArray[np.float64]:
        """Apply ``V^{-1}`` to a vector (``(..., n)``) or matrix (``(..., n, m)``)."""
        if b.ndim == self.Vinv.ndim - 1:
            return np.einsum("...ij,...j->...i", self.Vinv, b)
        return self.Vinv @ b


def marginal_covariance(Z: NDArray[np.float64], D: NDArray[np.float64], sigma_r2: float) -> NDArray[np.float64]:
    n = Z.shape[-2]
    return np.einsum("...ia,ab,...jb->...ij", Z, D, Z) + sigma_r2 * np.eye(n)


def build_kernel(
    Z: NDArray[np.float64],
    params: ParamVector,
    y: NDArray[np.float64] | None = None,
    X: NDArray[np.float64] | None = None,
) -> ClusterKernel:
    """Factor ``V_j`` for one cluster or a stack of equal-size clusters.

    Raises:
        NotPositiveDefiniteError: if a Cholesky pivot is non-positive.
    """
    V = marginal_covariance(Z, params.D, params.sigma_r2)
    try:
        chol = np.linalg.cholesky(V)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"marginal covariance is not positive definite: {exc}") from None
    eye = np.broadcast_to(np.eye(V.shape[-1]), V.shape)
    Linv = np.linalg.solve(chol, eye)
    Vinv = np.swapaxes(Linv, -1, -2) @ Linv
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)
    resid = None
    if y is not None and X is not None:
        resid = y - X @ params.beta
    return ClusterKernel(V, chol, Vinv, logdet, resid)


def data_kernels(data: Dataset, params: ParamVector) -> list[ClusterKernel]:
    """One batched kernel per size bucket of ``data``."""
    return [build_kernel(b.Z, params, b.y, b.X) for b in data.buckets]


def kernel_loglik(kernels: list[ClusterKernel], data: Dataset) -> float:
    total = 0.0
    for ker in kernels:
        n = ker.V.shape[-1]
        quad = np.einsum("bi,bi->b", ker.resid, ker.solve(ker.resid))
        total += float(np.sum(-0.5 * n * LOG_2PI - 0.5 * ker.logdet - 0.5 * quad))
    return total


def loglik(params: ParamVector, data: Dataset) -> float:
    """Marginal Gaussian log-likelihood summed over clusters."""
    return kernel_loglik(data_kernels(data, params), data)


def dV_dsigma(k: int, Z: NDArray[np.float64], diagonal: bool = False) -> NDArray[np.float64]:
    """Derivative of ``V_j`` with respect to the ``k``-th variance parameter.

    Diagonal entry ``D_aa`` gives ``Z_a Z_a^T``; off-diagonal ``D_ab`` gives
    ``Z_a Z_b^T + Z_b Z_a^T``; the last index (residual variance) gives ``I``.
    """
    structure = variance_structure(Z.shape[-1], diagonal)
    if not 0 <= k <= len(structure):
        raise IndexError(f"variance index {k} out of range 0..{len(structure)}")
    n = Z.shape[-2]
    if k == len(structure):
        return np.broadcast_to(np.eye(n), Z.shape[:-2] + (n, n)).copy()
    a, b = structure[k]
    za, zb = Z[..., a], Z[..., b]
    out = za[..., :, None] * zb[..., None, :]
    if a != b:
        out = out + np.swapaxes(out, -1, -2)
    return out


def gls_cross_products(
    kernels: list[ClusterKernel], data: Dataset
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """``sum_j X_j^T V_j^{-1} X_j`` and ``sum_j X_j^T V_j^{-1} y_j``."""
    XtVX = np.zeros((data.p, data.p))
    XtVy = np.zeros(data.p)
    for ker, b in zip(kernels, data.buckets):
        VX = ker.Vinv @ b.X
        XtVX += np.einsum("bni,bnj->ij", b.X, VX)
        XtVy += np.einsum("bni,bn->i", VX, b.y)
    return XtVX, XtVy


def fixed_effect_covariance(fit: FittedModel | ParamVector, data: Dataset) -> NDArray[np.float64]:
    """``(sum_j X_j^T V_j^{-1} X_j)^{-1}``, the model-based covariance of beta-hat."""
    if isinstance(fit, FittedModel):
        kernels = fit.kernels
    else:
        kernels = data_kernels(data, fit)
    XtVX, _ = gls_cross_products(kernels, data)
    try:
        chol = np.linalg.cholesky(XtVX)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("X^T V^-1 X is singular") from None
    Linv = np.linalg.inv(chol)
    return Linv.T @ Linv
