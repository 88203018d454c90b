"""Casewise and clusterwise scores and the expected information matrix.

Columns follow the canonical parameter order of :mod:`lmmscore.data`:
fixed effects first, then the variance block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .data import Bucket, Dataset, FittedModel, ParamVector
from .likelihood import ClusterKernel, build_kernel, data_kernels, gls_cross_products

ROOT_EIG_FLOOR = 1e-10


class BoundaryError(RuntimeError):
    """The fit sits on the parameter boundary; information-based tests are invalid."""


def _pairs(entry: tuple[int, int]) -> list[tuple[int, int]]:
    a, b = entry
    return [(a, a)] if a == b else [(a, b), (b, a)]


def _bucket_terms(ker: ClusterKernel, bucket: Bucket):
    W = ker.Vinv @ bucket.Z
    M = np.einsum("bna,bnc->bac", bucket.Z, W)
    return W, M


def cluster_variance_scores(
    ker: ClusterKernel, bucket: Bucket, structure: tuple[tuple[int, int], ...]
) -> NDArray[np.float64]:
    """Per-cluster variance-parameter scores, shape ``(B, K)``.

    Uses ``tr(V^-1 Z_a Z_b^T) = M_ba`` and ``r^T V^-1 Z_a Z_b^T V^-1 r = u_a u_b``.
    """
    W, M = _bucket_terms(ker, bucket)
    Vr = ker.solve(ker.resid)
    u = np.einsum("bna,bn->ba", bucket.Z, Vr)
    cols = []
    for a, b in structure:
        if a == b:
            cols.append(-0.5 * M[:, a, a] + 0.5 * u[:, a] ** 2)
        else:
            cols.append(-M[:, a, b] + u[:, a] * u[:, b])
    trace = np.trace(ker.Vinv, axis1=-2, axis2=-1)
    cols.append(-0.5 * trace + 0.5 * np.einsum("bn,bn->b", Vr, Vr))
    return np.column_stack(cols)


def casewise_scores(fit: FittedModel, data: Dataset) -> NDArray[np.float64]:
    """Observation-level scores, shape ``(N, p + K)``.

    For the variance parameter ``k`` row ``i`` holds
    ``-1/2 [V^-1 dV_k]_ii + 1/2 [V^-1 dV_k V^-1 r]_i r_i``; for the fixed
    effects it holds ``[V^-1 X]_i r_i``. Each cluster uses its own ``V_j``.
    """
    if fit.boundary:
        raise BoundaryError(f"scores refused at a boundary fit: {fit.boundary_reason}")
    out = np.empty((data.N, data.p + data.K))
    for ker, bucket in zip(fit.kernels, data.buckets):
        out[bucket.rows] = _casewise_bucket(ker, bucket, data.structure).reshape(-1, out.shape[1])
    return out


def _casewise_bucket(ker: ClusterKernel, bucket: Bucket, structure) -> NDArray[np.float64]:
    r = ker.resid
    W, _ = _bucket_terms(ker, bucket)
    Vr = ker.solve(r)
    u = np.einsum("bna,bn->ba", bucket.Z, Vr)
    Z = bucket.Z
    cols = [(ker.Vinv @ bucket.X) * r[..., None]]
    for entry in structure:
        diag_term = np.zeros_like(r)
        quad_vec = np.zeros_like(r)
        for a, b in _pairs(entry):
            # dV = sum over pairs of Z_a Z_b^T
            diag_term += W[..., a] * Z[..., b]
            quad_vec += W[..., a] * u[:, b, None]
        cols.append((-0.5 * diag_term + 0.5 * quad_vec * r)[..., None])
    diag_vinv = np.diagonal(ker.Vinv, axis1=-2, axis2=-1)
    cols.append((-0.5 * diag_vinv + 0.5 * ker.solve(Vr) * r)[..., None])
    return np.concatenate(cols, axis=-1)


@dataclass
class ScoreMatrix:
    """Clusterwise scores: row ``j`` is the score of cluster ``j``."""

    rows: NDArray[np.float64]
    names: list[str]

    @property
    def J(self) -> int:
        return self.rows.shape[0]

    def to_csv(self, path, labels=None) -> None:
        labels = range(self.J) if labels is None else labels
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(["cluster", *self.names]) + "\n")
            for lab, row in zip(labels, self.rows):
                fh.write(",".join([str(lab), *(repr(float(v)) for v in row)]) + "\n")


def clusterwise_scores(
    casewise: NDArray[np.float64], cluster: NDArray[np.int64], names: list[str] | None = None
) -> ScoreMatrix:
    """Sum casewise rows within each cluster; ``cluster`` holds codes ``0..J-1`` per row."""
    cluster = np.asarray(cluster)
    rows = np.zeros((int(cluster.max()) + 1, casewise.shape[1]))
    np.add.at(rows, cluster, casewise)
    names = names or [f"p{i}" for i in range(casewise.shape[1])]
    return ScoreMatrix(rows, list(names))


def score_matrix(fit: FittedModel, data: Dataset) -> ScoreMatrix:
    return clusterwise_scores(casewise_scores(fit, data), data.cluster, data.param_names)


def gradient(kernels: list[ClusterKernel], data: Dataset) -> NDArray[np.float64]:
    """Full-sample score (gradient of the log-likelihood) in canonical order."""
    g_beta = np.zeros(data.p)
    g_var = np.zeros(data.K)
    for ker, bucket in zip(kernels, data.buckets):
        g_beta += np.einsum("bni,bn->i", bucket.X, ker.solve(ker.resid))
        g_var += cluster_variance_scores(ker, bucket, data.structure).sum(axis=0)
    return np.concatenate([g_beta, g_var])


@dataclass
class InformationMatrix:
    """Expected information and its symmetric inverse square root."""

    I_hat: NDArray[np.float64]
    root_inv: NDArray[np.float64]
    eigenvalues: NDArray[np.float64]

    @property
    def condition(self) -> float:
        return float(self.eigenvalues.min() / self.eigenvalues.max())

    def per_cluster(self, J: int) -> InformationMatrix:
        """The average information ``I_hat / J`` (root inverse rescaled to match)."""
        return InformationMatrix(self.I_hat / J, self.root_inv * np.sqrt(J), self.eigenvalues / J)


def variance_information(kernels: list[ClusterKernel], data: Dataset) -> NDArray[np.float64]:
    """``1/2 tr[V^-1 dV_k1 V^-1 dV_k2]`` accumulated over clusters."""
    structure = data.structure
    K = len(structure) + 1
    info = np.zeros((K, K))
    for ker, bucket in zip(kernels, data.buckets):
        W, M = _bucket_terms(ker, bucket)
        WtW = np.einsum("bna,bnc->bac", W, W)
        for k1, e1 in enumerate(structure):
            for k2 in range(k1, K - 1):
                total = 0.0
                for a, b in _pairs(e1):
                    for c, d in _pairs(structure[k2]):
                        total += np.sum(M[:, b, c] * M[:, d, a])
                info[k1, k2] += 0.5 * total
            info[k1, K - 1] += 0.5 * sum(np.sum(WtW[:, b, a]) for a, b in _pairs(e1))
        info[K - 1, K - 1] += 0.5 * np.sum(ker.Vinv * ker.Vinv)
    return np.triu(info) + np.triu(info, 1).T


def expected_information(fit: FittedModel | ParamVector, data: Dataset) -> InformationMatrix:
    """Block-diagonal expected information at the fitted (or given) parameters.

    Raises:
        BoundaryError: if the matrix is not numerically positive definite
            (smallest eigenvalue below ``1e-10`` times the largest).
    """
    if isinstance(fit, FittedModel):
        kernels = fit.kernels
    else:
        kernels = [build_kernel(b.Z, fit) for b in data.buckets]
    XtVX, _ = gls_cross_products(kernels, data)
    p, K = data.p, data.K
    I_hat = np.zeros((p + K, p + K))
    I_hat[:p, :p] = XtVX
    I_hat[p:, p:] = variance_information(kernels, data)
    return _with_root(I_hat)


def _with_root(I_hat: NDArray[np.float64]) -> InformationMatrix:
    return InformationMatrix(I_hat, information_root_inverse(I_hat), np.linalg.eigvalsh(I_hat))


def information_root_inverse(I_hat: NDArray[np.float64]) -> NDArray[np.float64]:
    """Symmetric ``I^{-1/2}`` via eigendecomposition."""
    I_hat = 0.5 * (I_hat + I_hat.T)
    w, U = np.linalg.eigh(I_hat)
    if w.max() <= 0 or w.min() <= ROOT_EIG_FLOOR * w.max():
        raise BoundaryError(
            f"information matrix is not positive definite (eigenvalues {w.min():.3g} .. {w.max():.3g})"
        )
    return (U / np.sqrt(w)) @ U.T


__all__ = [
    "BoundaryError",
    "InformationMatrix",
    "ScoreMatrix",
    "casewise_scores",
    "clusterwise_scores",
    "data_kernels",
    "expected_information",
    "gradient",
    "information_root_inverse",
    "score_matrix",
]
