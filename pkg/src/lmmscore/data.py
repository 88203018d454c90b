"""Domain types for two-level linear mixed models.

A :class:`Dataset` holds the response, the fixed and random design matrices,
the cluster partition and an optional level-2 auxiliary variable. Rows are
stored grouped by cluster (clusters in first-appearance order) so that every
cluster is a contiguous slice.

Parameters are packed in one canonical order shared by every module::

    xi = (beta_0, ..., beta_{p-1}, sigma^2_0, ..., sigma^2_{K-1})

where the variance block lists the row-major lower triangle of ``D``
followed by the residual variance. For ``q = 2`` this is
``(sigma0^2, sigma01, sigma1^2, sigma_r^2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Mapping, Sequence

import numpy as np
from numpy.typing import NDArray

INTERCEPT = "1"


class DataValidationError(ValueError):
    """Raised when raw data cannot form a valid :class:`Dataset`."""


def variance_structure(q: int, diagonal: bool = False) -> tuple[tuple[int, int], ...]:
    """Return the ``(row, col)`` entries of ``D`` in canonical order.

    Row-major lower triangle, so for ``q = 2`` the order is
    ``(0, 0), (1, 0), (1, 1)``. With ``diagonal=True`` only the diagonal
    entries are free.
    """
    if diagonal:
        return tuple((a, a) for a in range(q))
    return tuple((a, b) for a in range(q) for b in range(a + 1))


def variance_names(q: int, diagonal: bool = False) -> list[str]:
    names = []
    for a, b in variance_structure(q, diagonal):
        names.append(f"sigma{a}^2" if a == b else f"sigma{b}{a}")
    names.append("sigma_r^2")
    return names


def fixed_names(p: int) -> list[str]:
    return [f"beta{i}" for i in range(p)]


@dataclass(frozen=True)
class Dataset:
    """Clustered data for a two-level LMM.

    Attributes:
        y: response, shape ``(N,)``.
        X: fixed-effect design, shape ``(N, p)``.
        Z: random-effect design, shape ``(N, q)``.
        cluster: integer cluster code per row, ``0..J-1``, nondecreasing.
        labels: original cluster label for each code.
        aux: one auxiliary value per cluster, or ``None``.
        diagonal: whether ``D`` is constrained to be diagonal.
        x_columns / z_columns: source column names, for reports.
    """

    y: NDArray[np.float64]
    X: NDArray[np.float64]
    Z: NDArray[np.float64]
    cluster: NDArray[np.int64]
    labels: tuple[Any, ...]
    aux: NDArray[Any] | None = None
    diagonal: bool = False
    x_columns: tuple[str, ...] = ()
    z_columns: tuple[str, ...] = ()

    @property
    def N(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Z.shape[1]

    @property
    def J(self) -> int:
        return len(self.labels)

    @property
    def K(self) -> int:
        return len(self.structure) + 1

    @property
    def structure(self) -> tuple[tuple[int, int], ...]:
        return variance_structure(self.q, self.diagonal)

    @property
    def param_names(self) -> list[str]:
        return fixed_names(self.p) + variance_names(self.q, self.diagonal)

    @cached_property
    def sizes(self) -> NDArray[np.int64]:
        return np.bincount(self.cluster, minlength=self.J)

    @cached_property
    def offsets(self) -> NDArray[np.int64]:
        return np.concatenate([[0], np.cumsum(self.sizes)])

    @cached_property
    def buckets(self) -> list[Bucket]:
        """Clusters grouped by size, stacked for batched linear algebra."""
        out = []
        for n in np.unique(self.sizes):
            idx = np.flatnonzero(self.sizes == n)
            rows = (self.offsets[idx][:, None] + np.arange(n)).ravel()
            out.append(
                Bucket(
                    clusters=idx,
                    rows=rows,
                    y=self.y[rows].reshape(len(idx), n),
                    X=self.X[rows].reshape(len(idx), n, self.p),
                    Z=self.Z[rows].reshape(len(idx), n, self.q),
                )
            )
        return out

    def with_aux(self, aux: Sequence[Any] | NDArray[Any] | None) -> Dataset:
        """Copy of the dataset with a new per-cluster auxiliary variable."""
        if aux is not None:
            aux = np.asarray(aux)
            if aux.shape != (self.J,):
                raise DataValidationError(
                    f"aux must have one value per cluster ({self.J}), got shape {aux.shape}"
                )
        return Dataset(
            self.y, self.X, self.Z, self.cluster, self.labels, aux,
            self.diagonal, self.x_columns, self.z_columns,
        )


@dataclass(frozen=True)
class Bucket:
    """Equal-size clusters stacked along a leading axis."""

    clusters: NDArray[np.int64]
    rows: NDArray[np.int64]
    y: NDArray[np.float64]
    X: NDArray[np.float64]
    Z: NDArray[np.float64]


@dataclass(frozen=True)
class ParamVector:
    """Fixed effects, random-effect covariance and residual variance."""

    beta: NDArray[np.float64]
    D: NDArray[np.float64]
    sigma_r2: float
    diagonal: bool = field(default=False, compare=False)

    def __post_init__(self) -> None:
        D = np.atleast_2d(np.asarray(self.D, dtype=float))
        if not np.allclose(D, D.T):
            raise ValueError("D must be symmetric")
        if not self.sigma_r2 > 0:
            raise ValueError(f"sigma_r2 must be positive, got {self.sigma_r2}")
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).ravel())
        object.__setattr__(self, "sigma_r2", float(self.sigma_r2))

    @property
    def q(self) -> int:
        return self.D.shape[0]

    @property
    def structure(self) -> tuple[tuple[int, int], ...]:
        return variance_structure(self.q, self.diagonal)

    @property
    def sigma2(self) -> NDArray[np.float64]:
        """Flattened variance block in canonical order."""
        return np.array([self.D[a, b] for a, b in self.structure] + [self.sigma_r2])

    @property
    def xi(self) -> NDArray[np.float64]:
        return np.concatenate([self.beta, self.sigma2])

    @classmethod
    def from_sigma2(
        cls, beta: NDArray[np.float64], sigma2: NDArray[np.float64], q: int, diagonal: bool = False
    ) -> ParamVector:
        sigma2 = np.asarray(sigma2, dtype=float)
        D = np.zeros((q, q))
        for value, (a, b) in zip(sigma2[:-1], variance_structure(q, diagonal)):
            D[a, b] = D[b, a] = value
        return cls(beta, D, sigma2[-1], diagonal)

    @classmethod
    def from_xi(cls, xi: NDArray[np.float64], p: int, q: int, diagonal: bool = False) -> ParamVector:
        xi = np.asarray(xi, dtype=float)
        return cls.from_sigma2(xi[:p], xi[p:], q, diagonal)


def validate_dataset(
    raw: Mapping[str, Sequence[Any]],
    response: str,
    fixed: Sequence[str],
    random: Sequence[str],
    cluster: str,
    aux: str | None = None,
    diagonal: bool = False,
) -> Dataset:
    """Build a :class:`Dataset` from named columns.

    ``fixed`` and ``random`` list column names; the name ``"1"`` stands for an
    intercept column of ones. ``aux`` is a per-row column that must be
    constant within each cluster.

    Raises:
        DataValidationError: on non-numeric values, rank-deficient ``X``,
            fewer than two clusters, or an aux value that varies within a
            cluster. Messages quote 1-based data row numbers.
    """
    if response not in raw:
        raise DataValidationError(f"response column {response!r} not found")
    n_rows = len(raw[response])
    if n_rows == 0:
        raise DataValidationError("no data rows")

    def numeric(name: str) -> NDArray[np.float64]:
        if name == INTERCEPT:
            return np.ones(n_rows)
        if name not in raw:
            raise DataValidationError(f"column {name!r} not found")
        values = raw[name]
        out = np.empty(n_rows)
        for i, v in enumerate(values):
            try:
                out[i] = float(v)
            except (TypeError, ValueError):
                raise DataValidationError(
                    f"row {i + 1}: column {name!r} has non-numeric value {v!r}"
                ) from None
            if not np.isfinite(out[i]):
                raise DataValidationError(f"row {i + 1}: column {name!r} is not finite")
        return out

    if not fixed:
        raise DataValidationError("at least one fixed-effect column is required")
    if not random:
        raise DataValidationError("at least one random-effect column is required")
    y = numeric(response)
    X = np.column_stack([numeric(c) for c in fixed])
    Z = np.column_stack([numeric(c) for c in random])

    if cluster not in raw:
        raise DataValidationError(f"cluster column {cluster!r} not found")
    raw_labels = list(raw[cluster])
    codes: dict[Any, int] = {}
    row_code = np.empty(n_rows, dtype=np.int64)
    for i, lab in enumerate(raw_labels):
        row_code[i] = codes.setdefault(lab, len(codes))
    labels = tuple(codes)
    if len(labels) < 2:
        raise DataValidationError(f"need at least 2 clusters, found {len(labels)}")

    aux_values = None
    if aux is not None:
        if aux not in raw:
            raise DataValidationError(f"aux column {aux!r} not found")
        seen: dict[int, tuple[int, Any]] = {}
        for i, v in enumerate(raw[aux]):
            j = int(row_code[i])
            if j in seen and seen[j][1] != v:
                raise DataValidationError(
                    f"row {i + 1}: aux value {v!r} conflicts with {seen[j][1]!r} "
                    f"(row {seen[j][0] + 1}) in cluster {labels[j]!r}"
                )
            seen.setdefault(j, (i, v))
        aux_values = _coerce_aux([seen[j][1] for j in range(len(labels))])

    order = np.argsort(row_code, kind="stable")
    data = Dataset(
        y=y[order],
        X=X[order],
        Z=Z[order],
        cluster=row_code[order],
        labels=labels,
        aux=aux_values,
        diagonal=diagonal,
        x_columns=tuple(fixed),
        z_columns=tuple(random),
    )
    check_dataset(data)
    return data


def _coerce_aux(values: list[Any]) -> NDArray[Any]:
    try:
        return np.array([float(v) for v in values])
    except (TypeError, ValueError):
        return np.array(values, dtype=object)


def check_dataset(data: Dataset) -> None:
    """Assert the :class:`Dataset` invariants, raising DataValidationError."""
    if data.X.shape[0] != data.N or data.Z.shape[0] != data.N or data.cluster.shape[0] != data.N:
        raise DataValidationError("y, X, Z and cluster must have the same number of rows")
    if data.J < 2:
        raise DataValidationError("need at least 2 clusters")
    if np.any(np.diff(data.cluster) < 0):
        raise DataValidationError("rows must be grouped by cluster")
    if np.any(data.sizes == 0):
        raise DataValidationError("every cluster must be nonempty")
    if data.q < 1:
        raise DataValidationError("Z must have at least one column")
    if np.linalg.matrix_rank(data.X) < data.p:
        raise DataValidationError(f"X is rank deficient (rank < {data.p})")
    if data.aux is not None and data.aux.shape != (data.J,):
        raise DataValidationError("aux must have exactly one value per cluster")


def from_arrays(
    y: NDArray[np.float64],
    X: NDArray[np.float64],
    Z: NDArray[np.float64],
    cluster: Sequence[Any] | NDArray[Any],
    aux: Sequence[Any] | NDArray[Any] | None = None,
    diagonal: bool = False,
) -> Dataset:
    """Build a :class:`Dataset` from arrays; ``aux`` is per cluster (first-appearance order)."""
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(X, dtype=float).reshape(len(y), -1)
    Z = np.asarray(Z, dtype=float).reshape(len(y), -1)
    codes: dict[Any, int] = {}
    row_code = np.array([codes.setdefault(c, len(codes)) for c in np.asarray(cluster).tolist()],
                        dtype=np.int64)
    order = np.argsort(row_code, kind="stable")
    data = Dataset(
        y=y[order], X=X[order], Z=Z[order], cluster=row_code[order], labels=tuple(codes),
        aux=None if aux is None else np.asarray(aux), diagonal=diagonal,
        x_columns=tuple(f"x{i}" for i in range(X.shape[1])),
        z_columns=tuple(f"z{i}" for i in range(Z.shape[1])),
    )
    check_dataset(data)
    return data


def cluster_views(
    data: Dataset,
) -> list[tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.float64]]]:
    """Per-cluster ``(y_j, X_j, Z_j)`` slices in cluster order."""
    out = []
    for j in range(data.J):
        s = slice(data.offsets[j], data.offsets[j + 1])
        out.append((data.y[s], data.X[s], data.Z[s]))
    return out


@dataclass
class FittedModel:
    """Result of a marginal maximum-likelihood fit.

    ``kernels`` caches one batched :class:`~lmmscore.likelihood.ClusterKernel`
    per cluster-size bucket of ``data.buckets`` (same order), so the cache
    covers every cluster exactly once.
    """

    params: ParamVector
    loglik: float
    converged: bool
    n_iter: int
    grad_norm: float
    kernels: list[Any]
    boundary: bool = False
    boundary_reason: str = ""
    message: str = ""
    init_loglik: float = float("nan")

    @property
    def xi(self) -> NDArray[np.float64]:
        return self.params.xi
