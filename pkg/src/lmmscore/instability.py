"""Cumulative score processes and parameter-instability statistics.

Clusters are ordered by the auxiliary variable, their scores are decorrelated
with the inverse square root of the expected information, and the scaled
partial sums form the fluctuation process ``B`` (row ``j`` after ``j``
clusters, row 0 all zeros). Statistics summarise ``B`` over the tested
columns:

* ``dm``      -- double max of ``|B|``
* ``cvm``     -- Cramer-von Mises mean of squared row sums
* ``maxlm``   -- trimmed, variance-weighted maximum of squared row sums
* ``wdm_o``   -- weighted double max at ordinal level boundaries
* ``maxlm_o`` -- weighted maximum LM at ordinal level boundaries
* ``lm_uo``   -- categorical LM over level increments (chi-square null)

P-values for all but ``lm_uo`` come from Monte Carlo simulation of the
limiting Brownian-bridge functionals evaluated on the same grid as the data.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Any, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import stats

from .data import Dataset, FittedModel
from .scores import BoundaryError, InformationMatrix, ScoreMatrix, expected_information, score_matrix

log = logging.getLogger(__name__)

CONTINUOUS_KINDS = ("dm", "cvm", "maxlm")
ORDINAL_KINDS = ("wdm_o", "maxlm_o")
CATEGORICAL_KINDS = ("lm_uo",)
ALL_KINDS = CONTINUOUS_KINDS + ORDINAL_KINDS + CATEGORICAL_KINDS
SCALES = ("continuous", "ordinal", "nominal")

DEFAULT_MC_REPS = 25_000
MC_CHUNK = 2_500


class InstabilityError(ValueError):
    """Invalid process or statistic request (missing aux, empty trim range, ...)."""


@dataclass(frozen=True)
class TestOptions:
    __test__ = False

    mc_reps: int = DEFAULT_MC_REPS
    seed: int = 0
    trim: tuple[float, float] = (0.1, 0.9)
    alpha: float = 0.05


@dataclass
class FluctuationProcess:
    """Decorrelated cumulative score process.

    Attributes:
        B_full: ``(J + 1, P)`` process over all parameters.
        order: cluster indices sorted by aux (stable, so ties keep cluster order).
        names: parameter names of all ``P`` columns.
        subset: tested column indices.
        scale: ``"continuous"``, ``"ordinal"`` or ``"nominal"``.
        block_ends: for each ``j = 1..J`` the last index of its tied block.
        level_bounds: ``j_L`` for ``L = 1..m-1`` (ordinal/nominal only).
        level_values: the ``m`` ordered level values (ordinal/nominal only).
    """

    B_full: NDArray[np.float64]
    order: NDArray[np.int64]
    names: list[str]
    subset: tuple[int, ...]
    scale: str
    block_ends: NDArray[np.int64]
    level_bounds: NDArray[np.int64] = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    level_values: tuple[Any, ...] = ()

    @property
    def J(self) -> int:
        return self.B_full.shape[0] - 1

    @property
    def B(self) -> NDArray[np.float64]:
        return self.B_full[:, list(self.subset)]

    @property
    def k(self) -> int:
        return len(self.subset)

    @property
    def t(self) -> NDArray[np.float64]:
        return np.arange(self.J + 1) / self.J

    @property
    def m(self) -> int:
        return len(self.level_values)

    @property
    def tied_fraction(self) -> float:
        """Share of clusters whose aux value is shared with another cluster."""
        ends = np.unique(self.block_ends)
        sizes = np.diff(np.concatenate([[0], ends]))
        return float(sizes[sizes > 1].sum() / self.J)

    def select(self, subset: Sequence[int]) -> FluctuationProcess:
        subset = tuple(int(i) for i in subset)
        if not subset or min(subset) < 0 or max(subset) >= self.B_full.shape[1]:
            raise InstabilityError(f"invalid parameter subset {subset}")
        return replace(self, subset=subset)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(["j", "t", *(self.names[i] for i in self.subset)]) + "\n")
            for j, row in enumerate(self.B):
                fh.write(",".join([str(j), repr(j / self.J), *(repr(float(v)) for v in row)]) + "\n")


def cumulative_process(
    scores: ScoreMatrix,
    info: InformationMatrix,
    aux: Sequence[Any] | NDArray[Any] | None,
    subset: Sequence[int] | None = None,
    scale: str = "continuous",
    levels: Sequence[Any] | None = None,
) -> FluctuationProcess:
    """Build ``B`` from clusterwise scores ordered by ``aux``.

    ``levels`` optionally fixes the ordered level set of an ordinal/nominal
    aux; every listed level must contain at least one cluster.
    """
    if aux is None:
        raise InstabilityError("an auxiliary variable is required")
    if scale not in SCALES:
        raise InstabilityError(f"unknown aux scale {scale!r}")
    aux = np.asarray(aux)
    J = scores.J
    if aux.shape != (J,):
        raise InstabilityError(f"aux must have one value per cluster ({J}), got {aux.shape}")
    order = np.argsort(aux, kind="stable")
    sorted_aux = aux[order]
    decorrelated = scores.rows[order] @ info.root_inv
    B = np.vstack([np.zeros(decorrelated.shape[1]), np.cumsum(decorrelated, axis=0)]) / np.sqrt(J)

    new_block = np.r_[sorted_aux[1:] != sorted_aux[:-1], True]
    ends = np.flatnonzero(new_block) + 1
    block_ends = np.repeat(ends, np.diff(np.r_[0, ends]))

    level_bounds = np.zeros(0, dtype=np.int64)
    level_values: tuple[Any, ...] = ()
    if scale != "continuous":
        uniq = list(sorted_aux[new_block])
        if levels is not None:
            missing = [lv for lv in levels if lv not in set(uniq)]
            if missing:
                raise InstabilityError(f"levels with zero clusters: {missing}")
            extra = [u for u in uniq if u not in set(levels)]
            if extra:
                raise InstabilityError(f"aux values outside the declared levels: {extra}")
            if scale == "ordinal":
                rank = {lv: i for i, lv in enumerate(levels)}
                return cumulative_process(scores, info, [rank[a] for a in aux], subset, scale, None)
        if len(uniq) < 2:
            raise InstabilityError(f"need at least 2 aux levels, found {len(uniq)}")
        level_values = tuple(uniq)
        level_bounds = ends[:-1].astype(np.int64)

    subset = tuple(range(B.shape[1])) if subset is None else tuple(int(i) for i in subset)
    proc = FluctuationProcess(
        B_full=B, order=order, names=list(scores.names), subset=tuple(range(B.shape[1])),
        scale=scale, block_ends=block_ends, level_bounds=level_bounds, level_values=level_values,
    )
    return proc.select(subset)


# ---------------------------------------------------------------------------
# functionals, vectorised over leading axes: B has shape (..., J + 1, k)
# ---------------------------------------------------------------------------


def _dm(B: NDArray[np.float64], rows: NDArray[np.int64]) -> NDArray[np.float64]:
    return np.abs(B[..., rows, :]).max(axis=(-2, -1))


def _cvm(B: NDArray[np.float64], block_ends: NDArray[np.int64]) -> NDArray[np.float64]:
    J = B.shape[-2] - 1
    return (B[..., block_ends, :] ** 2).sum(axis=(-2, -1)) / J


def _weights(j: NDArray[np.int64], J: int) -> NDArray[np.float64]:
    t = j / J
    return 1.0 / (t * (1.0 - t))


def _maxlm(B: NDArray[np.float64], rows: NDArray[np.int64]) -> NDArray[np.float64]:
    J = B.shape[-2] - 1
    return (_weights(rows, J) * (B[..., rows, :] ** 2).sum(axis=-1)).max(axis=-1)


def _wdm_o_terms(Bb: NDArray[np.float64], t: NDArray[np.float64]) -> NDArray[np.float64]:
    return np.abs(Bb) / np.sqrt(t * (1.0 - t))[:, None]


def _maxlm_o_terms(Bb: NDArray[np.float64], t: NDArray[np.float64]) -> NDArray[np.float64]:
    return Bb**2 / (t * (1.0 - t))[:, None]


def _lm_uo_terms(Bb: NDArray[np.float64], t: NDArray[np.float64], B_end: NDArray[np.float64]) -> NDArray[np.float64]:
    """Squared level increments weighted by inverse level proportions, shape (..., m, k)."""
    zero = np.zeros_like(Bb[..., :1, :])
    full = np.concatenate([zero, Bb, B_end[..., None, :]], axis=-2)
    dt = np.diff(np.r_[0.0, t, 1.0])
    return np.diff(full, axis=-2) ** 2 / dt[:, None]


# ---------------------------------------------------------------------------
# Monte Carlo null distributions
# ---------------------------------------------------------------------------


def _chunks(reps: int, seed: int):
    n_chunks = -(-reps // MC_CHUNK)
    for i, ss in enumerate(np.random.SeedSequence(seed).spawn(n_chunks)):
        yield min(MC_CHUNK, reps - i * MC_CHUNK), np.random.default_rng(ss)


def _bridges(rng: np.random.Generator, size: int, J: int, k: int) -> NDArray[np.float64]:
    """Discrete Brownian bridges on ``0, 1/J, ..., 1``, shape ``(size, J + 1, k)``."""
    W = np.zeros((size, J + 1, k))
    np.cumsum(rng.standard_normal((size, J, k)), axis=1, out=W[:, 1:])
    W /= np.sqrt(J)
    t = np.arange(J + 1) / J
    return W - t[:, None] * W[:, -1:, :]


def _boundary_bridges(rng: np.random.Generator, size: int, t: NDArray[np.float64], k: int) -> NDArray[np.float64]:
    """Brownian bridge values at the boundary times ``t``, shape ``(size, len(t), k)``."""
    grid = np.r_[t, 1.0]
    dt = np.diff(np.r_[0.0, grid])
    W = np.cumsum(rng.standard_normal((size, len(grid), k)) * np.sqrt(dt)[:, None], axis=1)
    return W[:, :-1, :] - t[:, None] * W[:, -1:, :]


@lru_cache(maxsize=256)
def _null_sample(kind: str, J: int, k: int, rows: tuple[int, ...], reps: int, seed: int) -> NDArray[np.float64]:
    """Sorted MC draws of a statistic's limiting null law.

    ``rows`` carries the evaluation rows (dm/maxlm), the block-end map (cvm)
    or the boundary indices ``j_L`` (ordinal kinds).
    """
    idx = np.asarray(rows, dtype=np.int64)
    out = []
    for size, rng in _chunks(reps, seed):
        if kind == "dm":
            out.append(_dm(_bridges(rng, size, J, k), idx))
        elif kind == "cvm":
            out.append(_cvm(_bridges(rng, size, J, k), idx))
        elif kind == "maxlm":
            out.append(_maxlm(_bridges(rng, size, J, k), idx))
        else:
            t = idx / J
            Bb = _boundary_bridges(rng, size, t, k)
            terms = _wdm_o_terms(Bb, t) if kind == "wdm_o" else _maxlm_o_terms(Bb, t)
            if kind == "wdm_o":
                out.append(terms.max(axis=(-2, -1)))
            else:
                out.append(terms.sum(axis=-1).max(axis=-1))
    return np.sort(np.concatenate(out))


def _mc_pvalue(null: NDArray[np.float64], value: float) -> float:
    # ties within rounding count as exceedances so an all-zero process gives p = 1
    tol = 1e-12 * max(1.0, abs(value))
    return float(1.0 - np.searchsorted(null, value - tol, side="left") / len(null))


def null_critical_value(kind: str, J: int, k: int, rows: Sequence[int], alpha: float = 0.05,
                        mc_reps: int = DEFAULT_MC_REPS, seed: int = 0) -> float:
    null = _null_sample(kind, J, k, tuple(int(r) for r in rows), mc_reps, seed)
    return float(np.quantile(null, 1.0 - alpha))


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


@dataclass
class TestResult:
    """Outcome of one instability test.

    ``contributions`` holds per-boundary, per-parameter terms for the
    ordinal kinds (``(m-1, k)``) and per-level increments for ``lm_uo``
    (``(m, k)``); it is empty for the continuous kinds.
    """

    __test__ = False

    kind: str
    value: float
    p_value: float
    critical_value: float
    subset: tuple[int, ...]
    names: list[str]
    alpha: float = 0.05
    df: int | None = None
    contributions: NDArray[np.float64] = field(default_factory=lambda: np.zeros((0, 0)))
    boundary_t: NDArray[np.float64] = field(default_factory=lambda: np.zeros(0))
    mc_reps: int | None = None
    seed: int | None = None

    @property
    def k(self) -> int:
        return len(self.subset)

    @property
    def reject(self) -> bool:
        return self.p_value < self.alpha

    def to_record(self) -> dict[str, Any]:
        return {
            "statistic": self.kind,
            "value": self.value,
            "p_value": self.p_value,
            "critical_value": self.critical_value,
            "alpha": self.alpha,
            "subset": list(self.subset),
            "params": self.names,
            "df": self.df,
            "mc_reps": self.mc_reps,
            "seed": self.seed,
            "contributions": self.contributions.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)

    def to_line(self) -> str:
        flag = "*" if self.reject else " "
        return (
            f"{self.kind:<8} {','.join(self.names):<40} stat={self.value:10.4f} "
            f"crit={self.critical_value:8.4f} p={self.p_value:.4f}{flag}"
        )


def _result(proc: FluctuationProcess, kind: str, value: float, null_rows, opts: TestOptions, **extra) -> TestResult:
    null = _null_sample(kind, proc.J, proc.k, tuple(int(r) for r in null_rows), opts.mc_reps, opts.seed)
    return TestResult(
        kind=kind, value=float(value), p_value=_mc_pvalue(null, float(value)),
        critical_value=float(np.quantile(null, 1.0 - opts.alpha)), subset=proc.subset,
        names=[proc.names[i] for i in proc.subset], alpha=opts.alpha,
        mc_reps=opts.mc_reps, seed=opts.seed, **extra,
    )


def _eval_rows(proc: FluctuationProcess) -> NDArray[np.int64]:
    return np.unique(proc.block_ends)


def stat_dm(proc: FluctuationProcess, opts: TestOptions = TestOptions()) -> TestResult:
    """Double max: ``max_j max_k |B_jk|`` over tie-block ends."""
    rows = _eval_rows(proc)
    return _result(proc, "dm", _dm(proc.B, rows), rows, opts)


def stat_cvm(proc: FluctuationProcess, opts: TestOptions = TestOptions()) -> TestResult:
    """Cramer-von Mises: ``J^-1 sum_j sum_k B_jk^2``."""
    return _result(proc, "cvm", _cvm(proc.B, proc.block_ends), proc.block_ends, opts)


def trim_rows(J: int, trim: tuple[float, float], candidates: NDArray[np.int64] | None = None) -> NDArray[np.int64]:
    lo, hi = trim
    if not 0 < lo < hi < 1:
        raise InstabilityError(f"trim must satisfy 0 < lo < hi < 1, got {trim}")
    rows = np.arange(int(np.ceil(J * lo - 1e-9)), int(np.floor(J * hi + 1e-9)) + 1)
    if candidates is not None:
        rows = np.intersect1d(rows, candidates)
    rows = rows[(rows >= 1) & (rows <= J - 1)]
    if rows.size == 0:
        raise InstabilityError(f"trim {trim} leaves no evaluation points for J={J}")
    return rows


def stat_maxlm(proc: FluctuationProcess, opts: TestOptions = TestOptions()) -> TestResult:
    """Supremum LM: ``max_j {t_j (1 - t_j)}^-1 sum_k B_jk^2`` over the trimmed range."""
    rows = trim_rows(proc.J, opts.trim, _eval_rows(proc))
    return _result(proc, "maxlm", _maxlm(proc.B, rows), rows, opts)


def _require_levels(proc: FluctuationProcess) -> NDArray[np.float64]:
    if proc.scale == "continuous" or proc.level_bounds.size == 0:
        raise InstabilityError("ordinal/categorical statistics need an ordinal or nominal aux with m >= 2")
    return proc.level_bounds / proc.J


def stat_ordinal(proc: FluctuationProcess, kind: str, opts: TestOptions = TestOptions()) -> TestResult:
    """``wdm_o`` or ``maxlm_o`` evaluated only at the level boundaries ``j_1..j_{m-1}``."""
    if kind not in ORDINAL_KINDS:
        raise InstabilityError(f"not an ordinal statistic: {kind!r}")
    if proc.scale != "ordinal":
        raise InstabilityError(f"{kind} requires an ordinal aux")
    t = _require_levels(proc)
    Bb = proc.B[proc.level_bounds]
    if kind == "wdm_o":
        terms = _wdm_o_terms(Bb, t)
        value = terms.max()
    else:
        terms = _maxlm_o_terms(Bb, t)
        value = terms.sum(axis=-1).max()
    return _result(proc, kind, value, proc.level_bounds, opts, contributions=terms, boundary_t=t)


def stat_lm_uo(proc: FluctuationProcess, opts: TestOptions = TestOptions()) -> TestResult:
    """Categorical LM: ``sum_L sum_k (B_{j_L k} - B_{j_{L-1} k})^2 / (t_L - t_{L-1})``.

    Asymptotically chi-square with ``k (m - 1)`` degrees of freedom.
    """
    t = _require_levels(proc)
    terms = _lm_uo_terms(proc.B[proc.level_bounds], t, proc.B[-1])
    value = float(terms.sum())
    df = proc.k * (len(t))
    return TestResult(
        kind="lm_uo", value=value, p_value=float(stats.chi2.sf(value, df)),
        critical_value=float(stats.chi2.ppf(1.0 - opts.alpha, df)), subset=proc.subset,
        names=[proc.names[i] for i in proc.subset], alpha=opts.alpha, df=df,
        contributions=terms, boundary_t=t, seed=opts.seed,
    )


def compute_statistic(proc: FluctuationProcess, kind: str, opts: TestOptions = TestOptions()) -> TestResult:
    if kind == "dm":
        return stat_dm(proc, opts)
    if kind == "cvm":
        return stat_cvm(proc, opts)
    if kind == "maxlm":
        return stat_maxlm(proc, opts)
    if kind in ORDINAL_KINDS:
        return stat_ordinal(proc, kind, opts)
    if kind == "lm_uo":
        return stat_lm_uo(proc, opts)
    raise InstabilityError(f"unknown statistic {kind!r}; choose from {', '.join(ALL_KINDS)}")


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


class NotConvergedError(RuntimeError):
    pass


def resolve_subset(subset: Sequence[int | str] | None, names: Sequence[str]) -> tuple[int, ...]:
    if subset is None:
        return tuple(range(len(names)))
    out = []
    for s in subset:
        if isinstance(s, str) and not s.lstrip("-").isdigit():
            if s not in names:
                raise InstabilityError(f"unknown parameter {s!r}; known: {', '.join(names)}")
            out.append(list(names).index(s))
        else:
            i = int(s)
            if not 0 <= i < len(names):
                raise InstabilityError(f"parameter index {i} out of range")
            out.append(i)
    return tuple(out)


def fluctuation_process(
    fit: FittedModel,
    data: Dataset,
    aux: Sequence[Any] | NDArray[Any] | None = None,
    scale: str = "continuous",
    levels: Sequence[Any] | None = None,
) -> FluctuationProcess:
    """Scores, information and the full-parameter process for a fitted model.

    The process is scaled by the per-cluster information ``I_hat / J`` so that
    each column converges to a standard Brownian bridge under the null.
    """
    if not fit.converged:
        raise NotConvergedError(f"fit did not converge (score norm {fit.grad_norm:.3g})")
    if fit.boundary:
        raise BoundaryError(f"tests refused at a boundary estimate: {fit.boundary_reason}")
    aux = data.aux if aux is None else aux
    info = expected_information(fit, data).per_cluster(data.J)
    return cumulative_process(score_matrix(fit, data), info, aux, None, scale, levels)


def sctest(
    fit: FittedModel,
    data: Dataset,
    kind: str,
    subset: Sequence[int | str] | None = None,
    aux: Sequence[Any] | NDArray[Any] | None = None,
    scale: str | None = None,
    opts: TestOptions = TestOptions(),
) -> TestResult:
    """Run one instability test of ``subset`` against ``aux``.

    ``scale`` defaults to ``ordinal`` for the ordinal kinds, ``nominal`` for
    ``lm_uo`` and ``continuous`` otherwise.
    """
    if kind not in ALL_KINDS:
        raise InstabilityError(f"unknown statistic {kind!r}; choose from {', '.join(ALL_KINDS)}")
    if scale is None:
        scale = "ordinal" if kind in ORDINAL_KINDS else "nominal" if kind == "lm_uo" else "continuous"
    proc = fluctuation_process(fit, data, aux, scale)
    return compute_statistic(proc.select(resolve_subset(subset, data.param_names)), kind, opts)
