"""Data generators and replication drivers for power studies.

Two generating models share one design: ``n / 10`` clusters of ten
occasions (``Days = 0..9``) with a random intercept and a random ``Days``
slope, and a four-level ordinal cluster variable ``CA`` assigned in equal
contiguous blocks.

* ``power`` mode fits ``y ~ 1 + Days`` and tests the six parameters for
  instability against ``CA``.
* ``demo`` mode adds ``CA`` and ``Days x CA`` fixed effects and records
  Wald tests of the ``Days`` and interaction coefficients.

Clusters at or above the change level use ``base + d * scale`` for each
changing parameter. Shift units come from the inverse expected information
at the base values:

* ``se``       -- standard error at the scenario's ``n``
* ``unit_se``  -- per-cluster asymptotic standard error (``se * sqrt(J)``),
  the power-mode default
* ``variance`` -- asymptotic variance at the scenario's ``n``, the
  demo-mode default
"""

from __future__ import annotations

import configparser
import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import product
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import stats

from . import __version__
from .data import Dataset, ParamVector, from_arrays
from .estimator import fit_ml
from .instability import ALL_KINDS, TestOptions, compute_statistic, fluctuation_process
from .likelihood import fixed_effect_covariance
from .scores import BoundaryError, expected_information
from .svg import Panel, Series, write_svg

log = logging.getLogger(__name__)

MODES = ("power", "demo")
SCALE_KINDS = ("se", "unit_se", "variance")
DEFAULT_SCALE = {"power": "unit_se", "demo": "variance"}
WALD = "wald"
CSV_HEADER = ("scenario", "n", "d", "param_changed", "param_tested", "statistic", "power", "se", "reps")

# Sleepstudy-shaped base values; only beta1 and the demo interaction are fixed by design.
SLEEP_BASE = {
    "beta0": 251.4,
    "beta1": 10.47,
    "sigma0^2": 612.1,
    "sigma01": 9.6,
    "sigma1^2": 35.07,
    "sigma_r^2": 654.9,
}
DEMO_FIXED = {"beta2": 0.0, "beta3": 6.27}
POWER_NAMES = ("beta0", "beta1", "sigma0^2", "sigma01", "sigma1^2", "sigma_r^2")
DEMO_NAMES = ("beta0", "beta1", "beta2", "beta3", "sigma0^2", "sigma01", "sigma1^2", "sigma_r^2")
WALD_TARGETS = ("beta1", "beta3")


class ScenarioError(ValueError):
    """Scenario cannot generate valid data (bad sizes, non-PSD shift, unknown names)."""


def default_base(mode: str) -> dict[str, float]:
    base = dict(SLEEP_BASE)
    if mode == "demo":
        base.update(DEMO_FIXED)
    return base


@dataclass(frozen=True)
class Scenario:
    """One cell of a power study.

    Attributes:
        n: total observations; ``J = n / cluster_size`` clusters.
        changing: names of the parameters shifted at ``CA >= change_level``.
        d: violation magnitude in units of ``scale_kind``.
        mode: ``"power"`` or ``"demo"``.
        scale_kind: shift unit, one of ``SCALE_KINDS``; empty picks the
            mode default (``unit_se`` for power, ``variance`` for demo).
        base: parameter values by name; missing names use the defaults.
        label: figure grouping key, defaults to the joined changing names.
    """

    n: int = 480
    changing: tuple[str, ...] = ()
    d: float = 0.0
    mode: str = "power"
    scale_kind: str = ""
    base: tuple[tuple[str, float], ...] = ()
    cluster_size: int = 10
    levels: int = 4
    change_level: int = 2
    reps: int = 200
    seed: int = 0
    label: str = ""

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ScenarioError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.scale_kind:
            object.__setattr__(self, "scale_kind", DEFAULT_SCALE[self.mode])
        if self.scale_kind not in SCALE_KINDS:
            raise ScenarioError(f"scale_kind must be one of {SCALE_KINDS}, got {self.scale_kind!r}")
        if self.n % self.cluster_size:
            raise ScenarioError(f"n={self.n} is not a multiple of cluster size {self.cluster_size}")
        if self.J % self.levels or self.J < 2 * self.levels:
            raise ScenarioError(f"J={self.J} clusters cannot be split into {self.levels} equal blocks")
        if not 2 <= self.change_level <= self.levels:
            raise ScenarioError(f"change level {self.change_level} outside 2..{self.levels}")
        if self.d < 0 or self.reps < 1:
            raise ScenarioError("d must be >= 0 and reps >= 1")
        unknown = [c for c in (*self.changing, *dict(self.base)) if c not in self.names]
        if unknown:
            raise ScenarioError(f"unknown parameter(s) {unknown}; known: {', '.join(self.names)}")
        object.__setattr__(self, "changing", tuple(self.changing))
        for params in group_params(self):
            if np.linalg.eigvalsh(params.D).min() < -1e-10 or params.sigma_r2 <= 0:
                raise ScenarioError(f"shift d={self.d} of {self.changing} leaves an invalid covariance")

    @property
    def J(self) -> int:
        return self.n // self.cluster_size

    @property
    def names(self) -> tuple[str, ...]:
        return DEMO_NAMES if self.mode == "demo" else POWER_NAMES

    @property
    def base_values(self) -> dict[str, float]:
        values = default_base(self.mode)
        values.update(dict(self.base))
        return values

    @property
    def param_changed(self) -> str:
        return "+".join(self.changing) if self.changing else "none"

    @property
    def key(self) -> str:
        return self.label or self.param_changed

    def design(self) -> tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.int64], NDArray[np.int64]]:
        """``X``, ``Z``, row cluster codes and per-cluster ``CA`` levels (1..m)."""
        J, size = self.J, self.cluster_size
        days = np.tile(np.arange(size, dtype=float), J)
        g = np.repeat(np.arange(J), size)
        ca = np.repeat(np.arange(1, self.levels + 1), J // self.levels)
        Z = np.column_stack([np.ones_like(days), days])
        if self.mode == "demo":
            ca_row = ca[g].astype(float)
            X = np.column_stack([Z, ca_row, days * ca_row])
        else:
            X = Z.copy()
        return X, Z, g, ca


def _params_from_names(values: Mapping[str, float], names: Sequence[str]) -> ParamVector:
    p = len(names) - 4
    beta = [values[n] for n in names[:p]]
    s0, s01, s1, sr = (values[n] for n in names[p:])
    return ParamVector(beta, np.array([[s0, s01], [s01, s1]]), sr)


@lru_cache(maxsize=64)
def _scale_cached(mode: str, n: int, cluster_size: int, levels: int, base: tuple, kind: str) -> tuple:
    sc = Scenario(n=n, mode=mode, cluster_size=cluster_size, levels=levels, base=base)
    X, Z, g, _ = sc.design()
    data = from_arrays(np.zeros(len(g)), X, Z, g)
    params = _params_from_names(sc.base_values, sc.names)
    info = expected_information(params, data)
    var = np.diag(np.linalg.inv(info.I_hat))
    if kind == "unit_se":
        var = var * sc.J
    return tuple(var if kind == "variance" else np.sqrt(var))


def asymptotic_scale(scenario: Scenario) -> dict[str, float]:
    """Per-parameter shift unit from the inverse expected information at the base values.

    Raises:
        BoundaryError: if the information at the base values is not positive definite.
    """
    base = tuple(sorted(scenario.base_values.items()))
    vals = _scale_cached(scenario.mode, scenario.n, scenario.cluster_size, scenario.levels, base,
                         scenario.scale_kind)
    return dict(zip(scenario.names, (float(v) for v in vals)))


def group_params(scenario: Scenario) -> tuple[ParamVector, ParamVector]:
    """Parameters below and at-or-above the change level."""
    values = scenario.base_values
    shifted = dict(values)
    if scenario.changing and scenario.d > 0:
        scale = asymptotic_scale(scenario)
        for name in scenario.changing:
            shifted[name] = values[name] + scenario.d * scale[name]
    names = scenario.names
    low = _params_from_names(values, names)
    try:
        high = _params_from_names(shifted, names)
    except ValueError as exc:
        raise ScenarioError(f"shift d={scenario.d} of {scenario.changing}: {exc}") from None
    return low, high


def _sqrt_psd(D: NDArray[np.float64]) -> NDArray[np.float64]:
    w, U = np.linalg.eigh(D)
    return U * np.sqrt(np.clip(w, 0.0, None))


def generate_dataset(scenario: Scenario, seed: int | np.random.SeedSequence) -> Dataset:
    """Draw one dataset; ``aux`` holds each cluster's ``CA`` level."""
    rng = np.random.default_rng(seed)
    X, Z, g, ca = scenario.design()
    low, high = group_params(scenario)
    shifted = ca >= scenario.change_level
    u = rng.standard_normal((scenario.J, 2))
    e = rng.standard_normal(len(g))
    b = np.where(shifted[:, None], u @ _sqrt_psd(high.D).T, u @ _sqrt_psd(low.D).T)
    beta = np.where(shifted[g, None], high.beta, low.beta)
    sd = np.where(shifted[g], math.sqrt(high.sigma_r2), math.sqrt(low.sigma_r2))
    y = np.einsum("ij,ij->i", X, beta) + np.einsum("ij,ij->i", Z, b[g]) + sd * e
    return from_arrays(y, X, Z, g, aux=ca)


# ---------------------------------------------------------------------------
# replication driver
# ---------------------------------------------------------------------------


def replicate_seed(master: int, rep: int) -> np.random.SeedSequence:
    """Counter-based per-replicate seed: independent of scheduling order."""
    return np.random.SeedSequence(master, spawn_key=(rep,))


@dataclass(frozen=True)
class ReplicateOutcome:
    """Rejections (0/1) keyed by ``(statistic, param_tested)``; ``None`` if the fit failed.

    ``param_tested`` is a parameter name, a ``+``-joined set tested jointly,
    or ``"all"``.
    """

    rejections: dict[tuple[str, str], int] | None
    reason: str = ""


def _subset(target: str, names: Sequence[str]) -> list[int]:
    """Column indices for ``"beta1"``, a joint ``"beta1+sigma_r^2"`` or ``"all"``."""
    if target == "all":
        return list(range(len(names)))
    return [list(names).index(part) for part in target.split("+")]


def run_replicate(
    scenario: Scenario,
    rep: int,
    statistics: Sequence[str],
    tested: Sequence[str] | None = None,
    opts: TestOptions = TestOptions(),
) -> ReplicateOutcome:
    data = generate_dataset(scenario, replicate_seed(scenario.seed, rep))
    fit = fit_ml(data)
    if not fit.converged:
        return ReplicateOutcome(None, "not converged")
    out: dict[tuple[str, str], int] = {}
    names = data.param_names
    if scenario.mode == "demo":
        se = np.sqrt(np.diag(fixed_effect_covariance(fit, data)))
        crit = stats.norm.ppf(1 - opts.alpha / 2)
        for target in tested or WALD_TARGETS:
            i = names.index(target)
            out[(WALD, target)] = int(abs(fit.params.beta[i] / se[i]) > crit)
        stat_kinds = [s for s in statistics if s != WALD]
    else:
        stat_kinds = list(statistics)
    if stat_kinds:
        try:
            proc = fluctuation_process(fit, data, scale="ordinal")
        except BoundaryError as exc:
            return ReplicateOutcome(None, f"boundary: {exc}")
        for target in tested or names:
            sub = proc.select(_subset(target, names))
            for kind in stat_kinds:
                out[(kind, target)] = int(compute_statistic(sub, kind, opts).reject)
    return ReplicateOutcome(out)


@dataclass(frozen=True)
class PowerRow:
    scenario: str
    n: int
    d: float
    param_changed: str
    param_tested: str
    statistic: str
    power: float
    se: float
    reps: int

    def as_tuple(self) -> tuple:
        return (self.scenario, self.n, self.d, self.param_changed, self.param_tested, self.statistic,
                self.power, self.se, self.reps)


@dataclass
class PowerTable:
    """Rejection rates at the tests' alpha; ``failures`` counts dropped replicates per cell."""

    rows: list[PowerRow] = field(default_factory=list)
    failures: dict[tuple[str, int, float], int] = field(default_factory=dict)

    def lookup(self, statistic: str, param_tested: str, **where) -> list[PowerRow]:
        out = [r for r in self.rows if r.statistic == statistic and r.param_tested == param_tested]
        for key, value in where.items():
            out = [r for r in out if getattr(r, key) == value]
        return out

    def get(self, statistic: str, param_tested: str, **where) -> PowerRow:
        rows = self.lookup(statistic, param_tested, **where)
        if len(rows) != 1:
            raise KeyError(f"{len(rows)} rows match {statistic}/{param_tested} {where}")
        return rows[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self.rows:
            writer.writerow([r.scenario, r.n, f"{r.d:g}", r.param_changed, r.param_tested, r.statistic,
                             f"{r.power:.6f}", f"{r.se:.6f}", r.reps])
        return buf.getvalue()


def _cell_rows(scenario: Scenario, outcomes: Iterable[ReplicateOutcome]) -> tuple[list[PowerRow], int]:
    counts: dict[tuple[str, str], list[int]] = {}
    failed = 0
    for res in outcomes:
        if res.rejections is None:
            failed += 1
            continue
        for key, hit in res.rejections.items():
            counts.setdefault(key, []).append(hit)
    rows = []
    for (stat, target), hits in sorted(counts.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        k = len(hits)
        rate = sum(hits) / k
        rows.append(PowerRow(scenario.key, scenario.n, float(scenario.d), scenario.param_changed, target,
                             stat, rate, math.sqrt(rate * (1 - rate) / k), k))
    return rows, failed


def _run_cell(args) -> tuple[list[PowerRow], int]:
    scenario, statistics, tested, opts = args
    outcomes = (run_replicate(scenario, r, statistics, tested, opts) for r in range(scenario.reps))
    return _cell_rows(scenario, outcomes)


def run_power_study(
    scenarios: Sequence[Scenario],
    statistics: Sequence[str] = ("maxlm_o", "wdm_o", "lm_uo"),
    tested: Sequence[str] | None = None,
    opts: TestOptions = TestOptions(),
    workers: int = 1,
) -> PowerTable:
    """Generate, fit and test every replicate of every scenario.

    Replicate ``r`` of a scenario always uses the seed derived from
    ``(scenario.seed, r)``, so results do not depend on ``workers``.
    Non-converged or boundary fits are dropped and counted in
    ``PowerTable.failures``.
    """
    for s in statistics:
        if s not in ALL_KINDS and s != WALD:
            raise ValueError(f"unknown statistic {s!r}")
    jobs = [(sc, tuple(statistics), None if tested is None else tuple(tested), opts) for sc in scenarios]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(job) for job in jobs]
    table = PowerTable()
    for sc, (rows, failed) in zip(scenarios, results):
        table.rows.extend(rows)
        table.failures[(sc.key, sc.n, float(sc.d))] = failed
        if failed:
            log.info("%s n=%d d=%g: %d of %d replicates dropped", sc.key, sc.n, sc.d, failed, sc.reps)
    return table


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def _figure_panels(rows: list[PowerRow]) -> tuple[list[Panel], int]:
    ns = sorted({r.n for r in rows})
    changed = sorted({r.param_changed for r in rows})
    tested = list(dict.fromkeys(r.param_tested for r in rows))
    cols = [(t, c) for t in tested for c in changed]
    panels = []
    for n in ns:
        for t, c in cols:
            title = f"{t} | n={n}" if len(changed) == 1 else f"{t} | {c} | n={n}"
            cell = [r for r in rows if r.n == n and r.param_tested == t and r.param_changed == c]
            series = []
            for stat in dict.fromkeys(r.statistic for r in cell):
                pts = sorted((r.d, r.power) for r in cell if r.statistic == stat)
                series.append(Series(stat, [p[0] for p in pts], [p[1] for p in pts]))
            panels.append(Panel(title, series, y_range=(0.0, 1.0)))
    return panels, len(cols)


def emit_power_artifacts(table: PowerTable, out_dir: str | Path, seed: int | None = None) -> list[Path]:
    """Write ``power.csv`` and one SVG per scenario label; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "power.csv"]
    paths[0].write_text(table.to_csv(), encoding="utf-8")
    for key in dict.fromkeys(r.scenario for r in table.rows):
        rows = [r for r in table.rows if r.scenario == key]
        panels, ncols = _figure_panels(rows)
        safe = "".join(ch if ch.isalnum() else "_" for ch in key)
        meta = {"version": __version__, "seed": seed, "scenario": key,
                "failures": sum(v for k, v in table.failures.items() if k[0] == key)}
        paths.append(write_svg(out / f"power_{safe}.svg", panels, ncols,
                               title=f"power vs d, changing {key}", metadata=meta))
    return paths


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StudyConfig:
    """A scenario grid read from an INI-style ``[study]`` section."""

    mode: str = "power"
    n: tuple[int, ...] = (120, 480, 960)
    d: tuple[float, ...] = (0, 1, 2, 3, 4)
    changing: tuple[tuple[str, ...], ...] = (("beta1",), ("sigma0^2",), ("sigma_r^2",), ("beta1", "sigma_r^2"))
    statistics: tuple[str, ...] = ("maxlm_o", "wdm_o", "lm_uo")
    tested: tuple[str, ...] | None = None
    reps: int = 200
    seed: int = 0
    scale_kind: str = ""
    mc_reps: int = 25_000

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ScenarioError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.scale_kind and self.scale_kind not in SCALE_KINDS:
            raise ScenarioError(f"scale must be one of {SCALE_KINDS}, got {self.scale_kind!r}")
        if self.reps < 1 or self.mc_reps < 1:
            raise ScenarioError("reps and mc_reps must be positive")
        if not (self.n and self.d and self.changing and self.statistics):
            raise ScenarioError("n, d, changing and statistics must be non-empty")

    def partition(self) -> tuple[list[Scenario], list[str]]:
        """Valid scenarios plus messages for grid cells whose shift is not admissible."""
        valid, skipped = [], []
        for ch, n, d in product(self.changing, self.n, self.d):
            try:
                valid.append(Scenario(n=n, changing=ch, d=float(d), mode=self.mode,
                                      scale_kind=self.scale_kind, reps=self.reps, seed=self.seed,
                                      label="demo" if self.mode == "demo" else ""))
            except ScenarioError as exc:
                skipped.append(f"n={n} d={d:g} {'+'.join(ch)}: {exc}")
                log.info("skipping cell: %s", skipped[-1])
        return valid, skipped

    def scenarios(self) -> list[Scenario]:
        return self.partition()[0]


def _split(text: str, sep: str = ",") -> list[str]:
    return [part.strip() for part in text.split(sep) if part.strip()]


def load_study_config(path: str | Path) -> StudyConfig:
    """Read a study grid. Lists are comma-separated; changing sets use ``;`` and ``+``.

    Example::

        [study]
        mode = power
        n = 120, 480
        d = 0, 2, 4
        changing = beta1; sigma_r^2; beta1 + sigma_r^2
        statistics = maxlm_o, wdm_o, lm_uo
        reps = 200
        seed = 1
    """
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        if not parser.read(path, encoding="utf-8"):
            raise FileNotFoundError(path)
    except configparser.Error as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    if "study" not in parser:
        raise ScenarioError(f"{path}: missing [study] section")
    try:
        return _config_from_section(parser["study"])
    except ValueError as exc:
        raise ScenarioError(f"{path}: {exc}") from None


def _config_from_section(sec: configparser.SectionProxy) -> StudyConfig:
    base = StudyConfig()
    mode = sec.get("mode", base.mode)
    default_stats = (WALD,) if mode == "demo" else base.statistics
    default_changing = (("sigma0^2",), ("sigma01",), ("sigma1^2",), ("sigma_r^2",)) if mode == "demo" \
        else base.changing
    changing = tuple(tuple(_split(group, "+")) for group in _split(sec["changing"], ";")) \
        if "changing" in sec else default_changing
    tested = tuple(_split(sec["tested"])) if "tested" in sec else None
    return StudyConfig(
        mode=mode,
        n=tuple(int(v) for v in _split(sec["n"])) if "n" in sec else base.n,
        d=tuple(float(v) for v in _split(sec["d"])) if "d" in sec else base.d,
        changing=changing,
        statistics=tuple(_split(sec["statistics"])) if "statistics" in sec else default_stats,
        tested=tested,
        reps=sec.getint("reps", base.reps),
        seed=sec.getint("seed", base.seed),
        scale_kind=sec.get("scale", base.scale_kind),
        mc_reps=sec.getint("mc_reps", base.mc_reps),
    )
