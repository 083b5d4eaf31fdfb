"""Batch experiments on random complete two-layer networks.

A trial samples an n-by-n net from a weight prior, draws L1 evidence, and
records the exact log marginal (when enumerable), both optimized bounds and
their relative errors.  Sweeps bin trials by coupling strength ``sigma_std``;
scaling runs compare the two bounds at matched ``sigma*sqrt(n)`` or
``sqrt(n)/phi`` across network sizes.

Every trial gets its own generator, seeded from
``SeedSequence([base_seed, cell, trial])`` (PCG64), so results do not depend
on execution order or worker count.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .exact import DEFAULT_CAP, exact_log_marginal, sigma_std
from .lower import DEFAULT_EXPANSION_TERMS, LowerBoundOptions, lower_bound
from .network import Network, NetworkKind, ancestral_sample, layer_evidence
from .upper import upper_bound

TRIAL_HEADER = (
    "seed,n,prior_param,sigma_std,exact_log_p,ub_log,lb_log,"
    "rel_err_ub,rel_err_lb,gap_metric,sweeps_ub,sweeps_lb,degenerate"
).split(",")
AGGREGATE_HEADER = (
    "abscissa,bin_lo,bin_hi,count,median_rel_err_ub,median_rel_err_lb,median_gap"
).split(",")

FIGURES = ("fig2", "fig3", "fig4", "fig5", "custom")
FIG2_SIGMAS = (0.02, 0.03, 0.05, 0.075, 0.1, 0.15, 0.2, 0.25, 0.3, 0.4, 0.5, 0.6,
               0.75, 1.0, 1.25, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0)
FIG4_PHIS = (0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0, 24.0,
             32.0, 48.0, 64.0, 128.0, 256.0)
FIG3_ABSCISSA = (0.5, 1.0, 2.0, 4.0)
FIG5_ABSCISSA = (0.25, 0.5, 1.0, 2.0)
SCALING_SIZES = (8, 32, 128)
SWEEP_BINS = 20
SWEEP_RANGE = (0.0, 0.5)
DEFAULT_TRIALS = 100
# largest layer size for which the sigmoid lower bound enumerates parents
AUTO_EXACT_FAN_IN = 10
# sigma_std is enumerated up to this fan-in, sampled above it
SIGMA_STD_EXACT_FAN_IN = 20
SIGMA_STD_SAMPLES = 20_000


class ExperimentError(ValueError):
    """Inconsistent experiment configuration."""


@dataclass(frozen=True)
class PriorSpec:
    """Weight prior: ``gaussian`` (sigmoid nets) or ``dirichlet`` (noisy-OR)."""

    kind: str
    value: float

    def __post_init__(self):
        if self.kind not in ("gaussian", "dirichlet"):
            raise ExperimentError(f"unknown prior kind {self.kind!r}")
        if not (self.value > 0 and math.isfinite(self.value)):
            raise ExperimentError(f"{self.kind} prior parameter must be positive, got {self.value!r}")

    @classmethod
    def parse(cls, text: str) -> "PriorSpec":
        """Parse ``gaussian:<sigma>`` or ``dirichlet:<phi>``."""
        kind, sep, value = text.partition(":")
        if not sep:
            raise ExperimentError(f"prior must look like gaussian:<sigma> or dirichlet:<phi>, got {text!r}")
        try:
            v = float(value)
        except ValueError:
            raise ExperimentError(f"bad prior parameter {value!r}") from None
        return cls(kind.strip().lower(), v)

    @property
    def network_kind(self) -> NetworkKind:
        return NetworkKind.SIGMOID if self.kind == "gaussian" else NetworkKind.NOISY_OR

    def __str__(self):
        return f"{self.kind}:{self.value!r}"


def sample_parameters(prior: PriorSpec, shape, rng: np.random.Generator):
    """Draw an ``(n1, n2)`` weight matrix and the ``n2`` root priors (all 1/2).

    Gaussian weights are ``N(0, sigma^2)``.  Dirichlet draws ``q`` with density
    ``phi (1-q)^(phi-1)`` by inverting its CDF, ``q = 1 - u^(1/phi)``, and
    returns ``theta = -log(1 - q)``.
    """
    if prior.kind == "gaussian":
        W = rng.normal(0.0, prior.value, size=shape)
    else:
        u = 1.0 - rng.random(shape)  # in (0, 1], keeps theta finite
        # -log(1-q) = -log(u)/phi, computed without forming q
        W = -np.log(u) / prior.value
    return W, np.full(shape[1], 0.5)


def dirichlet_q(theta: np.ndarray) -> np.ndarray:
    return -np.expm1(-theta)


@dataclass(frozen=True)
class TrialConfig:
    """Everything that determines a trial apart from its seed."""

    prior: PriorSpec
    n: int
    evidence: str = "sampled"
    lb_mode: Optional[str] = None  # None picks by fan-in
    quadratic: bool = False
    expansion_terms: int = DEFAULT_EXPANSION_TERMS
    leak: Optional[float] = None
    oracle: str = "auto"  # "auto", "required" or "skip"
    cap: int = DEFAULT_CAP
    abscissa: Optional[float] = None

    def __post_init__(self):
        if self.n < 1:
            raise ExperimentError(f"layer size must be positive, got {self.n}")
        if self.evidence not in ("sampled", "zeros", "ones"):
            raise ExperimentError(f"unknown evidence policy {self.evidence!r}")
        if self.lb_mode not in (None, "exact", "aux"):
            raise ExperimentError(f"unknown lower-bound mode {self.lb_mode!r}")
        if self.oracle not in ("auto", "required", "skip"):
            raise ExperimentError(f"unknown oracle policy {self.oracle!r}")
        if self.leak is not None and self.prior.kind != "dirichlet":
            raise ExperimentError("a leak node only applies to noisy-OR networks")


@dataclass
class TrialRecord:
    seed: int
    n: int
    prior_param: float
    sigma_std: float
    exact_log_p: Optional[float]
    ub_log: float
    lb_log: float
    rel_err_ub: Optional[float]
    rel_err_lb: Optional[float]
    gap_metric: float
    sweeps_ub: int
    sweeps_lb: int
    degenerate: bool
    gap_symmetric: float = math.nan
    abscissa: Optional[float] = None

    def row(self) -> list[str]:
        return [_cell(getattr(self, k)) for k in TRIAL_HEADER]


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def relative_error(bound: float, exact: float) -> float:
    """``(bound - exact) / |exact|``: positive for upper, negative for lower bounds."""
    if exact == 0.0:
        return 0.0 if bound == 0.0 else math.nan
    if not math.isfinite(exact):
        return math.nan
    return (bound - exact) / abs(exact)


def gap_metrics(ub: float, lb: float) -> tuple[float, float]:
    """``lb/ub - 1`` and ``|ub - lb| / |ub|``; both zero when the bounds meet."""
    if ub == 0.0:
        return (0.0, 0.0) if lb == 0.0 else (math.nan, math.nan)
    return lb / ub - 1.0, abs(ub - lb) / abs(ub)


def trial_seed(base_seed: int, cell: int, trial: int) -> int:
    ss = np.random.SeedSequence([base_seed, cell, trial])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def build_trial_network(cfg: TrialConfig, rng: np.random.Generator) -> Network:
    W, p = sample_parameters(cfg.prior, (cfg.n, cfg.n), rng)
    net = Network.bipartite(cfg.prior.network_kind, W, p)
    if cfg.leak is not None:
        net = net.with_leak(cfg.leak)
    return net


def simulate_trial(cfg: TrialConfig, seed: int) -> TrialRecord:
    """Run one trial from an explicit seed (the ``seed`` column of the CSV)."""
    rng = np.random.default_rng(seed)
    net = build_trial_network(cfg, rng)
    l1, l2 = net.layers
    if cfg.evidence == "sampled":
        bits = ancestral_sample(net, rng)[l1]
    else:
        bits = np.full(len(l1), 1 if cfg.evidence == "ones" else 0)
    ev = layer_evidence(net, bits)

    fan_in = len(l2)
    if fan_in <= SIGMA_STD_EXACT_FAN_IN:
        s_std = sigma_std(net)
    else:
        s_std = sigma_std(net, mode="monte_carlo", samples=SIGMA_STD_SAMPLES, rng=rng)

    exact = None
    if cfg.oracle != "skip":
        if len(l2) > cfg.cap:
            if cfg.oracle == "required":
                raise ExperimentError(f"n = {cfg.n} is too large for the exact oracle (cap {cfg.cap})")
        else:
            exact = exact_log_marginal(net, ev, cap=cfg.cap).log_marginal

    ub = upper_bound(net, ev)
    mode = cfg.lb_mode or ("exact" if fan_in <= AUTO_EXACT_FAN_IN else "aux")
    lb = lower_bound(net, ev, LowerBoundOptions(
        sigmoid_expectation=mode,
        expansion_terms=cfg.expansion_terms,
        use_quadratic=cfg.quadratic,
    ))

    degenerate = bool(ub.degenerate) or (
        net.kind is NetworkKind.NOISY_OR and not np.any(bits)
    )
    rel_ub = rel_lb = None
    if exact is not None:
        rel_ub = relative_error(ub.log_bound, exact)
        rel_lb = relative_error(lb.log_bound, exact)
        if degenerate:
            # both bounds are exact here; drop optimizer round-off
            rel_ub = 0.0 if abs(rel_ub) < 1e-9 else rel_ub
            rel_lb = 0.0 if abs(rel_lb) < 1e-9 else rel_lb
    gap, gap_sym = gap_metrics(ub.log_bound, lb.log_bound)
    return TrialRecord(
        seed=seed,
        n=cfg.n,
        prior_param=cfg.prior.value,
        sigma_std=s_std,
        exact_log_p=exact,
        ub_log=ub.log_bound,
        lb_log=lb.log_bound,
        rel_err_ub=rel_ub,
        rel_err_lb=rel_lb,
        gap_metric=gap,
        sweeps_ub=ub.sweeps,
        sweeps_lb=lb.sweeps,
        degenerate=degenerate,
        gap_symmetric=gap_sym,
        abscissa=cfg.abscissa,
    )


# -- experiment specs -------------------------------------------------------


@dataclass(frozen=True)
class ExperimentSpec:
    """A grid of cells ``(n, prior parameter)`` with a fixed number of trials each.

    For ``fig3``/``fig5`` the ``params`` are abscissa values ``sigma*sqrt(n)``
    or ``sqrt(n)/phi``; otherwise they are the prior parameters themselves.
    """

    figure: str
    kind: NetworkKind
    sizes: tuple[int, ...]
    params: tuple[float, ...]
    trials: int = DEFAULT_TRIALS
    seed: int = 0
    evidence: str = "sampled"
    lb_mode: Optional[str] = None
    quadratic: bool = False
    expansion_terms: int = DEFAULT_EXPANSION_TERMS
    leak: Optional[float] = None

    def __post_init__(self):
        if self.figure not in FIGURES:
            raise ExperimentError(f"unknown figure {self.figure!r}")
        if self.trials < 1:
            raise ExperimentError("trials must be positive")
        if not self.sizes or not self.params:
            raise ExperimentError("sizes and params must be non-empty")

    @classmethod
    def for_figure(cls, figure: str, **overrides) -> "ExperimentSpec":
        defaults = {
            "fig2": dict(kind=NetworkKind.SIGMOID, sizes=(8,), params=FIG2_SIGMAS),
            "fig3": dict(kind=NetworkKind.SIGMOID, sizes=SCALING_SIZES, params=FIG3_ABSCISSA),
            "fig4": dict(kind=NetworkKind.NOISY_OR, sizes=(8,), params=FIG4_PHIS),
            "fig5": dict(kind=NetworkKind.NOISY_OR, sizes=SCALING_SIZES, params=FIG5_ABSCISSA,
                         evidence="ones"),
        }
        if figure not in defaults:
            raise ExperimentError(f"no defaults for figure {figure!r}")
        kw = defaults[figure]
        kw.update({k: v for k, v in overrides.items() if v is not None})
        kw["sizes"] = tuple(int(n) for n in kw["sizes"])
        kw["params"] = tuple(float(a) for a in kw["params"])
        return cls(figure=figure, **kw)

    @property
    def scaling(self) -> bool:
        return self.figure in ("fig3", "fig5")

    def cells(self) -> list[tuple[int, float]]:
        return [(n, a) for n in self.sizes for a in self.params]

    def trial_config(self, cell: int) -> TrialConfig:
        n, a = self.cells()[cell]
        gaussian = self.kind is NetworkKind.SIGMOID
        if self.scaling:
            value = a / math.sqrt(n) if gaussian else math.sqrt(n) / a
            abscissa, oracle = a, "skip"
        else:
            value, abscissa = a, None
            oracle = "required" if self.figure in ("fig2", "fig4") else "auto"
        prior = PriorSpec("gaussian" if gaussian else "dirichlet", value)
        return TrialConfig(
            prior=prior,
            n=n,
            evidence=self.evidence,
            lb_mode=self.lb_mode,
            quadratic=self.quadratic,
            expansion_terms=self.expansion_terms,
            leak=self.leak,
            oracle=oracle,
            abscissa=abscissa,
        )


def run_trial(spec: ExperimentSpec, cell: int, trial_index: int) -> TrialRecord:
    return simulate_trial(spec.trial_config(cell), trial_seed(spec.seed, cell, trial_index))


def _run_task(task):
    spec, cell, t = task
    return run_trial(spec, cell, t)


def run_trials(spec: ExperimentSpec, jobs: int = 1) -> list[TrialRecord]:
    """All trials of ``spec`` ordered by ``(cell, trial)``, whatever ``jobs`` is."""
    for cell in range(len(spec.cells())):
        spec.trial_config(cell)  # fail on bad configuration before any work
    tasks = [(spec, c, t) for c in range(len(spec.cells())) for t in range(spec.trials)]
    if jobs <= 1:
        return [_run_task(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (8 * jobs))))


# -- aggregation -------------------------------------------------------------


@dataclass
class AggregateRow:
    abscissa: float
    bin_lo: float
    bin_hi: float
    count: int
    median_rel_err_ub: Optional[float]
    median_rel_err_lb: Optional[float]
    median_gap: Optional[float]

    def row(self) -> list[str]:
        return [_cell(getattr(self, k)) for k in AGGREGATE_HEADER]


def _median(values) -> Optional[float]:
    v = np.array([x for x in values if x is not None], dtype=float)
    v = v[~np.isnan(v)]
    return float(np.median(v)) if len(v) else None


def _summarize(records, abscissa, lo, hi) -> AggregateRow:
    return AggregateRow(
        abscissa=abscissa,
        bin_lo=lo,
        bin_hi=hi,
        count=len(records),
        median_rel_err_ub=_median(r.rel_err_ub for r in records),
        median_rel_err_lb=_median(r.rel_err_lb for r in records),
        median_gap=_median(r.gap_metric for r in records),
    )


def aggregate_sweep(
    records: Sequence[TrialRecord], bins: int = SWEEP_BINS, lo: float = SWEEP_RANGE[0], hi: float = SWEEP_RANGE[1]
) -> list[AggregateRow]:
    """Medians per equal-width ``sigma_std`` bin; empty bins have no medians."""
    edges = np.linspace(lo, hi, bins + 1)
    s = np.array([r.sigma_std for r in records], dtype=float)
    idx = np.clip(np.searchsorted(edges, s, side="right") - 1, 0, bins - 1)
    rows = []
    for b in range(bins):
        members = [r for r, k in zip(records, idx) if k == b]
        rows.append(_summarize(members, 0.5 * (edges[b] + edges[b + 1]), edges[b], edges[b + 1]))
    return rows


def aggregate_scaling(records: Sequence[TrialRecord]) -> dict[int, list[AggregateRow]]:
    """Medians per ``(n, abscissa)`` cell, grouped by ``n``."""
    out: dict[int, list[AggregateRow]] = {}
    for n in sorted({r.n for r in records}):
        group = [r for r in records if r.n == n]
        rows = []
        for a in sorted({r.abscissa for r in group}):
            rows.append(_summarize([r for r in group if r.abscissa == a], a, a, a))
        out[n] = rows
    return out


# -- output ------------------------------------------------------------------


def _write(path, header, rows):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        out.writerows(rows)


def emit_csv(records: Sequence[TrialRecord], path) -> None:
    _write(path, TRIAL_HEADER, (r.row() for r in records))


def emit_aggregate_csv(rows: Sequence[AggregateRow], path) -> None:
    _write(path, AGGREGATE_HEADER, (r.row() for r in rows))


def aggregate_path(out, n: Optional[int] = None) -> Path:
    """``fig2.csv`` -> ``fig2.agg.csv``; with ``n`` -> ``fig3.agg.n32.csv``."""
    out = Path(out)
    tag = ".agg" if n is None else f".agg.n{n}"
    return out.with_name(out.stem + tag + ".csv")


@dataclass
class SweepResult:
    records: list[TrialRecord]
    rows: list[AggregateRow]


@dataclass
class ScalingResult:
    records: list[TrialRecord]
    rows: dict[int, list[AggregateRow]] = field(default_factory=dict)


def run_sweep(spec: ExperimentSpec, out=None, jobs: int = 1) -> SweepResult:
    """Trials over a prior grid, binned by ``sigma_std``."""
    if spec.scaling:
        raise ExperimentError(f"{spec.figure} is a scaling figure; use run_scaling")
    records = run_trials(spec, jobs)
    result = SweepResult(records, aggregate_sweep(records))
    if out is not None:
        emit_csv(records, out)
        emit_aggregate_csv(result.rows, aggregate_path(out))
    return result


def run_scaling(spec: ExperimentSpec, out=None, jobs: int = 1) -> ScalingResult:
    """Bound gaps at matched abscissa across layer sizes (no oracle)."""
    if not spec.scaling:
        raise ExperimentError(f"{spec.figure} is not a scaling figure; use run_sweep")
    records = run_trials(spec, jobs)
    result = ScalingResult(records, aggregate_scaling(records))
    if out is not None:
        emit_csv(records, out)
        for n, rows in result.rows.items():
            emit_aggregate_csv(rows, aggregate_path(out, n))
    return result


__all__ = [
    "AGGREGATE_HEADER",
    "AggregateRow",
    "ExperimentError",
    "ExperimentSpec",
    "PriorSpec",
    "ScalingResult",
    "SweepResult",
    "TRIAL_HEADER",
    "TrialConfig",
    "TrialRecord",
    "aggregate_scaling",
    "aggregate_sweep",
    "emit_aggregate_csv",
    "emit_csv",
    "gap_metrics",
    "relative_error",
    "run_scaling",
    "run_sweep",
    "run_trial",
    "run_trials",
    "sample_parameters",
    "simulate_trial",
    "trial_seed",
]
