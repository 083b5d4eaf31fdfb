"""Variational upper bounds on L1 marginals of two-layer networks.

Both bounds replace each L1 conditional by an exponential upper bound with a
free parameter ``xi_i``.  For fixed ``xi`` the joint factorizes over L2 and
the sum over L2 is a product of two-term mixtures, so for any ``xi``

    log P(L1) <= sum_i pen(xi_i) + sum_j log(p_j exp(a_j(xi)) + 1 - p_j)

with ``a_j`` linear in ``xi``.  The right-hand side is jointly convex in
``xi`` and is minimized by coordinate descent.  In the default mode each
``log`` is linearized with a Legendre multiplier ``lambda_j`` (closed-form
update ``1/x_j``) and the coordinate problems only see exponentials.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from .network import Evidence, Network, NetworkError, NetworkKind, check_evidence
from .transforms import binary_entropy, log_mix as _log_mix, noisy_or_conjugate

_XTOL = 1e-10


@dataclass
class UpperBoundOptions:
    tol: float = 1e-8
    max_sweeps: int = 200
    xi_max: float = 1e6
    trace: bool = False
    # minimize the log-form directly instead of via lambda multipliers
    eliminate_lambda: bool = False


@dataclass
class VariationalState:
    xi: np.ndarray
    lam: Optional[np.ndarray] = None


@dataclass
class UpperBoundResult:
    log_bound: float
    sweeps: int
    converged: bool
    final_state: VariationalState
    trace: list = field(default_factory=list)
    xi_cap_hit: bool = False
    degenerate: bool = False


def _bipartite_inputs(net: Network, ev: Evidence, kind: NetworkKind):
    if net.kind is not kind:
        raise NetworkError(f"expected a {kind.value} network, got {net.kind.value}")
    if not net.is_bipartite:
        raise NetworkError("upper bounds need a bipartite (two-layer) network")
    ev = check_evidence(net, ev)
    l1, l2, W, p = net.bipartite_view()
    if set(ev) != set(l1.tolist()):
        raise ValueError("evidence must assign exactly the L1 nodes")
    S = np.array([ev[int(i)] for i in l1], dtype=float)
    return W, S, p


def _safe_newton(fun: Callable, lo: float, hi: float, x0: float, xtol: float = _XTOL) -> float:
    """Root of an increasing function bracketed by ``[lo, hi]``.

    Newton steps, with bisection whenever a step leaves the bracket or the
    derivative is unusable.
    """
    x = min(max(x0, lo), hi)
    for _ in range(200):
        f, df = fun(x)
        if f == 0.0:
            return x
        if f < 0 or np.isnan(f):
            lo = x
        else:
            hi = x
        step = f / df if np.isfinite(f) and np.isfinite(df) and df > 0 else np.nan
        xn = x - step
        if not (lo < xn < hi):
            xn = 0.5 * (lo + hi)
        if abs(xn - x) < xtol or hi - lo < xtol:
            return xn
        x = xn
    return x


# -- sigmoid --------------------------------------------------------------


def ub_sigmoid_eval(net: Network, ev: Evidence, xi) -> float:
    """Log upper bound for fixed ``xi`` (one entry per L1 node)."""
    W, S, p = _bipartite_inputs(net, ev, NetworkKind.SIGMOID)
    xi = np.asarray(xi, dtype=float)
    C = (2.0 * S - 1.0)[:, None] * W
    return float(-binary_entropy(xi).sum() + _log_mix(xi @ C, p).sum())


def ub_sigmoid_log_eval(net: Network, ev: Evidence, xi, lam) -> float:
    """The bound with each ``log x_j`` replaced by ``lam_j x_j - log lam_j - 1``."""
    W, S, p = _bipartite_inputs(net, ev, NetworkKind.SIGMOID)
    xi = np.asarray(xi, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if np.any(~(lam > 0)):
        raise ValueError("lambda must be positive")
    C = (2.0 * S - 1.0)[:, None] * W
    x = np.exp(_log_mix(xi @ C, p))
    return float(-binary_entropy(xi).sum() + (lam * x - np.log(lam) - 1.0).sum())


def ub_sigmoid_optimize(net: Network, ev: Evidence, opts: Optional[UpperBoundOptions] = None) -> UpperBoundResult:
    W, S, p = _bipartite_inputs(net, ev, NetworkKind.SIGMOID)
    C = (2.0 * S - 1.0)[:, None] * W
    xi0 = np.full(len(S), 0.5)
    res = _coordinate_descent(_SigmoidProblem(C, p), xi0, opts or UpperBoundOptions())
    if res.log_bound > 0.0:
        # xi = 0 always gives bound 1
        xi = np.zeros(len(S))
        res.final_state = VariationalState(xi, 1.0 / np.exp(_log_mix(xi @ C, p)))
        res.log_bound = 0.0
    return res


# -- noisy-OR -------------------------------------------------------------


def _noisy_or_parts(W, S):
    on = S == 1
    offset = -W[~on].sum(axis=0)
    return on, W[on], offset


def ub_noisy_or_eval(net: Network, ev: Evidence, xi) -> float:
    """Log upper bound for fixed ``xi >= 0``; entries for off nodes are ignored."""
    W, S, p = _bipartite_inputs(net, ev, NetworkKind.NOISY_OR)
    xi = np.asarray(xi, dtype=float)
    if np.any(~(xi >= 0)):
        raise ValueError("noisy-OR xi must be non-negative")
    on, Won, offset = _noisy_or_parts(W, S)
    a = xi[on] @ Won + offset
    return float(-noisy_or_conjugate(xi[on]).sum() + _log_mix(a, p).sum())


def ub_noisy_or_log_eval(net: Network, ev: Evidence, xi, lam) -> float:
    """Legendre form of :func:`ub_noisy_or_eval`.

    The conjugate enters with a minus sign, matching the exponent of the
    unlinearized bound; with the opposite sign the expression is not a bound.
    """
    W, S, p = _bipartite_inputs(net, ev, NetworkKind.NOISY_OR)
    xi = np.asarray(xi, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if np.any(~(xi >= 0)):
        raise ValueError("noisy-OR xi must be non-negative")
    if np.any(~(lam > 0)):
        raise ValueError("lambda must be positive")
    on, Won, offset = _noisy_or_parts(W, S)
    x = np.exp(_log_mix(xi[on] @ Won + offset, p))
    return float(-noisy_or_conjugate(xi[on]).sum() + (lam * x - np.log(lam) - 1.0).sum())


def ub_noisy_or_optimize(net: Network, ev: Evidence, opts: Optional[UpperBoundOptions] = None) -> UpperBoundResult:
    W, S, p = _bipartite_inputs(net, ev, NetworkKind.NOISY_OR)
    opts = opts or UpperBoundOptions()
    on, Won, offset = _noisy_or_parts(W, S)
    # an on node with no possibly-active parent makes the evidence impossible
    reach = (Won * (p > 0)).sum(axis=1)
    degenerate = bool(np.any(reach <= 0))
    problem = _NoisyOrProblem(Won, offset, p, opts.xi_max)
    res = _coordinate_descent(problem, np.ones(int(on.sum())), opts)
    xi = np.zeros(len(S))
    xi[on] = res.final_state.xi
    res.final_state.xi = xi
    at_zero = float(_log_mix(offset, p).sum())
    if res.log_bound > at_zero:
        # xi = 0 bounds by P(off nodes off) <= 1
        xi[:] = 0.0
        res.final_state.lam = np.exp(-_log_mix(offset, p))
        res.log_bound = at_zero
    res.degenerate = degenerate
    res.xi_cap_hit = problem.cap_hit
    return res


def upper_bound(net: Network, ev: Evidence, opts: Optional[UpperBoundOptions] = None) -> UpperBoundResult:
    if net.kind is NetworkKind.SIGMOID:
        return ub_sigmoid_optimize(net, ev, opts)
    return ub_noisy_or_optimize(net, ev, opts)


# -- coordinate descent ---------------------------------------------------


class _SigmoidProblem:
    """xi in [0, 1], penalty -H(xi), coefficients C[i, j]; solved in logit(xi)."""

    def __init__(self, C, p):
        self.C, self.p = C, p
        self.offset = np.zeros(C.shape[1])
        with np.errstate(divide="ignore"):
            self.logit_p = np.log(p) - np.log1p(-p)

    def penalty(self, xi):
        return -binary_entropy(xi)

    def solve(self, i, xi_i, a, w, eliminate):
        c = self.C[i]

        def G(x):
            d = (x - xi_i) * c
            if eliminate:
                g = expit(self.logit_p + a + d)
                return c @ g, (c * c) @ (g * (1.0 - g))
            e = w * np.exp(d)
            return c @ e, (c * c) @ e

        g0, g1 = G(0.0)[0], G(1.0)[0]

        def h(t):
            x = expit(t)
            gv, gd = G(x)
            return t + gv, 1.0 + gd * x * (1.0 - x)

        lo, hi = -g1, -g0
        if hi - lo < _XTOL:
            return float(expit(0.5 * (lo + hi)))
        t0 = np.log(xi_i) - np.log1p(-xi_i) if 0 < xi_i < 1 else 0.0
        return float(expit(_safe_newton(h, lo, hi, t0)))


class _NoisyOrProblem:
    """xi in [0, xi_max], penalty -F(xi); solved in log(xi)."""

    def __init__(self, Won, offset, p, xi_max):
        self.C, self.offset, self.p = Won, offset, p
        self.xi_max = xi_max
        self.cap_hit = False
        with np.errstate(divide="ignore"):
            self.logit_p = np.log(p) - np.log1p(-p)

    def penalty(self, xi):
        return -noisy_or_conjugate(xi)

    def solve(self, i, xi_i, a, w, eliminate):
        c = self.C[i]

        def h(t):
            x = np.exp(t)
            d = (x - xi_i) * c
            with np.errstate(over="ignore", invalid="ignore"):
                if eliminate:
                    g = expit(self.logit_p + a + d)
                    gv, gd = c @ g, (c * c) @ (g * (1.0 - g))
                else:
                    e = w * np.exp(d)
                    gv, gd = c @ e, (c * c) @ e
            return -np.log1p(np.exp(-t)) + gv, expit(-t) + gd * x

        t_max = np.log(self.xi_max)
        if h(t_max)[0] < 0:
            self.cap_hit = True
            return self.xi_max
        t0 = np.log(xi_i) if xi_i > 0 else 0.0
        t0 = min(t0, t_max)
        lo = t0
        while h(lo)[0] > 0:
            lo -= 2.0
        hi = t0
        while hi < t_max and h(hi)[0] < 0:
            hi = min(hi + 2.0, t_max)
        return float(np.exp(_safe_newton(h, lo, hi, t0)))


def _coordinate_descent(problem, xi, opts: UpperBoundOptions) -> UpperBoundResult:
    C, p = problem.C, problem.p
    xi = xi.astype(float).copy()
    m = len(xi)
    trace = []

    def value(xi_, a_):
        return float(problem.penalty(xi_).sum() + _log_mix(a_, p).sum())

    def legendre_value(xi_, a_, lam_):
        x = np.exp(_log_mix(a_, p))
        return float(problem.penalty(xi_).sum() + (lam_ * x - np.log(lam_) - 1.0).sum())

    a = xi @ C + problem.offset
    prev = value(xi, a)
    if opts.trace:
        trace.append((0, "init", prev))
    converged = False
    sweep = 0
    for sweep in range(1, opts.max_sweeps + 1):
        a = xi @ C + problem.offset
        lam = None
        if opts.eliminate_lambda:
            cur = value(xi, a)
        else:
            lam = np.exp(-_log_mix(a, p))
            cur = legendre_value(xi, a, lam)
            if opts.trace:
                trace.append((sweep, "lambda", cur))
        for i in range(m):
            w = None
            if not opts.eliminate_lambda:
                with np.errstate(divide="ignore"):
                    w = np.exp(np.log(lam) + np.log(p) + a)
            new = problem.solve(i, xi[i], a, w, opts.eliminate_lambda)
            a_new = a + (new - xi[i]) * C[i]
            xi_new = xi.copy()
            xi_new[i] = new
            if opts.eliminate_lambda:
                val = value(xi_new, a_new)
            else:
                val = legendre_value(xi_new, a_new, lam)
            if val <= cur:
                xi, a, cur = xi_new, a_new, val
            if opts.trace:
                trace.append((sweep, f"xi_{i}", cur))
        now = value(xi, xi @ C + problem.offset)
        if now > prev + 1e-12 * max(1.0, abs(prev)):
            raise AssertionError(f"upper bound increased in sweep {sweep}: {prev} -> {now}")
        change = abs(prev - now)
        prev = now
        if change <= opts.tol * max(abs(now), 1e-300):
            converged = True
            break
    a = xi @ C + problem.offset
    lam = np.exp(-_log_mix(a, p))
    return UpperBoundResult(
        log_bound=prev,
        sweeps=sweep,
        converged=converged,
        final_state=VariationalState(xi, lam),
        trace=trace,
    )


def write_trace_csv(result, path: str | Path) -> None:
    """Write an optimizer trace as CSV (sweep, coordinate, log_bound)."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["sweep", "coordinate", "log_bound"])
        for row in result.trace:
            out.writerow([row[0], row[1], repr(float(row[2]))])
