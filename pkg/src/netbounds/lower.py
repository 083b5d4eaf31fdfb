"""Mean-field lower bounds on log-marginals of generic DAGs.

With a factorized ``Q`` over the unassigned nodes, ``log P(ev)`` is bounded
below by ``sum_i E_Q[log P(S_i | pa_i)] + H(Q)``.  Sigmoid nodes contribute
``mu_i E[z_i] - E[softplus(z_i)]`` where ``z_i`` is the weighted parent sum;
the softplus expectation is either enumerated over parent configurations or
bounded with a per-node auxiliary parameter ``eta``.  Noisy-OR nodes use the
sigmoid-product expansion of ``1 - exp(-z)`` truncated at ``N`` factors, with
each factor's expectation pulled inside ``-log(1 + .)`` (optionally with the
quadratic second-moment correction).

Throughout, ``mubar`` is a length-``n`` vector holding ``Q`` means for
unassigned nodes and the observed bit for evidence nodes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import expit, logit, xlogy

from .network import Evidence, Network, NetworkKind, check_evidence, hidden_nodes
from .transforms import binary_entropy, log_mix, quad_curvature

MU_FLOOR = 1e-12
# The truncated noisy-OR expansion overestimates 1 - exp(-z), so a factorized
# Q that leaves mass on "no parent on" can overshoot log P.  The excess shrinks
# like 2**-N and grows as parent priors and weights get small; with forty
# terms it stays near 1e-11 for priors and weights of order 0.1.
DEFAULT_EXPANSION_TERMS = 40


@dataclass
class LowerBoundOptions:
    sigmoid_expectation: str = "exact"  # "exact" or "aux"
    expansion_terms: int = DEFAULT_EXPANSION_TERMS
    use_quadratic: bool = False
    tol: float = 1e-8
    max_sweeps: int = 200
    fan_in_cap: int = 20
    trace: bool = False

    def __post_init__(self):
        if self.sigmoid_expectation not in ("exact", "aux"):
            raise ValueError(f"unknown sigmoid expectation mode {self.sigmoid_expectation!r}")
        if self.expansion_terms < 1:
            raise ValueError("expansion_terms must be >= 1")


@dataclass
class LowerBoundResult:
    log_bound: float
    sweeps: int
    converged: bool
    final_mu: np.ndarray
    trace: list = field(default_factory=list)


def entropy_q(mu) -> float:
    return float(np.sum(binary_entropy(mu)))


# -- node-term kernels ----------------------------------------------------


class _SoftplusExact:
    """Sigmoid terms with ``E[softplus(z)]`` enumerated over hidden parents.

    ``softplus(z_i)`` for every configuration of node ``i``'s hidden parents
    is tabulated once as a ``(2,) * k`` tensor; expectations under ``Q`` are
    contractions of that tensor with ``[1 - mu, mu]`` along each axis.
    """

    multilinear = True

    def __init__(self, net: Network, cap: int, hidden: np.ndarray, mubar: np.ndarray):
        self.net = net
        self.nonroot = np.flatnonzero(net.edges.any(axis=1))
        is_hidden = np.zeros(net.n, dtype=bool)
        is_hidden[hidden] = True
        self.hp = {}
        self.tab = {}
        for i in self.nonroot:
            pa = np.flatnonzero(net.edges[i])
            hp = pa[is_hidden[pa]]
            fp = pa[~is_hidden[pa]]
            k = len(hp)
            if k > cap:
                raise ValueError(f"node {i}: {k} hidden parents exceeds fan-in cap {cap}")
            bits = (np.arange(1 << k)[:, None] >> np.arange(k - 1, -1, -1)) & 1
            z = net.theta[i, fp] @ mubar[fp] + bits @ net.theta[i, hp]
            self.hp[i] = hp
            self.tab[i] = np.logaddexp(0.0, z).reshape((2,) * k)

    def _softplus_mean(self, i, mubar, skip=None):
        t = self.tab[i]
        hp = self.hp[i]
        axes = list(range(len(hp)))
        if skip is not None:
            a = int(np.flatnonzero(hp == skip)[0])
            t = np.moveaxis(t, a, -1)
            axes.pop(a)
        for a in axes:
            m = mubar[hp[a]]
            t = np.array([1.0 - m, m]) @ t.reshape(2, -1)
        return t.item() if skip is None else t.reshape(2)

    def begin_sweep(self, mubar):
        self.E = self.net.theta @ mubar
        self.SP = np.zeros(self.net.n)
        for i in self.nonroot:
            self.SP[i] = self._softplus_mean(i, mubar)

    refresh = begin_sweep

    def node_terms(self, mubar):
        t = np.zeros(self.net.n)
        t[self.nonroot] = mubar[self.nonroot] * self.E[self.nonroot] - self.SP[self.nonroot]
        return t

    def local(self, j, cand, mubar, children):
        cand = np.asarray(cand, dtype=float)
        out = np.zeros(cand.shape)
        for c in children:
            sp0, sp1 = self._softplus_mean(c, mubar, skip=j)
            e = self.E[c] + self.net.theta[c, j] * (cand - mubar[j])
            out += mubar[c] * e - ((1.0 - cand) * sp0 + cand * sp1)
        if self.net.edges[j].any():
            out += cand * self.E[j] - self.SP[j]
        return out

    def commit(self, j, old, new, mubar, children):
        self.E += self.net.theta[:, j] * (new - old)
        for c in children:
            self.SP[c] = self._softplus_mean(c, mubar)


class _Factorized:
    """Terms that depend on parents through ``E[z]`` and per-node log-MGFs.

    ``L[i, k] = log E_Q[exp(t[i, k] z_i)]`` factorizes over parents, so a
    change of one ``mu_j`` touches one summand per child.
    """

    multilinear = False

    def __init__(self, net: Network, tvals: np.ndarray):
        self.net = net
        self.nonroot = np.flatnonzero(net.edges.any(axis=1))
        self.tvals = tvals

    def _factor(self, t, th, mu):
        return log_mix(t * th, mu)

    def refresh(self, mubar):
        th = self.net.theta
        self.E = th @ mubar
        # (n, T, n): factor for node i, scale k, parent p
        f = log_mix(self.tvals[:, :, None] * th[:, None, :], mubar[None, None, :])
        self.L = f.sum(axis=2)

    begin_sweep = refresh

    def node_terms(self, mubar):
        t = np.zeros(self.net.n)
        idx = self.nonroot
        t[idx] = self.term(mubar[idx], self.L[idx], self.E[idx], idx)
        return t

    def local(self, j, cand, mubar, children):
        cand = np.asarray(cand, dtype=float)
        out = np.zeros(cand.shape)
        if len(children):
            th = self.net.theta[children, j]
            tv = self.tvals[children]
            old = log_mix(tv * th[:, None], mubar[j])
            new = log_mix(tv[None] * th[None, :, None], cand[:, None, None])
            L = self.L[children][None] + new - old[None]
            E = self.E[children][None] + th[None] * (cand[:, None] - mubar[j])
            out += self.term(mubar[children][None], L, E, children).sum(axis=1)
        if self.net.edges[j].any():
            out += self.term(cand[:, None], self.L[j][None, None], self.E[j], np.array([j]))[:, 0]
        return out

    def commit(self, j, old, new, mubar, children):
        th = self.net.theta[children, j]
        tv = self.tvals[children]
        self.L[children] += log_mix(tv * th[:, None], new) - log_mix(tv * th[:, None], old)
        self.E += self.net.theta[:, j] * (new - old)


class _NoisyOrTerms(_Factorized):
    def __init__(self, net: Network, n_terms: int, quadratic: bool, curvature: bool = True):
        self.n_terms = n_terms
        self.quadratic = quadratic
        self.curvature = curvature
        k = n_terms + 1 if quadratic else n_terms
        tv = -(2.0 ** np.arange(k))
        super().__init__(net, np.broadcast_to(tv, (net.n, k)).copy())

    def term(self, mu, L, E, idx):
        X = np.exp(L)
        N = self.n_terms
        s = -np.log1p(X[..., :N])
        if self.quadratic and self.curvature:
            Xk = X[..., :N]
            # E[Y^2] for Y = exp(-2^k z) is the next scale's E[Y]
            s = s + quad_curvature(Xk) * (X[..., 1:] - Xk * Xk)
        return mu * s.sum(axis=-1) - (1.0 - mu) * E


class _SoftplusAux(_Factorized):
    """Sigmoid terms via ``E[softplus(z)] <= eta E[z] + log(M(-eta) + M(1-eta))``."""

    def __init__(self, net: Network):
        super().__init__(net, np.zeros((net.n, 2)))
        self.eta = np.full(net.n, 0.5)
        self._set_t()

    def _set_t(self):
        self.tvals[:, 0] = -self.eta
        self.tvals[:, 1] = 1.0 - self.eta

    def term(self, mu, L, E, idx):
        eta = self.eta[idx]
        return (mu - eta) * E - np.logaddexp(L[..., 0], L[..., 1])

    def _eta_slope(self, eta, th, mubar, E):
        # d/d eta of eta E + log(M(-eta) + M(1 - eta))
        with np.errstate(divide="ignore"):
            logmu = np.log(mubar)[None, :]

        def logm_and_slope(t):
            a = t[:, None] * th
            f = log_mix(a, mubar[None, :])
            d = (th * np.exp(logmu + a - f)).sum(axis=1)
            return f.sum(axis=1), d

        l0, d0 = logm_and_slope(-eta)
        l1, d1 = logm_and_slope(1.0 - eta)
        w = expit(l0 - l1)
        return E - w * d0 - (1.0 - w) * d1

    def begin_sweep(self, mubar):
        idx = self.nonroot
        if len(idx):
            th = self.net.theta[idx]
            E = th @ mubar
            lo = np.zeros(len(idx))
            hi = np.ones(len(idx))
            s0 = self._eta_slope(lo, th, mubar, E)
            s1 = self._eta_slope(hi, th, mubar, E)
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                s = self._eta_slope(mid, th, mubar, E)
                pos = s > 0
                hi = np.where(pos, mid, hi)
                lo = np.where(pos, lo, mid)
            eta = 0.5 * (lo + hi)
            eta = np.where(s0 >= 0, 0.0, np.where(s1 <= 0, 1.0, eta))
            self.eta[idx] = eta
            self._set_t()
        self.refresh(mubar)


def _make_kernel(net: Network, opts: LowerBoundOptions, hidden, mubar, curvature: bool = True):
    if net.kind is NetworkKind.NOISY_OR:
        return _NoisyOrTerms(net, opts.expansion_terms, opts.use_quadratic, curvature)
    if opts.sigmoid_expectation == "exact":
        return _SoftplusExact(net, opts.fan_in_cap, hidden, mubar)
    return _SoftplusAux(net)


# -- mean-field state -----------------------------------------------------


class _MeanField:
    def __init__(self, net: Network, ev: Evidence, opts: LowerBoundOptions, mu=None, curvature=True):
        ev = check_evidence(net, ev)
        self.net = net
        self.opts = opts
        self.hidden = hidden_nodes(net, ev)
        self.is_root = ~net.edges.any(axis=1)
        self.prior = net.priors
        mubar = np.zeros(net.n)
        for k, v in ev.items():
            mubar[k] = v
        deterministic = [
            h for h in self.hidden if self.is_root[h] and self.prior[h] in (0.0, 1.0)
        ]
        self.free = np.array([h for h in self.hidden if h not in deterministic], dtype=int)
        if mu is None:
            mubar[deterministic] = self.prior[deterministic]
            mubar[self.free] = 0.5
        else:
            mu = np.asarray(mu, dtype=float)
            if mu.shape != self.hidden.shape:
                raise ValueError(f"mu has {mu.size} entries, expected {len(self.hidden)}")
            if np.any(~(mu >= 0)) or np.any(~(mu <= 1)):
                raise ValueError("mu must lie in [0, 1]")
            mubar[self.hidden] = mu
        self.mubar = mubar
        self.children = [np.flatnonzero(net.edges[:, j]) for j in range(net.n)]
        self.kernel = _make_kernel(net, opts, self.hidden, mubar, curvature)

    def _prior_term(self, j, vals):
        p = self.prior[j]
        return xlogy(vals, p) + xlogy(1.0 - vals, 1.0 - p)

    def total(self) -> float:
        """Bound value; assumes the kernel caches are current."""
        roots = np.flatnonzero(self.is_root)
        val = self.kernel.node_terms(self.mubar).sum()
        val += self._prior_term(roots, self.mubar[roots]).sum()
        val += binary_entropy(self.mubar[self.hidden]).sum()
        return float(val)

    def _nonentropy(self, j, cand):
        v = self.kernel.local(j, cand, self.mubar, self.children[j])
        if self.is_root[j]:
            v = v + self._prior_term(j, cand)
        return v

    def _local(self, j, cand):
        cand = np.atleast_1d(np.asarray(cand, dtype=float))
        return self._nonentropy(j, cand) + binary_entropy(cand)

    def update(self, j) -> float:
        """Coordinate step on ``mu_j``; returns the (non-negative) gain."""
        mu = self.mubar[j]
        if self.kernel.multilinear:
            v = self._nonentropy(j, np.array([0.0, 1.0]))
            slope = v[1] - v[0]
        else:
            h = 1e-6
            lo, hi = max(mu - h, 0.0), min(mu + h, 1.0)
            v = self._nonentropy(j, np.array([lo, hi]))
            slope = (v[1] - v[0]) / (hi - lo)
        cand = float(np.clip(expit(slope), MU_FLOOR, 1.0 - MU_FLOOR))
        cur, val = self._local(j, [mu, cand])
        if not val >= cur:
            # damp in the logit domain, then fall back to a bracketed search
            t_mu, t_c = logit(np.clip(mu, MU_FLOOR, 1 - MU_FLOOR)), logit(cand)
            for _ in range(8):
                t_c = 0.5 * (t_mu + t_c)
                val = self._local(j, expit(t_c))[0]
                if val >= cur:
                    cand = float(expit(t_c))
                    break
            else:
                r = minimize_scalar(
                    lambda m: -self._local(j, m)[0],
                    bounds=(MU_FLOOR, 1.0 - MU_FLOOR),
                    method="bounded",
                    options={"xatol": 1e-10},
                )
                cand, val = float(r.x), -float(r.fun)
        if not val > cur or cand == mu:
            return 0.0
        self.mubar[j] = cand
        self.kernel.commit(j, mu, cand, self.mubar, self.children[j])
        return float(val - cur)


def lb_optimize(net: Network, ev: Evidence, opts: Optional[LowerBoundOptions] = None) -> LowerBoundResult:
    """Coordinate ascent on the mean-field means."""
    opts = opts or LowerBoundOptions()
    mf = _MeanField(net, ev, opts)
    mf.kernel.begin_sweep(mf.mubar)
    prev = mf.total()
    trace = [(0, prev)] if opts.trace else []
    converged = False
    sweep = 0
    for sweep in range(1, opts.max_sweeps + 1):
        mf.kernel.begin_sweep(mf.mubar)
        for j in mf.free:
            mf.update(j)
        mf.kernel.begin_sweep(mf.mubar)
        now = mf.total()
        if now < prev - 1e-12 * max(1.0, abs(prev)):
            raise AssertionError(f"lower bound decreased in sweep {sweep}: {prev} -> {now}")
        if opts.trace:
            trace.append((sweep, now))
        change = abs(now - prev)
        prev = now
        if change <= opts.tol * max(abs(now), 1e-300):
            converged = True
            break
    return LowerBoundResult(prev, sweep, converged, mf.mubar[mf.hidden].copy(), trace)


lower_bound = lb_optimize


def _eval(net, ev, mu, opts, curvature=True) -> float:
    mf = _MeanField(net, ev, opts, mu=mu, curvature=curvature)
    mf.kernel.begin_sweep(mf.mubar)
    return mf.total()


def lb_sigmoid_eval(net: Network, ev: Evidence, mu, opts: Optional[LowerBoundOptions] = None) -> float:
    """Bound at fixed ``mu`` (aligned with the unassigned nodes).

    In ``aux`` mode the auxiliary parameters are set to their optimum for
    this ``mu``.
    """
    if net.kind is not NetworkKind.SIGMOID:
        raise ValueError("lb_sigmoid_eval needs a sigmoid network")
    return _eval(net, ev, mu, opts or LowerBoundOptions())


def lb_noisy_or_eval_simple(net: Network, ev: Evidence, mu, n_terms: int = DEFAULT_EXPANSION_TERMS) -> float:
    if net.kind is not NetworkKind.NOISY_OR:
        raise ValueError("lb_noisy_or_eval_simple needs a noisy-OR network")
    return _eval(net, ev, mu, LowerBoundOptions(expansion_terms=n_terms))


def lb_noisy_or_eval_quadratic(
    net: Network, ev: Evidence, mu, n_terms: int = DEFAULT_EXPANSION_TERMS, curvature: bool = True
) -> float:
    """Quadratic-corrected bound; ``curvature=False`` zeroes every ``a_ik``."""
    if net.kind is not NetworkKind.NOISY_OR:
        raise ValueError("lb_noisy_or_eval_quadratic needs a noisy-OR network")
    opts = LowerBoundOptions(expansion_terms=n_terms, use_quadratic=True)
    return _eval(net, ev, mu, opts, curvature=curvature)


def write_trace_csv(result: LowerBoundResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["sweep", "log_bound"])
        for sweep, value in result.trace:
            out.writerow([sweep, repr(float(value))])
