"""Exact inference by enumeration, for validating the bounds on small nets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
from scipy.special import logsumexp, xlogy

from .network import (
    NEG_INF,
    Evidence,
    Network,
    check_evidence,
    hidden_nodes,
    joint_log_prob,
    prob_on,
)

DEFAULT_CAP = 25
_CHUNK = 1 << 15


class EnumerationTooLarge(RuntimeError):
    """The requested enumeration exceeds the configured cap."""


@dataclass(frozen=True)
class MarginalResult:
    log_marginal: float
    enumerated_states: int


def _bits(start: int, stop: int, width: int) -> np.ndarray:
    idx = np.arange(start, stop, dtype=np.int64)
    return ((idx[:, None] >> np.arange(width)) & 1).astype(np.int8)


def _completions(net: Network, ev: Evidence, cap: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(hidden_bits, full_states)`` chunks over all completions of ``ev``."""
    ev = check_evidence(net, ev)
    hidden = hidden_nodes(net, ev)
    h = len(hidden)
    if h > cap:
        raise EnumerationTooLarge(f"{h} unassigned nodes exceeds enumeration cap {cap}")
    base = np.zeros(net.n, dtype=np.int8)
    for k, v in ev.items():
        base[k] = v
    total = 1 << h
    for start in range(0, total, _CHUNK):
        bits = _bits(start, min(total, start + _CHUNK), h)
        states = np.broadcast_to(base, (bits.shape[0], net.n)).copy()
        states[:, hidden] = bits
        yield bits, states


def exact_log_marginal(net: Network, ev: Evidence, cap: int = DEFAULT_CAP) -> MarginalResult:
    """``log P(ev)`` summed over every completion of the unassigned nodes."""
    acc = NEG_INF
    count = 0
    for _, states in _completions(net, ev, cap):
        acc = float(np.logaddexp(acc, logsumexp(joint_log_prob(net, states))))
        count += states.shape[0]
    return MarginalResult(acc, count)


def posterior_marginals(net: Network, ev: Evidence, cap: int = DEFAULT_CAP) -> np.ndarray:
    """``P(S_j = 1 | ev)`` for each unassigned node, in index order."""
    chunks = [(bits, joint_log_prob(net, states)) for bits, states in _completions(net, ev, cap)]
    logz = logsumexp(np.concatenate([lp for _, lp in chunks]))
    if logz == NEG_INF:
        raise ValueError("evidence has probability zero")
    out = np.zeros(chunks[0][0].shape[1])
    for bits, lp in chunks:
        out += np.exp(lp - logz) @ bits
    return np.clip(out, 0.0, 1.0)


def kl_q_to_posterior(mu: np.ndarray, net: Network, ev: Evidence, cap: int = DEFAULT_CAP) -> float:
    """``KL(Q || P(. | ev))`` for the factorized ``Q`` with means ``mu``.

    ``mu`` is aligned with the unassigned nodes in index order.  Returns
    ``inf`` if ``Q`` puts mass on a configuration the posterior rules out.
    """
    mu = np.asarray(mu, dtype=float)
    chunks = []
    for bits, states in _completions(net, ev, cap):
        if bits.shape[1] != mu.shape[0]:
            raise ValueError(f"mu has {mu.shape[0]} entries, expected {bits.shape[1]}")
        logq = (xlogy(bits, mu) + xlogy(1 - bits, 1.0 - mu)).sum(axis=1)
        chunks.append((logq, joint_log_prob(net, states)))
    logz = logsumexp(np.concatenate([lp for _, lp in chunks]))
    if logz == NEG_INF:
        raise ValueError("evidence has probability zero")
    kl = 0.0
    for logq, lp in chunks:
        q = np.exp(logq)
        live = q > 0
        if np.any(lp[live] == NEG_INF):
            return float("inf")
        kl += float(np.sum(q[live] * (logq[live] - (lp[live] - logz))))
    return max(kl, 0.0)


def sigma_std(
    net: Network,
    ev: Optional[Evidence] = None,
    mode: str = "exact",
    samples: int = 100_000,
    rng: Optional[np.random.Generator] = None,
    cap: int = DEFAULT_CAP,
) -> float:
    """Largest standard deviation of any L1 conditional likelihood.

    The variance is taken under the network's prior over L2.  Fixing ``S_i``
    to 0 or 1 gives the same variance, so ``ev`` only matters for
    validation.
    """
    l1, l2, W, p = net.bipartite_view()
    if ev is not None:
        check_evidence(net, ev)
    if mode == "exact":
        fan_in = int(net.edges[l1].sum(axis=1).max()) if len(l1) else 0
        if fan_in > cap:
            raise EnumerationTooLarge(f"fan-in {fan_in} exceeds cap {cap}")
        best = 0.0
        for a, i in enumerate(l1):
            pa = np.flatnonzero(net.edges[i][l2])
            if len(pa) == 0:
                continue
            bits = _bits(0, 1 << len(pa), len(pa))
            pp = p[pa]
            logw = (xlogy(bits, pp) + xlogy(1 - bits, 1.0 - pp)).sum(axis=1)
            w = np.exp(logw)
            v = prob_on(net, bits @ W[a, pa])
            if np.ptp(v) == 0.0:
                continue
            mean = w @ v
            var = w @ (v - mean) ** 2
            best = max(best, float(np.sqrt(max(var, 0.0))))
        return best
    if mode == "monte_carlo":
        if rng is None:
            raise ValueError("monte_carlo mode needs an rng")
        # L2 nodes are independent roots, so only they need sampling
        roots = (rng.random((samples, len(l2))) < p).astype(float)
        v = prob_on(net, roots @ W.T)
        return float(np.sqrt(v.var(axis=0)).max()) if len(l1) else 0.0
    raise ValueError(f"unknown sigma_std mode {mode!r}")
