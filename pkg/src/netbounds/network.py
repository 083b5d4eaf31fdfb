"""Binary belief networks with sigmoid or noisy-OR conditionals.

A :class:`Network` stores a dense weight matrix ``theta[child, parent]``
together with an edge mask, so that vectorized evaluation over many joint
states is a single matrix product.  Noisy-OR weights are kept in nats,
``theta = -log(1 - q)``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .transforms import log1mexp, log_sigmoid, sigmoid

#: Log-probability of an impossible event.  Kept as an explicit constant so
#: that callers can test for it instead of relying on ``log(0)`` warnings.
NEG_INF = -math.inf


class NetworkError(ValueError):
    """Raised for structurally invalid networks or network files."""


class NetworkKind(enum.Enum):
    SIGMOID = "sigmoid"
    NOISY_OR = "noisy_or"


Evidence = Mapping[int, int]


@dataclass(frozen=True, eq=False)
class Network:
    """Immutable DAG over ``n`` binary nodes.

    Parameters
    ----------
    kind : NetworkKind
    theta : (n, n) array
        ``theta[i, j]`` is the weight of edge ``j -> i``; zero where there
        is no edge.
    edges : (n, n) bool array
        Edge mask with the same orientation as ``theta``.
    priors : (n,) array
        ``P(S_j = 1)`` for root nodes, ``nan`` for nodes with parents.
    layers : optional pair of index arrays ``(l1, l2)``
        Bipartite declaration; every edge goes from ``l2`` to ``l1``.
    """

    kind: NetworkKind
    theta: np.ndarray
    edges: np.ndarray
    priors: np.ndarray
    layers: Optional[tuple[np.ndarray, np.ndarray]] = None
    order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float)
        edges = np.array(self.edges, dtype=bool)
        priors = np.array(self.priors, dtype=float)
        n = priors.shape[0]
        if theta.shape != (n, n) or edges.shape != (n, n):
            raise NetworkError(f"theta and edges must have shape ({n}, {n})")
        theta = np.where(edges, theta, 0.0)
        for arr in (theta, edges, priors):
            arr.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "priors", priors)
        if self.layers is not None:
            l1, l2 = (np.array(sorted(x), dtype=int) for x in self.layers)
            l1.setflags(write=False)
            l2.setflags(write=False)
            object.__setattr__(self, "layers", (l1, l2))
        self._validate()
        object.__setattr__(self, "order", _topological_order(edges))

    # -- construction -----------------------------------------------------

    @classmethod
    def from_edges(
        cls,
        kind: NetworkKind | str,
        n: int,
        edges: Sequence[tuple[int, int, float]],
        priors: Mapping[int, float],
        layers: Optional[tuple[Sequence[int], Sequence[int]]] = None,
    ) -> "Network":
        """Build a network from ``(child, parent, theta)`` triples."""
        kind = NetworkKind(kind)
        theta = np.zeros((n, n))
        mask = np.zeros((n, n), dtype=bool)
        for child, parent, w in edges:
            _check_index(child, n)
            _check_index(parent, n)
            if mask[child, parent]:
                raise NetworkError(f"duplicate edge {parent} -> {child}")
            mask[child, parent] = True
            theta[child, parent] = w
        p = np.full(n, np.nan)
        for node, value in priors.items():
            _check_index(node, n)
            p[node] = value
        return cls(kind, theta, mask, p, layers)

    @classmethod
    def bipartite(
        cls,
        kind: NetworkKind | str,
        weights: np.ndarray,
        priors: np.ndarray | float = 0.5,
    ) -> "Network":
        """Complete two-layer net from an ``(n1, n2)`` weight matrix.

        Parent (L2) nodes get indices ``0..n2-1`` and child (L1) nodes
        ``n2..n2+n1-1``.
        """
        weights = np.asarray(weights, dtype=float)
        n1, n2 = weights.shape
        n = n1 + n2
        theta = np.zeros((n, n))
        theta[n2:, :n2] = weights
        mask = np.zeros((n, n), dtype=bool)
        mask[n2:, :n2] = True
        p = np.full(n, np.nan)
        p[:n2] = priors
        l1 = np.arange(n2, n)
        l2 = np.arange(n2)
        return cls(NetworkKind(kind), theta, mask, p, (l1, l2))

    # -- structure --------------------------------------------------------

    @property
    def n(self) -> int:
        return self.priors.shape[0]

    @property
    def roots(self) -> np.ndarray:
        return np.flatnonzero(~self.edges.any(axis=1))

    @property
    def is_bipartite(self) -> bool:
        return self.layers is not None

    def parents(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.edges[i])

    def children(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.edges[:, j])

    def bipartite_view(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(l1, l2, W, p)`` with ``W[a, b] = theta[l1[a], l2[b]]``."""
        if self.layers is None:
            raise NetworkError("network has no bipartite layer declaration")
        l1, l2 = self.layers
        return l1, l2, self.theta[np.ix_(l1, l2)], self.priors[l2]

    def with_leak(self, theta_leak: float | np.ndarray) -> "Network":
        """Add an always-on root parent to every non-root node.

        The new node gets index ``n`` and prior 1; for bipartite networks it
        joins L2.
        """
        n = self.n
        nonroots = self.edges.any(axis=1)
        theta = np.zeros((n + 1, n + 1))
        theta[:n, :n] = self.theta
        mask = np.zeros((n + 1, n + 1), dtype=bool)
        mask[:n, :n] = self.edges
        mask[:n, n] = nonroots
        theta[:n, n] = np.where(nonroots, theta_leak, 0.0)
        p = np.append(self.priors, 1.0)
        layers = None
        if self.layers is not None:
            layers = (self.layers[0], np.append(self.layers[1], n))
        return Network(self.kind, theta, mask, p, layers)

    # -- validation -------------------------------------------------------

    def _validate(self):
        n = self.n
        if np.any(np.diag(self.edges)):
            i = int(np.flatnonzero(np.diag(self.edges))[0])
            raise NetworkError(f"self-loop on node {i}")
        if not np.all(np.isfinite(self.theta)):
            c, p = np.argwhere(~np.isfinite(self.theta))[0]
            raise NetworkError(f"edge {p} -> {c}: weight must be finite")
        if self.kind is NetworkKind.NOISY_OR and np.any(self.theta < 0):
            c, p = np.argwhere(self.theta < 0)[0]
            raise NetworkError(
                f"edge {p} -> {c}: noisy-OR weight {float(self.theta[c, p])!r} is negative"
            )
        has_parents = self.edges.any(axis=1)
        for i in range(n):
            if has_parents[i] and not np.isnan(self.priors[i]):
                raise NetworkError(f"node {i} has parents but also a root prior")
            if not has_parents[i]:
                p = self.priors[i]
                if np.isnan(p):
                    raise NetworkError(f"root node {i} has no prior")
                if not 0.0 <= p <= 1.0:
                    raise NetworkError(f"root node {i}: prior {float(p)!r} outside [0, 1]")
        if self.layers is not None:
            l1, l2 = self.layers
            s1, s2 = set(l1.tolist()), set(l2.tolist())
            if s1 & s2:
                raise NetworkError(f"nodes {sorted(s1 & s2)} are in both layers")
            if s1 | s2 != set(range(n)) or len(l1) + len(l2) != n:
                raise NetworkError("layers must partition all nodes")
            for c, p in np.argwhere(self.edges):
                if not (c in s1 and p in s2):
                    raise NetworkError(f"edge {p} -> {c} does not go from L2 to L1")
            for j in l2:
                if has_parents[j]:
                    raise NetworkError(f"L2 node {j} is not a root")


def _check_index(i: int, n: int):
    if not 0 <= i < n:
        raise NetworkError(f"node index {i} out of range 0..{n - 1}")


def _topological_order(edges: np.ndarray) -> np.ndarray:
    n = edges.shape[0]
    indeg = edges.sum(axis=1).astype(int)
    ready = [i for i in range(n) if indeg[i] == 0]
    order = []
    while ready:
        j = ready.pop(0)
        order.append(j)
        for c in np.flatnonzero(edges[:, j]):
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(int(c))
    if len(order) != n:
        stuck = sorted(set(range(n)) - set(order))
        raise NetworkError(f"cycle detected among nodes {stuck}")
    out = np.array(order, dtype=int)
    out.setflags(write=False)
    return out


# -- probabilities --------------------------------------------------------


def prob_on(net: Network, activation: np.ndarray) -> np.ndarray:
    """``P(S_i = 1 | pa)`` of a non-root node as a function of its activation."""
    if net.kind is NetworkKind.SIGMOID:
        return sigmoid(activation)
    return -np.expm1(-np.asarray(activation, dtype=float))


def cond_log_probs(net: Network, states: np.ndarray) -> np.ndarray:
    """Per-node conditional log-probabilities for a batch of full states.

    ``states`` has shape ``(m, n)``; the result has the same shape.  Entries
    that are impossible are exactly :data:`NEG_INF`.
    """
    s = np.atleast_2d(np.asarray(states, dtype=float))
    if s.shape[1] != net.n:
        raise ValueError(f"state length {s.shape[1]} != node count {net.n}")
    z = s @ net.theta.T
    out = np.empty_like(s)
    roots = ~net.edges.any(axis=1)
    nonroot = ~roots
    if net.kind is NetworkKind.SIGMOID:
        out[:, nonroot] = log_sigmoid((2.0 * s[:, nonroot] - 1.0) * z[:, nonroot])
    else:
        zz = z[:, nonroot]
        on = s[:, nonroot] == 1
        vals = np.where(on, NEG_INF, -zz)
        pos = on & (zz > 0)
        vals[pos] = log1mexp(zz[pos])
        out[:, nonroot] = vals
    p = net.priors[roots]
    sr = s[:, roots]
    with np.errstate(divide="ignore"):
        out[:, roots] = np.where(sr == 1, np.log(p), np.log1p(-p))
    return out


def cond_log_prob(net: Network, i: int, state: Sequence[int]) -> float:
    """``log P(S_i | pa[i])`` evaluated at a full state."""
    _check_index(i, net.n)
    return float(cond_log_probs(net, np.asarray(state)[None, :])[0, i])


def joint_log_prob(net: Network, state: Sequence[int] | np.ndarray) -> float | np.ndarray:
    """Joint log-probability of one full state, or of each row of a batch."""
    s = np.asarray(state)
    vals = cond_log_probs(net, s).sum(axis=1)
    return float(vals[0]) if s.ndim == 1 else vals


def ancestral_sample(net: Network, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    """Draw full states node by node in topological order."""
    m = 1 if size is None else size
    s = np.zeros((m, net.n), dtype=np.int8)
    for i in net.order:
        if net.edges[i].any():
            p = prob_on(net, s @ net.theta[i])
        else:
            p = np.full(m, net.priors[i])
        s[:, i] = rng.random(m) < p
    return s[0] if size is None else s


# -- evidence helpers -----------------------------------------------------


def check_evidence(net: Network, ev: Evidence) -> dict[int, int]:
    out = {}
    for k, v in ev.items():
        k = int(k)
        _check_index(k, net.n)
        if v not in (0, 1):
            raise ValueError(f"evidence for node {k} must be 0 or 1, got {v!r}")
        out[k] = int(v)
    return out


def hidden_nodes(net: Network, ev: Evidence) -> np.ndarray:
    """Sorted indices of the nodes not assigned by ``ev``."""
    assigned = np.zeros(net.n, dtype=bool)
    assigned[list(ev.keys())] = True
    return np.flatnonzero(~assigned)


def layer_evidence(net: Network, bits: Sequence[int]) -> dict[int, int]:
    """Evidence assigning ``bits`` to the L1 nodes in index order."""
    l1 = net.layers[0] if net.layers is not None else np.flatnonzero(net.edges.any(axis=1))
    if len(bits) != len(l1):
        raise ValueError(f"expected {len(l1)} bits, got {len(bits)}")
    return {int(i): int(b) for i, b in zip(l1, bits)}


# -- file format ----------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def dumps_network(net: Network) -> str:
    lines = ["{", f'  "kind": "{net.kind.value}",', f'  "n": {net.n},']
    if net.layers is not None:
        l1, l2 = net.layers
        lines.append(f'  "layers": {{"l1": {l1.tolist()}, "l2": {l2.tolist()}}},')
    priors = [
        f'    {{"node": {int(j)}, "p": {_fmt(net.priors[j])}}}' for j in net.roots
    ]
    lines.append('  "priors": [\n' + ",\n".join(priors) + "\n  ],")
    edges = [
        f'    {{"child": {int(c)}, "parent": {int(p)}, "theta": {_fmt(net.theta[c, p])}}}'
        for c, p in np.argwhere(net.edges)
    ]
    lines.append('  "edges": [\n' + ",\n".join(edges) + "\n  ]")
    lines.append("}")
    return "\n".join(lines) + "\n"


def save_network(net: Network, path: str | Path) -> None:
    Path(path).write_text(dumps_network(net))


def network_from_dict(doc: dict) -> Network:
    try:
        kind = NetworkKind(doc["kind"])
    except (KeyError, ValueError):
        raise NetworkError(f"'kind' must be one of sigmoid, noisy_or (got {doc.get('kind')!r})")
    n = doc.get("n")
    if not isinstance(n, int) or n < 1:
        raise NetworkError(f"'n' must be a positive integer (got {n!r})")
    edges = []
    for k, e in enumerate(doc.get("edges", [])):
        try:
            child, parent = int(e["child"]), int(e["parent"])
        except (KeyError, TypeError, ValueError):
            raise NetworkError(f"edge #{k}: needs integer 'child' and 'parent'")
        has_t, has_q = "theta" in e, "q" in e
        if has_t == has_q:
            raise NetworkError(f"edge {parent} -> {child}: give exactly one of theta, q")
        if has_q:
            q = float(e["q"])
            if kind is not NetworkKind.NOISY_OR:
                raise NetworkError(f"edge {parent} -> {child}: 'q' only valid for noisy_or")
            if not 0.0 <= q < 1.0:
                raise NetworkError(f"edge {parent} -> {child}: q = {q!r} must lie in [0, 1)")
            w = -math.log1p(-q)
        else:
            w = float(e["theta"])
        edges.append((child, parent, w))
    priors = {}
    for k, rec in enumerate(doc.get("priors", [])):
        try:
            priors[int(rec["node"])] = float(rec["p"])
        except (KeyError, TypeError, ValueError):
            raise NetworkError(f"prior #{k}: needs integer 'node' and real 'p'")
    layers = None
    if "layers" in doc and doc["layers"] is not None:
        try:
            layers = (list(doc["layers"]["l1"]), list(doc["layers"]["l2"]))
        except (KeyError, TypeError):
            raise NetworkError("'layers' must be an object with 'l1' and 'l2' lists")
    elif edges and all(0 <= i < n for c, p, _ in edges for i in (c, p)):
        # no child is also a parent: a two-layer net with every childless node in L2
        children = {c for c, _, _ in edges}
        if not children & {p for _, p, _ in edges}:
            layers = (sorted(children), [j for j in range(n) if j not in children])
    return Network.from_edges(kind, n, edges, priors, layers)


def load_network(path: str | Path) -> Network:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise NetworkError(f"malformed JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise NetworkError("top-level JSON value must be an object")
    return network_from_dict(doc)
