"""Transition matrices viewed as weighted directed networks.

Self-loops stay in the model and in random walks but are left out of
strength centralities and of dyad/clique mining.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import DataError, NumericalError
from .markov import TransitionModel
from .sequences import Alphabet


@dataclass(frozen=True, eq=False)
class TransitionNetwork:
    """Read-only graph view of a model: edge (i, j) exists iff matrix[i, j] > 0."""

    model: TransitionModel

    @property
    def alphabet(self) -> Alphabet:
        return self.model.alphabet

    @property
    def labels(self) -> tuple[str, ...]:
        return self.model.alphabet.labels

    @property
    def weights(self) -> np.ndarray:
        return self.model.matrix

    @property
    def n_nodes(self) -> int:
        return len(self.model.alphabet)

    def edges(self, include_loops: bool = True) -> list[tuple[int, int, float]]:
        W = self.weights
        return [
            (int(i), int(j), float(W[i, j]))
            for i, j in zip(*np.nonzero(W > 0))
            if include_loops or i != j
        ]


def as_network(obj) -> TransitionNetwork:
    return obj if isinstance(obj, TransitionNetwork) else TransitionNetwork(obj)


def _by_label(net: TransitionNetwork, values: np.ndarray) -> dict[str, float]:
    return {lab: float(v) for lab, v in zip(net.labels, values)}


def in_strength(net) -> dict[str, float]:
    """Column sums excluding the diagonal."""
    net = as_network(net)
    W = net.weights
    return _by_label(net, W.sum(axis=0) - np.diag(W))


def out_strength(net) -> dict[str, float]:
    """Row sums excluding the diagonal (1 - p_ii for observed stochastic rows)."""
    net = as_network(net)
    W = net.weights
    return _by_label(net, W.sum(axis=1) - np.diag(W))


def _reaches(W: np.ndarray, target: int) -> np.ndarray:
    """Boolean mask of nodes with a directed path to ``target``."""
    adj_rev = (W > 0).T
    seen = np.zeros(W.shape[0], dtype=bool)
    seen[target] = True
    stack = [target]
    while stack:
        v = stack.pop()
        for u in np.flatnonzero(adj_rev[v] & ~seen):
            seen[u] = True
            stack.append(u)
    return seen


@dataclass(frozen=True)
class Betweenness:
    raw: dict[str, float]
    normalized: dict[str, float]
    n_pairs: int


def betweenness_rw(net, cond_limit: float = 1e12) -> Betweenness:
    """Random-walk betweenness from absorbing-chain expected visit counts.

    For each target t the walk is absorbed at t; N = (I - Q)^-1 over the
    states that can reach t gives expected visits N[s, v]. Node v collects
    N[s, v] over all ordered pairs (s, t) with s != t, v not in {s, t}, and
    t reachable from s. Probability mass that leaves for states unable to
    reach t is dropped (those walks stop contributing).
    """
    net = as_network(net)
    if net.model.scaling != "stochastic":
        raise DataError("random-walk betweenness needs a stochastic model")
    P = np.asarray(net.weights, dtype=float)
    n = P.shape[0]
    total = np.zeros(n)
    pairs = 0
    for t in range(n):
        reach = _reaches(P, t)
        reach[t] = False
        idx = np.flatnonzero(reach)
        if idx.size == 0:
            continue
        Q = P[np.ix_(idx, idx)]
        A = np.eye(idx.size) - Q
        if np.linalg.cond(A) > cond_limit:
            raise NumericalError(
                f"I - Q is singular for target {net.labels[t]!r}: a closed class excludes it"
            )
        N = np.linalg.solve(A, np.eye(idx.size))
        pairs += idx.size
        # N[s, s] counts the start itself and v == s is excluded, so drop the diagonal
        visits = N.sum(axis=0) - np.diag(N)
        total[idx] += visits
    norm = total / pairs if pairs else total.copy()
    return Betweenness(_by_label(net, total), _by_label(net, norm), pairs)


@dataclass(frozen=True)
class DyadPattern:
    a: str
    b: str
    w_ab: float
    w_ba: float
    threshold: float


@dataclass(frozen=True)
class CliquePattern:
    nodes: tuple[str, ...]
    weights: dict[tuple[str, str], float] = field(compare=False)
    threshold: float

    @property
    def min_weight(self) -> float:
        return min(self.weights.values())


def mutual_graph(W: np.ndarray, threshold: float) -> np.ndarray:
    """Undirected adjacency of pairs with both directions >= threshold."""
    M = (W >= threshold) & (W.T >= threshold)
    np.fill_diagonal(M, False)
    return M


def find_dyads(net, threshold: float = 0.1) -> list[DyadPattern]:
    """Mutual pairs with both weights >= threshold, strongest (by min) first."""
    net = as_network(net)
    W = net.weights
    M = mutual_graph(W, threshold)
    labs = net.labels
    dyads = [
        DyadPattern(labs[i], labs[j], float(W[i, j]), float(W[j, i]), threshold)
        for i, j in zip(*np.nonzero(np.triu(M)))
    ]
    order = {lab: i for i, lab in enumerate(labs)}
    dyads.sort(key=lambda d: (-min(d.w_ab, d.w_ba), order[d.a], order[d.b]))
    return dyads


def _extend(M: np.ndarray, clique: list[int], candidates: list[int], size: int, out: list):
    if len(clique) == size:
        out.append(tuple(clique))
        return
    for k, v in enumerate(candidates):
        _extend(M, clique + [v], [u for u in candidates[k + 1:] if M[v, u]], size, out)


def find_cliques(net, size: int = 3, threshold: float = 0.05) -> list[CliquePattern]:
    """Node subsets of ``size`` whose every ordered pair has weight >= threshold."""
    if size < 2:
        raise DataError("clique size must be at least 2")
    net = as_network(net)
    W = net.weights
    M = mutual_graph(W, threshold)
    found: list[tuple[int, ...]] = []
    _extend(M, [], list(range(W.shape[0])), size, found)
    labs = net.labels
    out = []
    for members in found:
        weights = {(labs[i], labs[j]): float(W[i, j]) for i in members for j in members if i != j}
        out.append(CliquePattern(tuple(labs[i] for i in members), weights, threshold))
    out.sort(key=lambda c: -c.min_weight)
    return out


def brute_force_cliques(W: np.ndarray, size: int, threshold: float) -> set[tuple[int, ...]]:
    """Exhaustive enumeration over all subsets; slow, used as a cross-check."""
    n = W.shape[0]
    return {
        c for c in combinations(range(n), size)
        if all(W[i, j] >= threshold for i in c for j in c if i != j)
    }


@dataclass(frozen=True, eq=False)
class SubtractionNetwork:
    alphabet: Alphabet
    delta: np.ndarray
    groups: tuple[str, str]

    def to_dict(self) -> dict:
        return {
            "labels": list(self.alphabet.labels),
            "groups": list(self.groups),
            "delta": [[float(x) for x in row] for row in self.delta],
        }


def subtract(net_a, net_b, labels: tuple[str, str] = ("A", "B")) -> SubtractionNetwork:
    """Elementwise A - B; positive entries favour group A."""
    net_a, net_b = as_network(net_a), as_network(net_b)
    if net_a.labels != net_b.labels:
        diff = sorted(set(net_a.labels) ^ set(net_b.labels))
        if diff:
            raise DataError(f"alphabets differ in labels: {', '.join(diff)}")
        raise DataError("alphabets hold the same labels in a different order")
    if net_a.model.scaling != net_b.model.scaling:
        raise DataError(
            f"cannot subtract {net_a.model.scaling} from {net_b.model.scaling} networks"
        )
    return SubtractionNetwork(net_a.alphabet, net_a.weights - net_b.weights, tuple(labels))
