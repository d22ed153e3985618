"""Resampling and null-model validation of transition networks.

Resampling always works on whole sequences, so dependence inside a
sequence is preserved.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import spearmanr

from .errors import ConfigError, DataError
from .graph import as_network, betweenness_rw, in_strength, out_strength
from .markov import TransitionModel, estimate, row_normalize, sequence_counts, tally
from .sequences import Alphabet, StateSequence


def _transition_stack(sequences, alphabet) -> np.ndarray:
    _, trans = sequence_counts(sequences, len(alphabet))
    return trans.reshape(len(sequences), -1)


@dataclass(frozen=True)
class EdgeStat:
    source: str
    target: str
    weight: float
    mean: float
    sd: float
    ci_low: float
    ci_high: float
    p_value: float
    retained: bool


@dataclass(frozen=True, eq=False)
class EdgeBootstrapResult:
    alphabet: Alphabet
    edges: list[EdgeStat]
    observed: np.ndarray
    retained_matrix: np.ndarray
    dropped_matrix: np.ndarray
    B: int
    threshold: float
    alpha: float
    rule: str
    seed: object

    def retained(self) -> list[EdgeStat]:
        return [e for e in self.edges if e.retained]

    def dropped(self) -> list[EdgeStat]:
        return [e for e in self.edges if not e.retained]


def bootstrap_edges(sequences: Sequence[StateSequence], alphabet: Alphabet, B: int = 1000,
                    threshold: float = 0.05, alpha: float = 0.05, seed=None,
                    rule: str = "threshold-p", ci_level: float = 0.95) -> EdgeBootstrapResult:
    """Sequence-level bootstrap of the stochastic transition matrix.

    For every observed edge: percentile CI, and p = share of replicates
    whose weight falls below ``threshold``. Under the default
    ``threshold-p`` rule an edge is kept iff p <= alpha; the ``ci`` rule
    keeps it iff the lower CI bound is >= threshold.
    """
    n = len(sequences)
    if n < 2:
        raise DataError("bootstrap needs at least two sequences")
    if B < 100:
        raise ConfigError(f"B={B} is too small; use at least 100 replicates")
    if alpha < 1.0 / B:
        raise ConfigError(f"alpha={alpha} is finer than the 1/B={1.0 / B:g} resolution")
    if rule not in ("threshold-p", "ci"):
        raise ConfigError(f"unknown retention rule {rule!r}")
    S = len(alphabet)
    T = _transition_stack(sequences, alphabet)
    observed = row_normalize(T.sum(axis=0).reshape(S, S))

    rng = np.random.default_rng(seed)
    reps = np.empty((B, S * S))
    for b in range(B):
        w = np.bincount(rng.integers(n, size=n), minlength=n).astype(float)
        reps[b] = row_normalize((w @ T).reshape(S, S)).ravel()

    lo_q, hi_q = (1 - ci_level) / 2, 1 - (1 - ci_level) / 2
    ci_lo = np.quantile(reps, lo_q, axis=0)
    ci_hi = np.quantile(reps, hi_q, axis=0)
    p_val = (reps < threshold).mean(axis=0)
    mean = reps.mean(axis=0)
    sd = reps.std(axis=0, ddof=1)

    labs = alphabet.labels
    edges = []
    keep = np.zeros(S * S, dtype=bool)
    for i, j in zip(*np.nonzero(observed > 0)):
        c = i * S + j
        if rule == "threshold-p":
            kept = bool(p_val[c] <= alpha)
        else:
            kept = bool(ci_lo[c] >= threshold)
        keep[c] = kept
        edges.append(EdgeStat(labs[i], labs[j], float(observed[i, j]), float(mean[c]), float(sd[c]),
                              float(ci_lo[c]), float(ci_hi[c]), float(p_val[c]), kept))
    keep = keep.reshape(S, S)
    return EdgeBootstrapResult(
        alphabet, edges, observed, np.where(keep, observed, 0.0),
        np.where(~keep & (observed > 0), observed, 0.0), B, threshold, alpha, rule, seed,
    )


@dataclass(frozen=True)
class PermutationEdge:
    source: str
    target: str
    weight_a: float
    weight_b: float
    difference: float
    p_value: float


@dataclass(frozen=True, eq=False)
class PermutationResult:
    alphabet: Alphabet
    edges: list[PermutationEdge]
    difference: np.ndarray
    p_values: np.ndarray
    n_perm: int
    seed: object


def permutation_compare(sequences_a: Sequence[StateSequence], sequences_b: Sequence[StateSequence],
                        alphabet: Alphabet, n_perm: int = 1000, seed=None,
                        chunk: int = 256) -> PermutationResult:
    """Per-edge permutation test of the difference between two groups.

    Group labels are shuffled across sequences with group sizes kept; the
    two-sided p-value is (1 + #{|perm| >= |obs|}) / (n_perm + 1).
    """
    if not sequences_a or not sequences_b:
        raise DataError("both groups need at least one sequence")
    if n_perm < 1:
        raise ConfigError("n_perm must be positive")
    S = len(alphabet)
    T = np.vstack([_transition_stack(sequences_a, alphabet), _transition_stack(sequences_b, alphabet)])
    na, n = len(sequences_a), T.shape[0]
    total = T.sum(axis=0)
    count_a = T[:na].sum(axis=0)
    obs = row_normalize(count_a.reshape(S, S)) - row_normalize((total - count_a).reshape(S, S))
    abs_obs = np.abs(obs).ravel()

    rng = np.random.default_rng(seed)
    exceed = np.zeros(S * S)
    done = 0
    while done < n_perm:
        m = min(chunk, n_perm - done)
        mask = np.zeros((m, n))
        for r in range(m):
            mask[r, rng.permutation(n)[:na]] = 1.0
        ca = (mask @ T).reshape(m, S, S)
        cb = total.reshape(1, S, S) - ca
        diff = np.abs(row_normalize(ca) - row_normalize(cb)).reshape(m, -1)
        exceed += (diff >= abs_obs - 1e-12).sum(axis=0)
        done += m
    p = ((1 + exceed) / (n_perm + 1)).reshape(S, S)

    wa = row_normalize(count_a.reshape(S, S))
    wb = row_normalize((total - count_a).reshape(S, S))
    labs = alphabet.labels
    edges = [
        PermutationEdge(labs[i], labs[j], float(wa[i, j]), float(wb[i, j]), float(obs[i, j]), float(p[i, j]))
        for i in range(S) for j in range(S)
        if wa[i, j] > 0 or wb[i, j] > 0
    ]
    return PermutationResult(alphabet, edges, obs, p, n_perm, seed)


@dataclass(frozen=True, eq=False)
class DisparityResult:
    alphabet: Alphabet
    alpha_out: np.ndarray
    alpha_in: np.ndarray
    alpha: np.ndarray
    retained: np.ndarray
    significance: float

    def retained_edges(self) -> list[tuple[str, str]]:
        labs = self.alphabet.labels
        return [(labs[i], labs[j]) for i, j in zip(*np.nonzero(self.retained))]


def _disparity_side(W: np.ndarray) -> np.ndarray:
    strength = W.sum(axis=1, keepdims=True)
    degree = (W > 0).sum(axis=1, keepdims=True)
    p = np.divide(W, strength, out=np.zeros_like(W), where=strength > 0)
    alpha = np.power(1.0 - p, np.maximum(degree - 1, 0))
    alpha = np.where(degree == 1, 0.0, alpha)
    return np.where(W > 0, alpha, 1.0)


def disparity_filter(net, significance: float = 0.05) -> DisparityResult:
    """Disparity-filter backbone: alpha_ij = (1 - p_ij)^(k - 1).

    Evaluated against both the source's outgoing and the target's incoming
    weights (self-loops count as edges); an edge is kept when the smaller
    alpha is below ``significance``. Degree-one nodes give alpha 0.
    """
    net = as_network(net)
    W = np.asarray(net.weights, dtype=float)
    if np.any(W < 0):
        raise DataError("disparity filter needs non-negative weights")
    a_out = _disparity_side(W)
    a_in = _disparity_side(W.T).T
    alpha = np.minimum(a_out, a_in)
    retained = (W > 0) & (alpha < significance)
    return DisparityResult(net.alphabet, a_out, a_in, alpha, retained, significance)


def _betweenness_raw(model):
    return betweenness_rw(model).raw


MEASURES: dict[str, Callable[[TransitionModel], dict[str, float]]] = {
    "in_strength": in_strength,
    "out_strength": out_strength,
    "betweenness": _betweenness_raw,
}


@dataclass(frozen=True)
class StabilityResult:
    measure: str
    cs_coefficient: float
    mean_correlation: dict[float, float]
    correlations: dict[float, list[float]] = field(repr=False)
    cutoff: float = 0.7


def _rank_corr(a: np.ndarray, b: np.ndarray) -> float:
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return 1.0 if np.array_equal(a, b) else 0.0
    return float(spearmanr(a, b)[0])


def centrality_stability(sequences: Sequence[StateSequence], alphabet: Alphabet,
                         measure: str = "in_strength",
                         drop_props: Sequence[float] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7),
                         n_reps: int = 250, seed=None, cutoff: float = 0.7) -> StabilityResult:
    """Case-dropping stability of a centrality measure.

    For each drop proportion, re-estimates the network on random subsets
    of the sequences and records the Spearman correlation with the
    full-sample centralities. The CS-coefficient is the largest proportion
    whose mean correlation is still >= ``cutoff`` (0 if none).
    """
    if measure not in MEASURES:
        raise ConfigError(f"unknown measure {measure!r}; valid: {', '.join(MEASURES)}")
    n = len(sequences)
    props = sorted(float(p) for p in drop_props)
    if any(not 0 <= p < 1 for p in props):
        raise ConfigError("drop proportions must lie in [0, 1)")
    keep_sizes = {p: int(round(n * (1 - p))) for p in props}
    smallest = min(keep_sizes.values()) if keep_sizes else n
    if smallest < 2:
        raise DataError(
            f"{n} sequences leave {smallest} after dropping {max(props)}; need at least 2"
        )
    fn = MEASURES[measure]
    full_model = estimate(tally(sequences, alphabet))
    full = np.array([fn(full_model)[lab] for lab in alphabet.labels])
    T = _transition_stack(sequences, alphabet)
    S = len(alphabet)
    rng = np.random.default_rng(seed)

    corrs: dict[float, list[float]] = {}
    for p in props:
        k = keep_sizes[p]
        vals = []
        for _ in range(n_reps if k < n else 1):
            idx = np.arange(n) if k == n else rng.choice(n, size=k, replace=False)
            sub = TransitionModel(alphabet, np.full(S, 1.0 / S), row_normalize(T[idx].sum(axis=0).reshape(S, S)))
            est = fn(sub)
            vals.append(_rank_corr(full, np.array([est[lab] for lab in alphabet.labels])))
        corrs[p] = vals
    means = {p: float(np.mean(v)) for p, v in corrs.items()}
    ok = [p for p in props if means[p] >= cutoff]
    return StabilityResult(measure, max(ok) if ok else 0.0, means, corrs, cutoff)
