"""First-order Markov models: tallying, estimation, likelihood, simulation."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .sequences import Alphabet, StateSequence

SCALINGS = ("stochastic", "frequency", "count")


@dataclass(frozen=True, eq=False)
class CountMatrix:
    alphabet: Alphabet
    counts: np.ndarray
    initial_counts: np.ndarray
    n_sequences: int
    n_transitions: int

    def __add__(self, other: "CountMatrix") -> "CountMatrix":
        if other.alphabet != self.alphabet:
            raise DataError("cannot add count matrices over different alphabets")
        return CountMatrix(
            self.alphabet,
            self.counts + other.counts,
            self.initial_counts + other.initial_counts,
            self.n_sequences + other.n_sequences,
            self.n_transitions + other.n_transitions,
        )


@dataclass(frozen=True, eq=False)
class TransitionModel:
    alphabet: Alphabet
    initial: np.ndarray
    matrix: np.ndarray
    scaling: str = "stochastic"
    counts: CountMatrix | None = field(default=None, repr=False)

    @property
    def n_states(self) -> int:
        return len(self.alphabet)

    @property
    def zero_rows(self) -> list[int]:
        """States with no outgoing mass (never observed as a source)."""
        return [int(i) for i in np.flatnonzero(self.matrix.sum(axis=1) == 0)]

    @property
    def labels(self) -> tuple[str, ...]:
        return self.alphabet.labels

    def to_dict(self) -> dict:
        return {
            "labels": list(self.alphabet.labels),
            "scaling": self.scaling,
            "initial": [float(x) for x in self.initial],
            "matrix": [[float(x) for x in row] for row in self.matrix],
            "zero_rows": [self.alphabet.labels[i] for i in self.zero_rows],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TransitionModel":
        return cls(
            Alphabet(tuple(data["labels"])),
            np.asarray(data["initial"], dtype=float),
            np.asarray(data["matrix"], dtype=float),
            data.get("scaling", "stochastic"),
        )


def _check_states(seq: StateSequence, n_states: int) -> np.ndarray:
    arr = np.asarray(seq.states, dtype=np.intp)
    if arr.size == 0:
        raise DataError(f"empty sequence for unit {seq.unit_id!r}")
    if arr.min() < 0 or arr.max() >= n_states:
        raise DataError(f"state index out of range in unit {seq.unit_id!r}")
    return arr


def tally(sequences: Sequence[StateSequence], alphabet: Alphabet) -> CountMatrix:
    """Count initial states and adjacent pairs; pairs never span two sequences."""
    if len(sequences) == 0:
        raise DataError("cannot tally an empty list of sequences")
    n = len(alphabet)
    counts = np.zeros((n, n), dtype=np.int64)
    initial = np.zeros(n, dtype=np.int64)
    for seq in sequences:
        arr = _check_states(seq, n)
        initial[arr[0]] += 1
        if arr.size > 1:
            np.add.at(counts, (arr[:-1], arr[1:]), 1)
    return CountMatrix(alphabet, counts, initial, len(sequences), int(counts.sum()))


def sequence_counts(sequences: Sequence[StateSequence], n_states: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-sequence one-hot initial states (n, S) and transition counts (n, S, S)."""
    init = np.zeros((len(sequences), n_states))
    trans = np.zeros((len(sequences), n_states, n_states))
    for i, seq in enumerate(sequences):
        arr = _check_states(seq, n_states)
        init[i, arr[0]] = 1.0
        if arr.size > 1:
            np.add.at(trans[i], (arr[:-1], arr[1:]), 1.0)
    return init, trans


def row_normalize(mat: np.ndarray) -> np.ndarray:
    """Divide rows by their sums; rows without mass stay zero."""
    mat = np.asarray(mat, dtype=float)
    sums = mat.sum(axis=-1, keepdims=True)
    return np.divide(mat, sums, out=np.zeros_like(mat), where=sums > 0)


def estimate(counts: CountMatrix, scaling: str = "stochastic", pseudocount: float = 0.0) -> TransitionModel:
    """Relative-frequency estimate of initial and transition probabilities.

    ``pseudocount`` is added to every transition cell (stochastic scaling
    only); the default of 0 gives the raw maximum-likelihood estimate.
    """
    if scaling not in SCALINGS:
        raise ConfigError(f"unknown scaling {scaling!r}; expected one of {SCALINGS}")
    if pseudocount < 0:
        raise ConfigError("pseudocount must be non-negative")
    c = counts.counts.astype(float)
    if counts.n_sequences > 0:
        initial = counts.initial_counts / float(counts.n_sequences)
    else:
        initial = np.zeros(len(counts.alphabet))
    if scaling == "stochastic":
        matrix = row_normalize(c + pseudocount if pseudocount else c)
    elif scaling == "frequency":
        total = c.sum()
        matrix = c / total if total > 0 else np.zeros_like(c)
    else:
        matrix = c.copy()
    return TransitionModel(counts.alphabet, initial, matrix, scaling, counts)


def fit(sequences: Sequence[StateSequence], alphabet: Alphabet, scaling: str = "stochastic") -> TransitionModel:
    return estimate(tally(sequences, alphabet), scaling)


def safe_log(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.full(x.shape, -np.inf)
    np.log(x, out=out, where=x > 0)
    return out


def log_likelihood(model: TransitionModel, sequences: Sequence[StateSequence]) -> float:
    """Sum of sequence log-probabilities; -inf if any step has probability 0."""
    if model.scaling != "stochastic":
        raise ConfigError(f"log-likelihood needs a stochastic model, got {model.scaling!r}")
    log_init = safe_log(model.initial)
    log_p = safe_log(model.matrix)
    total = 0.0
    for seq in sequences:
        arr = _check_states(seq, model.n_states)
        total += log_init[arr[0]]
        if arr.size > 1:
            total += log_p[arr[:-1], arr[1:]].sum()
        if total == -np.inf:
            return -math.inf
    return float(total)


def _validate_for_sampling(model: TransitionModel) -> None:
    if model.scaling != "stochastic":
        raise ConfigError("simulation needs a stochastic model")
    P, pi = model.matrix, model.initial
    if P.shape != (model.n_states, model.n_states) or pi.shape != (model.n_states,):
        raise DataError("model dimensions disagree with its alphabet")
    if np.any(P < 0) or np.any(pi < 0) or not np.all(np.isfinite(P)):
        raise DataError("model has negative or non-finite probabilities")
    rows = P.sum(axis=1)
    bad = (rows > 0) & (np.abs(rows - 1) > 1e-9)
    if np.any(bad):
        raise DataError(f"rows {np.flatnonzero(bad).tolist()} do not sum to 1")
    if abs(pi.sum() - 1) > 1e-9:
        raise DataError("initial probabilities do not sum to 1")


def simulate_array(model: TransitionModel, n_sequences: int, length: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised sampler returning (states[n, length], lengths[n]).

    A walk that reaches a state with no outgoing mass is truncated there;
    cells past a sequence's length hold -1.
    """
    _validate_for_sampling(model)
    if n_sequences < 0 or length < 1:
        raise ConfigError("need n_sequences >= 0 and length >= 1")
    cum_pi = np.cumsum(model.initial)
    cum_p = np.cumsum(model.matrix, axis=1)
    rowsum = model.matrix.sum(axis=1)
    out = np.full((n_sequences, length), -1, dtype=np.intp)
    lengths = np.ones(n_sequences, dtype=np.intp)
    u = rng.random(n_sequences) * cum_pi[-1]
    cur = np.minimum(np.searchsorted(cum_pi, u, side="right"), model.n_states - 1)
    out[:, 0] = cur
    alive = np.ones(n_sequences, dtype=bool)
    for t in range(1, length):
        alive &= rowsum[cur] > 0
        if not alive.any():
            break
        idx = np.flatnonzero(alive)
        u = rng.random(idx.size) * rowsum[cur[idx]]
        nxt = (cum_p[cur[idx]] <= u[:, None]).sum(axis=1)
        nxt = np.minimum(nxt, model.n_states - 1)
        cur = cur.copy()
        cur[idx] = nxt
        out[idx, t] = nxt
        lengths[idx] += 1
    return out, lengths


def simulate(model: TransitionModel, n_sequences: int, length: int, seed=None,
             unit_prefix: str = "sim") -> list[StateSequence]:
    """Draw sequences from a stochastic model; deterministic for a fixed seed."""
    rng = np.random.default_rng(seed)
    states, lengths = simulate_array(model, n_sequences, length, rng)
    return [
        StateSequence(f"{unit_prefix}{i}", 0, tuple(int(x) for x in states[i, :lengths[i]]))
        for i in range(n_sequences)
    ]


def write_matrix_csv(model: TransitionModel, path, header_lines: Sequence[str] = ()) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["from/to", *model.labels])
        for label, row in zip(model.labels, model.matrix):
            w.writerow([label, *(format(float(x), ".17g") for x in row)])


def read_matrix_csv(path, scaling: str = "stochastic") -> TransitionModel:
    """Inverse of write_matrix_csv; initial probabilities are left uniform."""
    if not os.path.exists(path):
        raise DataError(f"matrix file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    labels = tuple(rows[0][1:])
    if [r[0] for r in rows[1:]] != list(labels):
        raise DataError("row labels must match column labels")
    matrix = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
    n = len(labels)
    return TransitionModel(Alphabet(labels), np.full(n, 1.0 / n), matrix, scaling)
