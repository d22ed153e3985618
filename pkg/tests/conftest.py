import numpy as np
import pytest

from tna.markov import TransitionModel
from tna.sequences import Alphabet, StateSequence


def random_stochastic(rng, n, density=1.0, concentration=1.0):
    """Random row-stochastic matrix; with density < 1 some cells are zeroed."""
    P = rng.dirichlet(np.full(n, concentration), size=n)
    if density < 1.0:
        mask = rng.random((n, n)) < density
        mask[np.arange(n), rng.integers(n, size=n)] = True
        P = P * mask
        P /= P.sum(axis=1, keepdims=True)
    return P


def model_from(P, initial=None, labels=None):
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    labels = labels or tuple(f"S{i}" for i in range(n))
    init = np.full(n, 1.0 / n) if initial is None else np.asarray(initial, dtype=float)
    return TransitionModel(Alphabet(tuple(labels)), init, P)


def seqs_from_lists(lists, unit_prefix="u"):
    return [StateSequence(f"{unit_prefix}{i}", 0, tuple(s)) for i, s in enumerate(lists)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def cyclic_component(n, shift, strong=0.85):
    """Each state jumps to state+shift with probability ``strong``."""
    P = np.full((n, n), (1 - strong) / (n - 1))
    for i in range(n):
        P[i, (i + shift) % n] = strong
    return P


def planted_mixture(rng, matrices, n, length, covariates=None, assign=None):
    """Sequences drawn from the given components; returns (sequences, truth).

    ``covariates(k, rng)`` builds each sequence's covariate dict and
    ``assign(i, rng)`` picks its component (default: round robin).
    """
    from dataclasses import replace
    from tna.markov import simulate

    S = matrices[0].shape[0]
    seqs, truth = [], []
    for i in range(n):
        k = assign(i, rng) if assign else i % len(matrices)
        m = model_from(matrices[k], labels=tuple(f"S{j}" for j in range(S)))
        s = simulate(m, 1, length, seed=int(rng.integers(2**31)))[0]
        cov = covariates(k, rng) if covariates else {}
        seqs.append(replace(s, unit_id=f"u{i}", covariates=cov))
        truth.append(k)
    return seqs, np.array(truth)
