"""Transition network analysis of coded event logs."""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, NumericalError, TNAError  # noqa: E402
from .sequences import (  # noqa: E402
    Alphabet, Event, EventLog, Schema, SessionizationPolicy, StateSequence,
    filter_unit, gap_quantile, ingest, sessionize,
)
from .markov import CountMatrix, TransitionModel, estimate, log_likelihood, simulate, tally  # noqa: E402
from .graph import (  # noqa: E402
    TransitionNetwork, betweenness_rw, find_cliques, find_dyads, in_strength, out_strength, subtract,
)
from .community import communities_spinglass  # noqa: E402
from .mixture import cluster_networks, covariate_inference, fit_em, select_k  # noqa: E402
from .inference import (  # noqa: E402
    bootstrap_edges, centrality_stability, disparity_filter, permutation_compare,
)
