"""pmilab: pointwise mutual information estimation for paired items.

Trains a small softcapped MLP on pair embeddings with dual-form divergence
objectives so that its output approximates log Pr(pair) / (Pr(x) Pr(y)),
validated against analytic PMI oracles on synthetic joint distributions and
applied to dialogue (context, response) engagement scoring.
"""

from .core import (
    DataError,
    DivergenceError,
    EmbeddedPair,
    PairSample,
    TrainConfig,
    child_rng,
    seeded_rng,
)
from .sampling import NegativePolicy
from .synthetic import (
    JointSpec,
    SyntheticEmbedConfig,
    analytic_pmi,
    make_block,
    make_diagonal,
    make_independent,
    mutual_information,
    sample_pairs,
)
from .scorer import learning_rate, pmis_score, pmis_score_batch, softcap
from .trainer import TrainState, compare, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "DivergenceError",
    "EmbeddedPair",
    "JointSpec",
    "NegativePolicy",
    "PairSample",
    "SyntheticEmbedConfig",
    "TrainConfig",
    "TrainState",
    "analytic_pmi",
    "child_rng",
    "compare",
    "evaluate",
    "learning_rate",
    "make_block",
    "make_diagonal",
    "make_independent",
    "mutual_information",
    "pmis_score",
    "pmis_score_batch",
    "sample_pairs",
    "seeded_rng",
    "softcap",
    "train",
    "__version__",
]
