"""Shared domain types, the seeded-randomness contract, and small numeric helpers.

Every stochastic component in the package draws from a numpy PCG64 stream.
The generator family is pinned by name (``GENERATOR_NAME``) and recorded in
checkpoint headers so that reproducibility survives library upgrades.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

GENERATOR_NAME = "numpy-pcg64"

POSITIVE = "positive"
NEGATIVE = "negative"
LABELS = (POSITIVE, NEGATIVE)


class DataError(ValueError):
    """Malformed input data, file, or configuration."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite or runaway loss."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


def seeded_rng(seed: int) -> np.random.Generator:
    """Return a deterministic random stream for ``seed``.

    Identical seeds yield identical draw sequences across runs and platforms
    (numpy guarantees PCG64 stream stability). The stream supports uniform,
    categorical-by-weight (``choice(p=...)``) and standard-normal draws.
    """
    if seed < 0:
        raise DataError("seed must be a non-negative integer")
    return np.random.Generator(np.random.PCG64(seed))


def _stream_key(part: int | str) -> int:
    if isinstance(part, int):
        return part
    digest = hashlib.sha256(part.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


def child_rng(seed: int, *stream: int | str) -> np.random.Generator:
    """Derive an independent child stream keyed by ``(seed, *stream)``.

    Parallel consumers must never share a stream; they split it by deriving
    children with distinct labels.
    """
    keys = [_stream_key(seed)] + [_stream_key(part) for part in stream]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(keys)))


def mean(values) -> float:
    """Arithmetic mean of a non-empty array."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise DataError("empty expectation")
    return float(arr.mean())


def logsumexp(values) -> float:
    """log(sum(exp(v))) computed with a max shift, overflow-safe for |v| <= 20."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise DataError("logsumexp of empty array")
    m = float(arr.max())
    if not math.isfinite(m):
        return m
    return m + math.log(float(np.exp(arr - m).sum()))


@dataclass(frozen=True)
class PairSample:
    """One (context, response) example with its label and optional provenance."""

    context: str
    response: str
    label: str = POSITIVE
    ctx_index: int | None = None
    resp_index: int | None = None
    dialogue_id: str | None = None

    def __post_init__(self):
        if not self.context.strip():
            raise DataError("PairSample.context is empty")
        if not self.response.strip():
            raise DataError("PairSample.response is empty")
        if self.label not in LABELS:
            raise DataError(f"unknown label {self.label!r}")
        if (self.ctx_index is None) != (self.resp_index is None):
            raise DataError("ctx_index and resp_index must be set together")
        for idx in (self.ctx_index, self.resp_index):
            if idx is not None and idx < 0:
                raise DataError("prototype indices must be >= 0")


@dataclass
class EmbeddedPair:
    """A fixed-dimension vector for one pair plus its label and metadata.

    ``target_pmi`` is only present for synthetic data where the generating
    joint distribution is known. ``group_id`` carries the dialogue id for
    per-context grouping.
    """

    vector: np.ndarray
    label: str = POSITIVE
    target_pmi: float | None = None
    group_id: str | None = None
    ctx_index: int | None = None
    resp_index: int | None = None

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1 or self.vector.size == 0:
            raise DataError("embedding vector must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.vector)):
            raise DataError("embedding vector has non-finite entries")
        if self.label not in LABELS:
            raise DataError(f"unknown label {self.label!r}")
        if self.target_pmi is not None and not math.isfinite(self.target_pmi):
            raise DataError("target_pmi must be finite when present")

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])


# Objectives the trainer accepts; "fdiv:<kind>" selects a dual-form family
# member, except total_variation whose gradient vanishes almost everywhere.
TRAINABLE_OBJECTIVES = (
    "pmiscore",
    "mine",
    "infonce",
    "fdiv:kl",
    "fdiv:pearson_chi2",
    "fdiv:jensen_shannon",
    "fdiv:squared_hellinger",
)


@dataclass
class TrainConfig:
    """Hyperparameters for one scorer training run."""

    objective: str = "pmiscore"
    epochs: int = 100
    batch_positives: int = 256
    neg_per_pos: int = 4
    rounds: int = 1
    base_lr_numerator: float = 1e-3 * 1024
    seed: int = 42
    softcap: float = 20.0
    patience: int | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise DataError("epochs must be >= 0")
        if self.batch_positives < 1:
            raise DataError("batch_positives must be >= 1")
        if self.neg_per_pos < 1:
            raise DataError("neg_per_pos must be >= 1")
        if self.rounds < 1:
            raise DataError("rounds must be >= 1")
        if self.softcap <= 0:
            raise DataError("softcap must be > 0")
        if self.seed < 0:
            raise DataError("seed must be >= 0")
        if self.objective not in TRAINABLE_OBJECTIVES:
            raise DataError(
                f"unknown objective {self.objective!r}; "
                f"expected one of {', '.join(TRAINABLE_OBJECTIVES)}"
            )

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "epochs": self.epochs,
            "batch_positives": self.batch_positives,
            "neg_per_pos": self.neg_per_pos,
            "rounds": self.rounds,
            "base_lr_numerator": self.base_lr_numerator,
            "seed": self.seed,
            "softcap": self.softcap,
            "patience": self.patience,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: d[k] for k in cls().to_dict() if k in d})


def stack_vectors(pairs: list[EmbeddedPair]) -> np.ndarray:
    """Stack pair vectors into an (n, d) matrix, enforcing a uniform dimension."""
    if not pairs:
        raise DataError("no embedded pairs")
    dims = {p.dim for p in pairs}
    if len(dims) != 1:
        raise DataError(f"inconsistent embedding dimensions: {sorted(dims)}")
    return np.stack([p.vector for p in pairs])
