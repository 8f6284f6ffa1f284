"""Negative-pair construction from positive (context, response) samples.

Two synthetic recipes (flat mismatching per round, or a pre-generated pool
consumed across rounds without replacement) and two dialogue recipes (a
fixed 1-in-dialogue + 3-random mix, or a probabilistic in-dialogue draw).
A negative keeps the positive's context and swaps in another sample's
response, approximating a draw from the product of marginals.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import DataError, NEGATIVE, PairSample
from .ingest import Dialogue


@dataclass
class NegativePolicy:
    """How negatives are drawn for each positive.

    pool_size = 0 disables pooling (fresh mismatches every round).
    in_dialogue_count fixes that many in-dialogue slots per positive;
    in_dialogue_prob instead makes each slot in-dialogue at random.
    """

    per_pos: int = 4
    in_dialogue_prob: float = 0.0
    in_dialogue_count: int = 0
    pool_size: int = 0
    rounds: int = 1
    per_round: int = 0  # 0 means per_pos

    def __post_init__(self):
        if self.per_pos < 1:
            raise DataError("per_pos must be >= 1")
        if not 0.0 <= self.in_dialogue_prob <= 1.0:
            raise DataError("in_dialogue_prob must be in [0, 1]")
        if self.in_dialogue_count < 0 or self.in_dialogue_count > self.per_pos:
            raise DataError("in_dialogue_count must be in [0, per_pos]")
        if self.rounds < 1:
            raise DataError("rounds must be >= 1")
        if self.per_round < 0:
            raise DataError("per_round must be >= 0")
        if self.pool_size and self.pool_size < self.rounds * self.negatives_per_round:
            raise DataError("pool_size must cover rounds * per_round negatives")

    @property
    def negatives_per_round(self) -> int:
        return self.per_round or self.per_pos

    def to_dict(self) -> dict:
        return {
            "per_pos": self.per_pos,
            "in_dialogue_prob": self.in_dialogue_prob,
            "in_dialogue_count": self.in_dialogue_count,
            "pool_size": self.pool_size,
            "rounds": self.rounds,
            "per_round": self.per_round,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NegativePolicy":
        return cls(**{k: d[k] for k in cls().to_dict() if k in d})

    # Named presets ---------------------------------------------------------

    @classmethod
    def flat(cls, per_pos: int = 4, rounds: int = 1) -> "NegativePolicy":
        """Fresh uniform mismatches each round, per_pos negatives apiece."""
        return cls(per_pos=per_pos, rounds=rounds)

    @classmethod
    def pooled(cls, pool_size: int = 15, rounds: int = 5, per_round: int = 3) -> "NegativePolicy":
        """Pool of distinct negatives consumed across rounds, none reused."""
        return cls(
            per_pos=per_round, pool_size=pool_size, rounds=rounds, per_round=per_round
        )

    @classmethod
    def dialogue_fixed(cls, rounds: int = 5) -> "NegativePolicy":
        """Per positive: exactly 1 in-dialogue distractor plus 3 random."""
        return cls(per_pos=4, in_dialogue_count=1, rounds=rounds)

    @classmethod
    def dialogue_mixed(cls, rounds: int = 5) -> "NegativePolicy":
        """Per positive: 3 negatives, each in-dialogue with probability 0.1."""
        return cls(per_pos=3, in_dialogue_prob=0.1, rounds=rounds)


def _other_index(i: int, raw: int) -> int:
    # map a draw from range(n-1) onto range(n) \ {i}
    return raw if raw < i else raw + 1


def _mismatched_sample(anchor: PairSample, donor: PairSample) -> PairSample:
    return PairSample(
        context=anchor.context,
        response=donor.response,
        label=NEGATIVE,
        ctx_index=anchor.ctx_index,
        resp_index=donor.resp_index,
        dialogue_id=anchor.dialogue_id,
    )


def mismatch_negatives(
    positives: Sequence[PairSample],
    policy: NegativePolicy,
    rng: np.random.Generator,
) -> list[PairSample]:
    """Uniform response mismatching: per positive, per_pos donors drawn
    without replacement from the other positives."""
    n = len(positives)
    if n < 2:
        raise DataError("cannot mismatch fewer than 2 positives")
    k = policy.negatives_per_round
    if k > n - 1:
        raise DataError(f"cannot draw {k} distinct donors from {n - 1} candidates")
    out = []
    for i, anchor in enumerate(positives):
        draws = rng.choice(n - 1, size=k, replace=False)
        for raw in draws:
            out.append(_mismatched_sample(anchor, positives[_other_index(i, int(raw))]))
    return out


def build_pool(
    positives: Sequence[PairSample],
    pool_size: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Pre-draw a (n, pool_size) table of distinct donor row indices."""
    n = len(positives)
    if pool_size > n - 1:
        raise DataError(f"pool_size {pool_size} exceeds {n - 1} available donors")
    pool = np.empty((n, pool_size), dtype=np.intp)
    for i in range(n):
        draws = rng.choice(n - 1, size=pool_size, replace=False)
        pool[i] = [_other_index(i, int(raw)) for raw in draws]
    return pool


def pool_round_negatives(
    positives: Sequence[PairSample],
    pool: np.ndarray,
    round_idx: int,
    per_round: int,
) -> list[PairSample]:
    """Consume the next per_round pool entries for every positive."""
    start = round_idx * per_round
    end = start + per_round
    if end > pool.shape[1]:
        raise DataError(
            f"negative pool exhausted: round {round_idx} needs entries "
            f"{start}..{end - 1} of {pool.shape[1]}"
        )
    out = []
    for i, anchor in enumerate(positives):
        for donor_idx in pool[i, start:end]:
            out.append(_mismatched_sample(anchor, positives[int(donor_idx)]))
    return out


def dialogue_negatives(
    dialogues: dict[str, Dialogue],
    positives: Sequence[PairSample],
    policy: NegativePolicy,
    rng: np.random.Generator,
) -> list[PairSample]:
    """Dialogue-aware negatives within one split.

    In-dialogue slots pair the context with a different turn of the same
    dialogue (never the gold continuation), falling back to a random
    negative when the dialogue has no alternative turn. Random slots draw a
    response from a positive of a *different* dialogue in the same split.
    """
    n = len(positives)
    if n < 2:
        raise DataError("cannot build negatives from fewer than 2 positives")
    by_dialogue: dict[str | None, list[int]] = {}
    for idx, p in enumerate(positives):
        by_dialogue.setdefault(p.dialogue_id, []).append(idx)

    out = []
    for i, anchor in enumerate(positives):
        slots = []
        for slot in range(policy.per_pos):
            if slot < policy.in_dialogue_count:
                slots.append(True)
            elif policy.in_dialogue_prob > 0:
                slots.append(bool(rng.random() < policy.in_dialogue_prob))
            else:
                slots.append(False)
        foreign = [
            j
            for j in range(n)
            if positives[j].dialogue_id != anchor.dialogue_id
        ]
        dialogue = dialogues.get(anchor.dialogue_id)
        in_dialogue_candidates = []
        if dialogue is not None:
            in_dialogue_candidates = [
                turn for turn in dialogue.turns if turn != anchor.response
            ]
        for wants_in_dialogue in slots:
            if wants_in_dialogue and in_dialogue_candidates:
                turn = in_dialogue_candidates[
                    int(rng.integers(len(in_dialogue_candidates)))
                ]
                out.append(
                    PairSample(
                        context=anchor.context,
                        response=turn,
                        label=NEGATIVE,
                        dialogue_id=anchor.dialogue_id,
                    )
                )
            else:
                if not foreign:
                    raise DataError(
                        "no foreign-dialogue donors available for random negatives"
                    )
                donor = positives[foreign[int(rng.integers(len(foreign)))]]
                out.append(_mismatched_sample(anchor, donor))
    return out
