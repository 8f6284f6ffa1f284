"""Synthetic joint distributions over prototype index pairs with analytic PMI.

Three families are supported:

- diagonal: mass concentrated on one-to-one aligned (i, i) pairs,
  epsilon-smoothed so every cell keeps positive probability;
- block: contexts and responses partitioned into equal topic blocks, mass
  (1 - eps) uniform over same-block cells and eps over cross-block cells;
- independent: product of marginals (uniform by default, optionally
  Dirichlet-drawn).

Each family yields exact per-cell PMI ground truth, which downstream modules
use as the oracle for estimator evaluation. Index pairs are embedded by a
deterministic index-preserving embedder (with optional Gaussian noise) that
stands in for an external text encoder: pairs with the same indices map to
the same vector when the noise is zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import DataError, EmbeddedPair, POSITIVE, child_rng

FAMILIES = ("diagonal", "block", "independent")


@dataclass
class JointSpec:
    """A discrete joint distribution over (context index, response index)."""

    n_ctx: int
    n_resp: int
    probs: np.ndarray
    family: str

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.shape != (self.n_ctx, self.n_resp):
            raise DataError("probs shape does not match (n_ctx, n_resp)")
        if np.any(self.probs < 0):
            raise DataError("probabilities must be non-negative")
        total = float(self.probs.sum())
        if abs(total - 1.0) > 1e-12:
            raise DataError(f"probabilities sum to {total}, expected 1")
        if np.any(self.ctx_marginal() <= 0) or np.any(self.resp_marginal() <= 0):
            raise DataError("every marginal probability must be positive")
        if self.family not in FAMILIES:
            raise DataError(f"unknown family {self.family!r}")

    def ctx_marginal(self) -> np.ndarray:
        return self.probs.sum(axis=1)

    def resp_marginal(self) -> np.ndarray:
        return self.probs.sum(axis=0)


def make_diagonal(K: int, eps: float) -> JointSpec:
    """Joint with (1-eps) mass on the diagonal, eps spread off-diagonal."""
    if K < 2:
        raise DataError("diagonal family requires K >= 2")
    if not 0.0 <= eps < 1.0:
        raise DataError("eps must be in [0, 1)")
    probs = np.full((K, K), eps / (K * (K - 1)))
    np.fill_diagonal(probs, (1.0 - eps) / K)
    return JointSpec(K, K, probs, "diagonal")


def make_block(K: int, n_blocks: int, eps: float) -> JointSpec:
    """Joint correlated within ``n_blocks`` equal groups of indices.

    Mass (1 - eps) is uniform over same-block cells, eps uniform over
    cross-block cells. eps = 1 is allowed as the degenerate all-cross case.
    """
    if n_blocks < 1 or K % n_blocks != 0:
        raise DataError("n_blocks must divide K")
    if not 0.0 <= eps <= 1.0:
        raise DataError("eps must be in [0, 1]")
    if n_blocks == 1 and eps > 0:
        raise DataError("single block has no cross-block cells for eps mass")
    block = K // n_blocks
    same = np.zeros((K, K), dtype=bool)
    for b in range(n_blocks):
        sl = slice(b * block, (b + 1) * block)
        same[sl, sl] = True
    probs = np.zeros((K, K))
    n_same = int(same.sum())
    n_cross = K * K - n_same
    probs[same] = (1.0 - eps) / n_same
    if n_cross:
        probs[~same] = eps / n_cross
    return JointSpec(K, K, probs, "block")


def make_independent(
    K: int,
    dirichlet_alpha: float | None = None,
    rng: np.random.Generator | None = None,
) -> JointSpec:
    """Product-of-marginals joint; uniform unless a Dirichlet alpha is given."""
    if K < 1:
        raise DataError("independent family requires K >= 1")
    if dirichlet_alpha is None:
        probs = np.full((K, K), 1.0 / (K * K))
    else:
        if rng is None:
            raise DataError("Dirichlet marginals require an rng")
        pi_x = rng.dirichlet(np.full(K, dirichlet_alpha))
        pi_y = rng.dirichlet(np.full(K, dirichlet_alpha))
        probs = np.outer(pi_x, pi_y)
        probs /= probs.sum()
    return JointSpec(K, K, probs, "independent")


def analytic_pmi(spec: JointSpec, i: int, j: int) -> float:
    """Exact PMI (nats) of cell (i, j): log p(i,j) / (p(i) p(j))."""
    p = float(spec.probs[i, j])
    if p <= 0.0:
        raise DataError(f"PMI undefined (-inf) at zero-probability cell ({i}, {j})")
    return math.log(p) - math.log(float(spec.ctx_marginal()[i])) - math.log(
        float(spec.resp_marginal()[j])
    )


def pmi_table(spec: JointSpec) -> np.ndarray:
    """Per-cell PMI matrix; -inf where the joint mass is zero."""
    px = spec.ctx_marginal()[:, None]
    py = spec.resp_marginal()[None, :]
    with np.errstate(divide="ignore"):
        return np.log(spec.probs) - np.log(px * py)


def mutual_information(spec: JointSpec) -> float:
    """MI (nats) = expectation of PMI under the joint."""
    table = pmi_table(spec)
    mask = spec.probs > 0
    return float((spec.probs[mask] * table[mask]).sum())


def sample_pairs(spec: JointSpec, n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Draw n i.i.d. index pairs from the joint distribution."""
    if n < 1:
        raise DataError("n must be >= 1")
    flat = rng.choice(spec.probs.size, size=n, p=spec.probs.ravel())
    ii, jj = np.unravel_index(flat, spec.probs.shape)
    return list(zip(ii.tolist(), jj.tolist()))


EMBED_MODES = ("onehot_concat", "gaussian_prototypes")


@dataclass
class SyntheticEmbedConfig:
    """How prototype index pairs are turned into vectors."""

    noise_sigma: float = 0.0
    mode: str = "onehot_concat"
    proto_dim: int = 64
    seed: int = 42

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be >= 0")
        if self.mode not in EMBED_MODES:
            raise DataError(f"unknown embed mode {self.mode!r}")
        if self.proto_dim < 1:
            raise DataError("proto_dim must be >= 1")

    def to_dict(self) -> dict:
        return {
            "noise_sigma": self.noise_sigma,
            "mode": self.mode,
            "proto_dim": self.proto_dim,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticEmbedConfig":
        return cls(**{k: d[k] for k in cls().to_dict() if k in d})


class SyntheticEmbedder:
    """Deterministic index-preserving pair embedder.

    onehot_concat produces onehot(i) ++ onehot(j); gaussian_prototypes adds
    fixed per-index Gaussian vectors u_i + v_j drawn once from the config
    seed. Optional isotropic noise is drawn from the caller's stream, so the
    prototype tables themselves never depend on sampling order.
    """

    def __init__(self, spec: JointSpec, cfg: SyntheticEmbedConfig):
        self.spec = spec
        self.cfg = cfg
        self._pmi = pmi_table(spec)
        if cfg.mode == "gaussian_prototypes":
            proto_rng = child_rng(cfg.seed, "prototypes")
            self._u = proto_rng.standard_normal((spec.n_ctx, cfg.proto_dim))
            self._v = proto_rng.standard_normal((spec.n_resp, cfg.proto_dim))
        else:
            self._u = None
            self._v = None

    @property
    def dim(self) -> int:
        if self.cfg.mode == "onehot_concat":
            return self.spec.n_ctx + self.spec.n_resp
        return self.cfg.proto_dim

    def vector(self, i: int, j: int, rng: np.random.Generator) -> np.ndarray:
        if not (0 <= i < self.spec.n_ctx and 0 <= j < self.spec.n_resp):
            raise DataError(f"index pair ({i}, {j}) out of bounds")
        if self.cfg.mode == "onehot_concat":
            vec = np.zeros(self.dim)
            vec[i] = 1.0
            vec[self.spec.n_ctx + j] = 1.0
        else:
            vec = self._u[i] + self._v[j]
        if self.cfg.noise_sigma > 0:
            vec = vec + rng.normal(0.0, self.cfg.noise_sigma, size=self.dim)
        return vec

    def embed(
        self, i: int, j: int, rng: np.random.Generator, label: str = POSITIVE
    ) -> EmbeddedPair:
        vector = self.vector(i, j, rng)
        target = self._pmi[i, j]
        return EmbeddedPair(
            vector=vector,
            label=label,
            target_pmi=float(target) if math.isfinite(target) else None,
            ctx_index=i,
            resp_index=j,
        )


def embed_synthetic(
    spec: JointSpec,
    i: int,
    j: int,
    cfg: SyntheticEmbedConfig,
    rng: np.random.Generator,
    label: str = POSITIVE,
) -> EmbeddedPair:
    """Embed one index pair (convenience wrapper over SyntheticEmbedder)."""
    return SyntheticEmbedder(spec, cfg).embed(i, j, rng, label=label)


def embed_dataset(
    spec: JointSpec,
    pairs: list[tuple[int, int]],
    cfg: SyntheticEmbedConfig,
    rng: np.random.Generator,
    label: str = POSITIVE,
) -> list[EmbeddedPair]:
    embedder = SyntheticEmbedder(spec, cfg)
    return [embedder.embed(i, j, rng, label=label) for i, j in pairs]
