"""Three-layer MLP scoring head with exact manual gradients.

Architecture: Linear(d, h1) -> PReLU -> Linear(h1, h2) -> PReLU ->
Linear(h2, 1) -> softcap. The softcap squashes the output to (-cap, cap)
with cap * tanh(x / cap), which bounds the score and keeps the exp terms of
the dual-form losses from exploding.

The backward pass is hand-derived; no autodiff. PReLU slopes are trainable
scalars (one per layer). At a pre-activation of exactly zero the PReLU
subgradient uses the negative-side slope, a deterministic tie-break.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DataError, DivergenceError, GENERATOR_NAME

DEFAULT_WIDTHS = (256, 128)
PRELU_INIT_SLOPE = 0.25

PARAM_FIELDS = ("w1", "b1", "a1", "w2", "b2", "a2", "w3", "b3")

CHECKPOINT_VERSION = 1


@dataclass
class ScorerParams:
    """All weights, biases, and PReLU slopes of the scorer, plus the cap."""

    w1: np.ndarray  # (d, h1)
    b1: np.ndarray  # (h1,)
    a1: np.ndarray  # scalar (0-d)
    w2: np.ndarray  # (h1, h2)
    b2: np.ndarray  # (h2,)
    a2: np.ndarray  # scalar (0-d)
    w3: np.ndarray  # (h2, 1)
    b3: np.ndarray  # scalar (0-d)
    cap: float = 20.0

    def __post_init__(self):
        for name in PARAM_FIELDS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.cap <= 0:
            raise DataError("cap must be > 0")
        if not all(np.all(np.isfinite(getattr(self, name))) for name in PARAM_FIELDS):
            raise DataError("scorer parameters contain non-finite entries")

    @property
    def d(self) -> int:
        return int(self.w1.shape[0])

    @property
    def widths(self) -> tuple[int, int]:
        return int(self.w1.shape[1]), int(self.w2.shape[1])

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def copy(self) -> "ScorerParams":
        return ScorerParams(
            **{name: getattr(self, name).copy() for name in PARAM_FIELDS}, cap=self.cap
        )


def init_params(
    d: int,
    rng: np.random.Generator,
    widths: tuple[int, int] = DEFAULT_WIDTHS,
    cap: float = 20.0,
) -> ScorerParams:
    """Fan-in-scaled uniform init: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    Biases start at zero and PReLU slopes at 0.25.
    """
    if d < 1:
        raise DataError("input dimension must be >= 1")
    h1, h2 = widths

    def layer(fan_in, fan_out):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    return ScorerParams(
        w1=layer(d, h1),
        b1=np.zeros(h1),
        a1=np.float64(PRELU_INIT_SLOPE),
        w2=layer(h1, h2),
        b2=np.zeros(h2),
        a2=np.float64(PRELU_INIT_SLOPE),
        w3=layer(h2, 1),
        b3=np.float64(0.0),
        cap=cap,
    )


def softcap(x, cap: float):
    """cap * tanh(x / cap): strictly increasing, bounded in (-cap, cap)."""
    if cap <= 0:
        raise DataError("cap must be > 0")
    return cap * np.tanh(np.asarray(x, dtype=np.float64) / cap)


def _prelu(a: np.ndarray, z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, z, a * z)


@dataclass
class ForwardTape:
    """Activation record retained by forward for the exact backward pass."""

    x: np.ndarray
    z1: np.ndarray
    h1: np.ndarray
    z2: np.ndarray
    h2: np.ndarray
    z3: np.ndarray
    shape_sig: tuple = field(default=())


def _signature(params: ScorerParams) -> tuple:
    return (params.d, *params.widths, params.cap)


def forward_batch(params: ScorerParams, X: np.ndarray) -> tuple[np.ndarray, ForwardTape]:
    """Score a batch of row vectors; returns (scores (n,), tape)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.d:
        raise DataError(
            f"input has shape {X.shape}, expected (n, {params.d})"
        )
    z1 = X @ params.w1 + params.b1
    h1 = _prelu(params.a1, z1)
    z2 = h1 @ params.w2 + params.b2
    h2 = _prelu(params.a2, z2)
    z3 = (h2 @ params.w3)[:, 0] + params.b3
    scores = softcap(z3, params.cap)
    tape = ForwardTape(X, z1, h1, z2, h2, z3, shape_sig=_signature(params))
    return scores, tape


def forward(params: ScorerParams, x: np.ndarray) -> tuple[float, ForwardTape]:
    """Score a single vector; returns (score, tape)."""
    scores, tape = forward_batch(params, np.asarray(x, dtype=np.float64)[None, :])
    return float(scores[0]), tape


def backward_batch(
    params: ScorerParams, tape: ForwardTape, dscores: np.ndarray
) -> dict[str, np.ndarray]:
    """Exact parameter gradients for a batch, scaled by per-row dscores."""
    if tape.shape_sig != _signature(params):
        raise DataError("stale tape: does not match these parameters")
    dscores = np.asarray(dscores, dtype=np.float64)
    if dscores.shape != tape.z3.shape:
        raise DataError("dscores shape does not match the tape")

    t = np.tanh(tape.z3 / params.cap)
    dz3 = dscores * (1.0 - t * t)

    gw3 = tape.h2.T @ dz3[:, None]
    gb3 = np.float64(dz3.sum())
    dh2 = dz3[:, None] * params.w3[:, 0][None, :]

    neg2 = tape.z2 <= 0.0
    dz2 = dh2 * np.where(neg2, params.a2, 1.0)
    ga2 = np.float64((dh2 * np.where(neg2, tape.z2, 0.0)).sum())

    gw2 = tape.h1.T @ dz2
    gb2 = dz2.sum(axis=0)
    dh1 = dz2 @ params.w2.T

    neg1 = tape.z1 <= 0.0
    dz1 = dh1 * np.where(neg1, params.a1, 1.0)
    ga1 = np.float64((dh1 * np.where(neg1, tape.z1, 0.0)).sum())

    gw1 = tape.x.T @ dz1
    gb1 = dz1.sum(axis=0)

    return {
        "w1": gw1, "b1": gb1, "a1": ga1,
        "w2": gw2, "b2": gb2, "a2": ga2,
        "w3": gw3, "b3": gb3,
    }


def backward(params: ScorerParams, tape: ForwardTape, dscore: float) -> dict[str, np.ndarray]:
    """Gradients of a single-vector forward call."""
    return backward_batch(params, tape, np.array([dscore], dtype=np.float64))


def input_gradient(params: ScorerParams, tape: ForwardTape, dscores: np.ndarray) -> np.ndarray:
    """Gradient of the scores w.r.t. the input rows (used for diagnostics)."""
    if tape.shape_sig != _signature(params):
        raise DataError("stale tape: does not match these parameters")
    t = np.tanh(tape.z3 / params.cap)
    dz3 = np.asarray(dscores, dtype=np.float64) * (1.0 - t * t)
    dh2 = dz3[:, None] * params.w3[:, 0][None, :]
    dz2 = dh2 * np.where(tape.z2 <= 0.0, params.a2, 1.0)
    dh1 = dz2 @ params.w2.T
    dz1 = dh1 * np.where(tape.z1 <= 0.0, params.a1, 1.0)
    return dz1 @ params.w1.T


def add_grads(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: a[name] + b[name] for name in PARAM_FIELDS}


ADAM_DEFAULTS = {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "weight_decay": 0.01}


@dataclass
class AdamState:
    """AdamW moment estimates, one slot per parameter array."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step_count: int = 0
    beta1: float = ADAM_DEFAULTS["beta1"]
    beta2: float = ADAM_DEFAULTS["beta2"]
    eps: float = ADAM_DEFAULTS["eps"]
    weight_decay: float = ADAM_DEFAULTS["weight_decay"]

    @classmethod
    def zeros(cls, params: ScorerParams, **hyper) -> "AdamState":
        return cls(
            m={name: np.zeros_like(arr) for name, arr in params.arrays().items()},
            v={name: np.zeros_like(arr) for name, arr in params.arrays().items()},
            **hyper,
        )

    def hyper_dict(self) -> dict:
        return {
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
        }


def adamw_step(
    params: ScorerParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[ScorerParams, AdamState]:
    """One decoupled-weight-decay Adam update (in place); returns the pair."""
    if lr <= 0:
        raise DataError("learning rate must be > 0")
    for name in PARAM_FIELDS:
        if not np.all(np.isfinite(grads[name])):
            raise DivergenceError("diverged: non-finite gradient")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name in PARAM_FIELDS:
        g = grads[name]
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        arr = getattr(params, name)
        update = m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * arr
        setattr(params, name, arr - lr * update)
    return params, state


LR_DIM_FLOOR = 128


def learning_rate(d: int, numerator: float = 1e-3 * 1024) -> float:
    """Dimension-scaled rule: lr = numerator / d (1e-3 at d = 1024).

    The denominator is floored at 128: below that the raw rule produces
    step sizes that demonstrably blow past the softcap and stall training
    on small synthetic dimensions, which the rule was never fit to.
    """
    if d <= 0:
        raise DataError("d must be > 0")
    return numerator / max(d, LR_DIM_FLOOR)


def pmis_score(params: ScorerParams, x: np.ndarray) -> float:
    """Log-domain PMI estimate for one pair vector.

    The network output is already the log-domain score (the implied density
    ratio is exp(score)), so no further transform is applied.
    """
    score, _ = forward(params, x)
    return score


def pmis_score_batch(params: ScorerParams, X: np.ndarray) -> np.ndarray:
    scores, _ = forward_batch(params, X)
    return scores


def save_checkpoint(path: str | Path, params: ScorerParams, meta: dict | None = None) -> None:
    """Write a checkpoint: JSON header plus flat row-major weight arrays."""
    h1, h2 = params.widths
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "generator": GENERATOR_NAME,
        "d": params.d,
        "widths": [h1, h2],
        "cap": params.cap,
        "meta": meta or {},
        "params": {
            name: getattr(params, name).ravel(order="C").tolist()
            for name in PARAM_FIELDS
        },
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_checkpoint(path: str | Path) -> tuple[ScorerParams, dict]:
    """Read a checkpoint, validating dimensions; returns (params, meta)."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {doc.get('format_version')}")
    d = int(doc["d"])
    h1, h2 = (int(w) for w in doc["widths"])
    shapes = {
        "w1": (d, h1), "b1": (h1,), "a1": (),
        "w2": (h1, h2), "b2": (h2,), "a2": (),
        "w3": (h2, 1), "b3": (),
    }
    raw = doc["params"]
    arrays = {}
    for name, shape in shapes.items():
        flat = np.asarray(raw[name], dtype=np.float64)
        expected = int(np.prod(shape)) if shape else 1
        if flat.size != expected:
            raise DataError(
                f"checkpoint field {name} has {flat.size} values, expected {expected}"
            )
        arrays[name] = flat.reshape(shape) if shape else np.float64(flat[0])
    params = ScorerParams(**arrays, cap=float(doc["cap"]))
    return params, doc.get("meta", {})
