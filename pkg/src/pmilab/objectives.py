"""Training objectives on score batches, plus the KDE baseline.

All parametric losses operate on raw scores s with the implied density
ratio D = exp(s), so positivity of the discriminator is structural. Each
loss returns (value, dloss/dpos, dloss/dneg) so the trainer can feed the
per-score gradients straight into the scorer's backward pass.

Loss zoo (pos ~ joint pairs, neg ~ mismatched pairs):

- pmiscore:  -(E+[s] - E-[exp s])            minimizer: s* = pmi per cell
- mine:      -(E+[s] - log E-[exp s])        Donsker-Varadhan form
- infonce:   softmax cross-entropy of the true pair vs K negatives
- fdiv:*     -(E+[df(e^s)] - E-[f*(df(e^s))]) for a table of f-divergences

pmiscore is the KL dual with the constant +1 dropped; fdiv:kl keeps it, so
pmiscore_loss - fdiv_loss("kl") == 1 identically on every batch.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .core import DataError, logsumexp

FDIV_KINDS = (
    "kl",
    "total_variation",
    "pearson_chi2",
    "jensen_shannon",
    "squared_hellinger",
)

# total_variation has zero gradient almost everywhere: evaluation only.
TRAINABLE_FDIV_KINDS = tuple(k for k in FDIV_KINDS if k != "total_variation")


@dataclass
class ScoreBatch:
    """Scores of one batch: positives, negatives, and the per-positive
    negative grouping required by infonce (groups[i] indexes neg_scores)."""

    pos_scores: np.ndarray
    neg_scores: np.ndarray
    groups: np.ndarray | None = None

    def __post_init__(self):
        self.pos_scores = np.asarray(self.pos_scores, dtype=np.float64)
        self.neg_scores = np.asarray(self.neg_scores, dtype=np.float64)
        if self.groups is not None:
            self.groups = np.asarray(self.groups, dtype=np.intp)
            if self.groups.ndim != 2 or self.groups.shape[0] != self.pos_scores.size:
                raise DataError("groups must be (n_pos, k) indices into neg_scores")

    def require(self):
        if self.pos_scores.size == 0 or self.neg_scores.size == 0:
            raise DataError("score batch needs both positive and negative scores")
        if not (np.all(np.isfinite(self.pos_scores)) and np.all(np.isfinite(self.neg_scores))):
            raise DataError("scores contain non-finite entries")


def pmiscore_loss(batch: ScoreBatch) -> tuple[float, np.ndarray, np.ndarray]:
    """KL dual loss without the constant: -(mean(pos) - mean(exp(neg)))."""
    batch.require()
    pos, neg = batch.pos_scores, batch.neg_scores
    exp_neg = np.exp(neg)
    loss = -(pos.mean() - exp_neg.mean())
    dpos = np.full(pos.size, -1.0 / pos.size)
    dneg = exp_neg / neg.size
    return float(loss), dpos, dneg


def mine_loss(batch: ScoreBatch) -> tuple[float, np.ndarray, np.ndarray]:
    """Donsker-Varadhan loss: -(mean(pos) - log mean(exp(neg)))."""
    batch.require()
    pos, neg = batch.pos_scores, batch.neg_scores
    lse = logsumexp(neg)
    loss = -(pos.mean() - (lse - math.log(neg.size)))
    dpos = np.full(pos.size, -1.0 / pos.size)
    dneg = np.exp(neg - lse)  # softmax weights over negatives
    return float(loss), dpos, dneg


def infonce_loss(pos_score: float, neg_scores) -> tuple[float, tuple[float, np.ndarray]]:
    """Contrastive softmax loss for one positive against its K negatives.

    Shift-invariant: adding a constant to all K+1 scores leaves the loss
    unchanged, which is why its scores are only calibrated up to a shift.
    """
    neg_scores = np.asarray(neg_scores, dtype=np.float64)
    if neg_scores.size < 1:
        raise DataError("infonce needs at least one negative")
    logits = np.concatenate(([float(pos_score)], neg_scores))
    lse = logsumexp(logits)
    loss = lse - float(pos_score)
    probs = np.exp(logits - lse)
    dpos = float(probs[0] - 1.0)
    dneg = probs[1:]
    return float(loss), (dpos, dneg)


def infonce_batch_loss(batch: ScoreBatch) -> tuple[float, np.ndarray, np.ndarray]:
    """infonce averaged over the batch's positives using its grouping."""
    batch.require()
    if batch.groups is None:
        raise DataError("infonce requires per-positive negative groups")
    pos, neg, groups = batch.pos_scores, batch.neg_scores, batch.groups
    n = pos.size
    logits = np.concatenate([pos[:, None], neg[groups]], axis=1)
    m = logits.max(axis=1, keepdims=True)
    lse = (m[:, 0]) + np.log(np.exp(logits - m).sum(axis=1))
    loss = float((lse - pos).mean())
    probs = np.exp(logits - lse[:, None])
    dpos = (probs[:, 0] - 1.0) / n
    dneg = np.zeros(neg.size)
    np.add.at(dneg, groups, probs[:, 1:] / n)
    return loss, dpos, dneg


def _fdiv_terms(kind: str, s: np.ndarray):
    """Return (df(e^s), f*(df(e^s))) and their derivatives w.r.t. s."""
    if kind == "kl":
        pos_val = s + 1.0
        pos_grad = np.ones_like(s)
        neg_val = np.exp(s)
        neg_grad = neg_val
    elif kind == "pearson_chi2":
        es = np.exp(s)
        pos_val = 2.0 * (es - 1.0)
        pos_grad = 2.0 * es
        e2s = np.exp(2.0 * s)
        neg_val = e2s - 1.0
        neg_grad = 2.0 * e2s
    elif kind == "jensen_shannon":
        # log(2 e^s / (1 + e^s)) and -log(2 / (1 + e^s)), via log1p for stability
        softplus = np.logaddexp(0.0, s)
        pos_val = math.log(2.0) + s - softplus
        sig = 1.0 / (1.0 + np.exp(-s))
        pos_grad = 1.0 - sig
        neg_val = -math.log(2.0) + softplus
        neg_grad = sig
    elif kind == "squared_hellinger":
        pos_val = 1.0 - np.exp(-0.5 * s)
        pos_grad = 0.5 * np.exp(-0.5 * s)
        neg_val = np.exp(0.5 * s) - 1.0
        neg_grad = 0.5 * np.exp(0.5 * s)
    elif kind == "total_variation":
        pos_val = np.sign(s)
        pos_grad = np.zeros_like(s)
        neg_val = np.sign(s)
        neg_grad = np.zeros_like(s)
    else:
        raise DataError(f"unsupported f-divergence kind {kind!r}")
    return pos_val, pos_grad, neg_val, neg_grad


def fdiv_loss(kind: str, batch: ScoreBatch) -> tuple[float, np.ndarray, np.ndarray]:
    """Generalized dual-form loss for the named f-divergence."""
    batch.require()
    pos, neg = batch.pos_scores, batch.neg_scores
    pos_val, pos_grad, _, _ = _fdiv_terms(kind, pos)
    _, _, neg_val, neg_grad = _fdiv_terms(kind, neg)
    loss = -(pos_val.mean() - neg_val.mean())
    dpos = -pos_grad / pos.size
    dneg = neg_grad / neg.size
    return float(loss), dpos, dneg


def objective_loss(objective: str, batch: ScoreBatch) -> tuple[float, np.ndarray, np.ndarray]:
    """Dispatch a named objective; infonce uses the batch's grouping."""
    if objective == "pmiscore":
        return pmiscore_loss(batch)
    if objective == "mine":
        return mine_loss(batch)
    if objective == "infonce":
        return infonce_batch_loss(batch)
    if objective.startswith("fdiv:"):
        kind = objective.split(":", 1)[1]
        if kind == "total_variation":
            raise DataError("fdiv:total_variation is evaluation-only (zero gradient)")
        return fdiv_loss(kind, batch)
    raise DataError(f"unknown objective {objective!r}")


# ---------------------------------------------------------------------------
# Gaussian KDE baseline: StandardScaler -> optional PCA -> per-side KDE.
# ---------------------------------------------------------------------------

LOG_DENSITY_FLOOR = -745.0
PCA_TARGET_DIM = 128
_BW_FLOOR = 1e-6


@dataclass
class _GaussianKde:
    """Diagonal-bandwidth Gaussian KDE over stored sample points."""

    points: np.ndarray      # (n, p)
    bandwidths: np.ndarray  # (p,)

    def log_density(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        n, p = self.points.shape
        const = -0.5 * p * math.log(2.0 * math.pi) - float(
            np.log(self.bandwidths).sum()
        ) - math.log(n)
        q = self.points / self.bandwidths
        z = X / self.bandwidths
        # squared Mahalanobis distances via the expansion |z - q|^2
        sq = (z * z).sum(axis=1)[:, None] + (q * q).sum(axis=1)[None, :] - 2.0 * z @ q.T
        np.maximum(sq, 0.0, out=sq)
        m = (-0.5 * sq).max(axis=1)
        out = m + np.log(np.exp(-0.5 * sq - m[:, None]).sum(axis=1)) + const
        return out


def scott_factor(n: int, dim: int) -> float:
    """Scott's rule bandwidth factor n^(-1/(dim+4))."""
    return float(n) ** (-1.0 / (dim + 4))


@dataclass
class KdeModel:
    """Fitted density pair used for log-ratio scoring."""

    mean: np.ndarray
    std: np.ndarray
    keep: np.ndarray
    projection: np.ndarray | None
    mode: str
    kde_pos: _GaussianKde
    kde_neg: _GaussianKde | None
    kde_ctx: _GaussianKde | None = None
    kde_resp: _GaussianKde | None = None
    split_dim: int | None = None

    @property
    def bandwidth_pos(self) -> np.ndarray:
        return self.kde_pos.bandwidths

    @property
    def bandwidth_neg(self) -> np.ndarray | None:
        return None if self.kde_neg is None else self.kde_neg.bandwidths

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        Z = (X[:, self.keep] - self.mean) / self.std
        if self.projection is not None:
            Z = Z @ self.projection
        return Z


def _side_kde(points: np.ndarray, multiplier: float = 1.0) -> _GaussianKde:
    n, p = points.shape
    factor = scott_factor(n, p) * multiplier
    stds = points.std(axis=0)
    bw = factor * np.maximum(stds, _BW_FLOOR)
    return _GaussianKde(points=points, bandwidths=bw)


def _loo_log_likelihood(points: np.ndarray, multiplier: float) -> float:
    """Mean leave-one-out log density under the multiplied Scott bandwidth."""
    kde = _side_kde(points, multiplier)
    n, p = points.shape
    q = points / kde.bandwidths
    sq = (q * q).sum(axis=1)[:, None] + (q * q).sum(axis=1)[None, :] - 2.0 * q @ q.T
    np.maximum(sq, 0.0, out=sq)
    np.fill_diagonal(sq, np.inf)  # exclude self-kernel
    const = -0.5 * p * math.log(2.0 * math.pi) - float(
        np.log(kde.bandwidths).sum()
    ) - math.log(n - 1)
    m = (-0.5 * sq).max(axis=1)
    ll = m + np.log(np.exp(-0.5 * sq - m[:, None]).sum(axis=1)) + const
    return float(np.maximum(ll, LOG_DENSITY_FLOOR).mean())


CV_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)


def _fit_side(points: np.ndarray, bandwidth: str) -> _GaussianKde:
    if bandwidth == "scott":
        return _side_kde(points)
    if bandwidth == "cv":
        best = max(CV_MULTIPLIERS, key=lambda mult: _loo_log_likelihood(points, mult))
        return _side_kde(points, best)
    raise DataError(f"unknown bandwidth rule {bandwidth!r}")


def kde_fit(
    pos: np.ndarray,
    neg: np.ndarray,
    use_pca: bool = False,
    bandwidth: str = "scott",
    mode: str = "pos_neg",
    split_dim: int | None = None,
) -> KdeModel:
    """Fit the KDE baseline.

    Pooled data is standardized per dimension (zero-variance dimensions are
    dropped with a warning); with ``use_pca`` and more than 128 surviving
    dimensions the data is projected onto the top principal directions.
    ``mode="pos_neg"`` fits one KDE per side; ``mode="joint_marginal"``
    instead fits a joint KDE plus per-half marginal KDEs on the positives
    (requires ``split_dim`` and skips PCA so the halves stay separable).
    """
    pos = np.atleast_2d(np.asarray(pos, dtype=np.float64))
    neg = np.atleast_2d(np.asarray(neg, dtype=np.float64))
    if pos.shape[0] < 2 or neg.shape[0] < 2:
        raise DataError("KDE needs at least 2 samples per side")
    if pos.shape[1] != neg.shape[1]:
        raise DataError("positive and negative samples have different dimensions")
    if mode not in ("pos_neg", "joint_marginal"):
        raise DataError(f"unknown KDE mode {mode!r}")

    pooled = np.vstack([pos, neg])
    std = pooled.std(axis=0)
    keep = std > 1e-12
    if not np.all(keep):
        warnings.warn(
            f"dropping {int((~keep).sum())} zero-variance dimension(s) before KDE"
        )
    if not np.any(keep):
        raise DataError("all dimensions have zero variance")
    mean = pooled[:, keep].mean(axis=0)
    std = std[keep]

    def standardize(X):
        return (X[:, keep] - mean) / std

    zpos = standardize(pos)
    zneg = standardize(neg)

    projection = None
    if mode == "pos_neg" and use_pca and zpos.shape[1] > PCA_TARGET_DIM:
        zpooled = np.vstack([zpos, zneg])
        _, _, vt = np.linalg.svd(zpooled, full_matrices=False)
        projection = vt[: min(PCA_TARGET_DIM, vt.shape[0])].T
        zpos = zpos @ projection
        zneg = zneg @ projection

    if mode == "pos_neg":
        return KdeModel(
            mean=mean, std=std, keep=keep, projection=projection, mode=mode,
            kde_pos=_fit_side(zpos, bandwidth),
            kde_neg=_fit_side(zneg, bandwidth),
        )

    if split_dim is None or not 0 < split_dim < pos.shape[1]:
        raise DataError("joint_marginal mode requires an interior split_dim")
    kept_idx = np.flatnonzero(keep)
    ctx_cols = kept_idx < split_dim
    if not ctx_cols.any() or ctx_cols.all():
        raise DataError("split_dim leaves an empty side after dropping dimensions")
    return KdeModel(
        mean=mean, std=std, keep=keep, projection=None, mode=mode,
        kde_pos=_fit_side(zpos, bandwidth),
        kde_neg=None,
        kde_ctx=_fit_side(zpos[:, ctx_cols], bandwidth),
        kde_resp=_fit_side(zpos[:, ~ctx_cols], bandwidth),
        split_dim=split_dim,
    )


def kde_log_density(model: KdeModel, X: np.ndarray, side: str = "pos") -> np.ndarray:
    """Log density of one fitted side, in original coordinates.

    Includes the standardizer Jacobian; when a PCA projection is present the
    value is a density over the projected space instead (ratios of the two
    sides remain directly comparable since they share the projection).
    """
    kde = {"pos": model.kde_pos, "neg": model.kde_neg}[side]
    if kde is None:
        raise DataError(f"model has no fitted {side!r} side")
    Z = model.transform(X)
    jacobian = -float(np.log(model.std).sum())
    raw = kde.log_density(Z) + jacobian
    return np.maximum(raw, LOG_DENSITY_FLOOR)


def kde_score_batch(model: KdeModel, X: np.ndarray) -> np.ndarray:
    """Log-ratio score: log p_pos(x) - log p_neg(x) (floored, never -inf)."""
    Z = model.transform(X)
    if model.mode == "pos_neg":
        lp = np.maximum(model.kde_pos.log_density(Z), LOG_DENSITY_FLOOR)
        ln = np.maximum(model.kde_neg.log_density(Z), LOG_DENSITY_FLOOR)
        return lp - ln
    kept_idx = np.flatnonzero(model.keep)
    ctx_cols = kept_idx < model.split_dim
    lj = np.maximum(model.kde_pos.log_density(Z), LOG_DENSITY_FLOOR)
    lc = np.maximum(model.kde_ctx.log_density(Z[:, ctx_cols]), LOG_DENSITY_FLOOR)
    lr = np.maximum(model.kde_resp.log_density(Z[:, ~ctx_cols]), LOG_DENSITY_FLOOR)
    return lj - lc - lr


def kde_score(model: KdeModel, x: np.ndarray) -> float:
    return float(kde_score_batch(model, np.asarray(x)[None, :])[0])
