"""Evaluation statistics: MSE, Pearson, tie-aware Spearman, rank-sum ROC-AUC.

All correlations and AUCs are computed directly with numpy; ties receive
average ranks, which gives ROC-AUC its half-credit-on-ties behavior for
free via the rank-sum identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import DataError


def rank_average(x) -> np.ndarray:
    """1-based ranks; tied values receive the mean of their rank positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.size == 0:
        raise DataError("mse requires equal-length non-empty arrays")
    diff = pred - target
    return float((diff * diff).mean())


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise DataError("pearson requires two arrays of equal length >= 2")
    xd = x - x.mean()
    yd = y - y.mean()
    sx = math.sqrt(float((xd * xd).sum()))
    sy = math.sqrt(float((yd * yd).sum()))
    if sx == 0.0 or sy == 0.0:
        raise DataError("undefined correlation: zero variance")
    return float((xd * yd).sum() / (sx * sy))


def spearman(x, y) -> float:
    """Pearson correlation of tie-averaged ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise DataError("spearman requires two arrays of equal length >= 2")
    return pearson(rank_average(x), rank_average(y))


def roc_auc(pos_scores, neg_scores) -> float:
    """P(random positive outranks random negative), ties worth 0.5.

    Computed via the rank-sum identity in O(n log n); equal to the pairwise
    definition (1/|P||N|) * sum of [p > n] + 0.5 [p == n].
    """
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise DataError("roc_auc requires non-empty score sets")
    ranks = rank_average(np.concatenate([pos, neg]))
    rank_sum_pos = float(ranks[: pos.size].sum())
    auc = (rank_sum_pos - pos.size * (pos.size + 1) / 2.0) / (pos.size * neg.size)
    return float(auc)


def roc_auc_grouped(pos_scores, neg_score_groups) -> float:
    """Mean per-context AUC: each gold score vs its own negatives only."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    groups = np.asarray(neg_score_groups, dtype=np.float64)
    if groups.ndim != 2 or groups.shape[0] != pos.size or pos.size == 0:
        raise DataError("grouped AUC needs one negative row per positive")
    wins = (pos[:, None] > groups).sum(axis=1) + 0.5 * (pos[:, None] == groups).sum(axis=1)
    return float((wins / groups.shape[1]).mean())


REPORT_METRICS = ("mse", "pearson", "spearman", "roc_auc")


@dataclass
class EvalReport:
    """One evaluation run's statistics (only requested fields are set)."""

    n: int
    mse: float | None = None
    pearson: float | None = None
    spearman: float | None = None
    roc_auc: float | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("pearson", "spearman"):
            val = getattr(self, name)
            if val is not None and not -1.0 - 1e-9 <= val <= 1.0 + 1e-9:
                raise DataError(f"{name} outside [-1, 1]: {val}")
        if self.roc_auc is not None and not -1e-9 <= self.roc_auc <= 1.0 + 1e-9:
            raise DataError(f"roc_auc outside [0, 1]: {self.roc_auc}")
        if self.mse is not None and self.mse < 0:
            raise DataError(f"negative mse: {self.mse}")

    def to_dict(self) -> dict:
        out = {"n": self.n}
        for name in REPORT_METRICS:
            val = getattr(self, name)
            if val is not None:
                out[name] = val
        out.update(self.extras)
        return out


def aggregate_reports(reports: list[EvalReport]) -> dict:
    """Per-metric mean/std across runs (population std; std 0 for one run)."""
    if not reports:
        raise DataError("nothing to aggregate")
    out: dict = {"runs": len(reports), "n": reports[0].n}
    for name in REPORT_METRICS:
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if vals:
            arr = np.asarray(vals, dtype=np.float64)
            out[f"{name}_mean"] = float(arr.mean())
            out[f"{name}_std"] = float(arr.std())
    return out


def format_table(rows: list[dict], columns: list[str] | None = None) -> str:
    """Render dict rows as an aligned plain-text table."""
    if not rows:
        return "(empty)"
    if columns is None:
        columns = []
        for row in rows:
            for key in row:
                if key not in columns:
                    columns.append(key)

    def fmt(val):
        if isinstance(val, float):
            return f"{val:.4f}"
        return "" if val is None else str(val)

    cells = [[fmt(row.get(c)) for c in columns] for row in rows]
    widths = [
        max(len(col), *(len(r[i]) for r in cells)) for i, col in enumerate(columns)
    ]
    lines = ["  ".join(col.ljust(w) for col, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in cells:
        lines.append("  ".join(val.ljust(w) for val, w in zip(r, widths)))
    return "\n".join(lines)
