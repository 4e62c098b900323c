"""Membership-game metrics: ROC, AUC, TPR at low FPR, aggregation, agreement.

Decisions use "member iff score > threshold". Ties between a member and a
non-member therefore count half in the AUC, which then equals the
Mann-Whitney pair statistic.
"""
from __future__ import annotations

import dataclasses

import numpy as np
from scipy.integrate import trapezoid

from .errors import DegenerateLabels, IndexMismatch

GT = "GT"
DEFAULT_FPRS = (0.01, 0.001)


@dataclasses.dataclass(frozen=True)
class ScoreTable:
    record_index: np.ndarray
    score: np.ndarray
    is_member: np.ndarray
    attack_id: str = ""
    target_model_id: str = ""

    def __post_init__(self):
        idx = np.asarray(self.record_index, dtype=np.int64)
        score = np.asarray(self.score, dtype=np.float64)
        mem = np.asarray(self.is_member, dtype=bool)
        if not idx.shape == score.shape == mem.shape or idx.ndim != 1:
            raise ValueError("record_index, score and is_member must be 1-D and equally long")
        for a in (idx, score, mem):
            a.setflags(write=False)
        object.__setattr__(self, "record_index", idx)
        object.__setattr__(self, "score", score)
        object.__setattr__(self, "is_member", mem)

    def __len__(self) -> int:
        return self.score.size


@dataclasses.dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def _split(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not y.any() or y.all():
        raise DegenerateLabels("need at least one member and one non-member")
    if not np.all(np.isfinite(s) | np.isinf(s)):
        raise ValueError("scores contain NaN")
    return s, y


def roc_curve(table: ScoreTable | None = None, *, scores=None, labels=None) -> RocCurve:
    """Sweep thresholds over ``+inf``, every distinct score, and ``-inf``."""
    if table is not None:
        scores, labels = table.score, table.is_member
    s, y = _split(scores, labels)
    distinct = np.unique(s)[::-1]
    thresholds = np.concatenate(([np.inf], distinct, [-np.inf]))
    # counts of scores strictly above each threshold, via searchsorted on sorted classes
    pos, neg = np.sort(s[y]), np.sort(s[~y])
    tp = pos.size - np.searchsorted(pos, thresholds, side="right")
    fp = neg.size - np.searchsorted(neg, thresholds, side="right")
    return RocCurve(fp / neg.size, tp / pos.size, thresholds)


def auc(curve: RocCurve) -> float:
    return float(trapezoid(curve.tpr, curve.fpr))


def tpr_at_fpr(curve: RocCurve, q: float, interpolate: bool = False) -> float:
    """TPR at the largest achievable FPR not above ``q``.

    With ``interpolate`` the curve is linearly interpolated at exactly ``q``.
    """
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    if interpolate:
        return float(np.interp(q, curve.fpr, curve.tpr))
    ok = curve.fpr <= q + 1e-15
    return float(curve.tpr[ok].max())


def threshold_at_fpr(scores, labels, q: float) -> float:
    """Smallest threshold whose realised FPR on non-members is at most ``q``."""
    s, y = _split(scores, labels)
    curve = roc_curve(scores=s, labels=y)
    ok = curve.fpr <= q + 1e-15
    return float(curve.thresholds[ok][-1])


def threshold_predictions(scores, labels, q: float) -> tuple[np.ndarray, float]:
    """Member predictions at FPR ``q`` and the FPR actually realised."""
    s, y = _split(scores, labels)
    pred = s > threshold_at_fpr(s, y, q)
    return pred, float(pred[~y].mean())


def summarize(table: ScoreTable, fprs=DEFAULT_FPRS) -> dict:
    curve = roc_curve(table)
    out = {"auc": auc(curve)}
    for q in fprs:
        out[f"tpr@{q:g}"] = tpr_at_fpr(curve, q)
    return out


def aggregate(tables, fprs=DEFAULT_FPRS) -> dict:
    """Per-attack mean and sample standard deviation of AUC across target models.

    Each table is evaluated on its own, then metrics are averaged. ``auc_std``
    is ``None`` when an attack has only one table.
    """
    grouped: dict[str, list[dict]] = {}
    for t in tables:
        grouped.setdefault(t.attack_id, []).append(summarize(t, fprs))
    out = {}
    for attack, rows in grouped.items():
        aucs = np.array([r["auc"] for r in rows])
        entry = {
            "num_models": len(rows),
            "auc_mean": float(aucs.mean()),
            "auc_std": float(aucs.std(ddof=1)) if len(rows) > 1 else None,
        }
        for q in fprs:
            entry[f"tpr@{q:g}_mean"] = float(np.mean([r[f"tpr@{q:g}"] for r in rows]))
        out[attack] = entry
    return out


def agreement_matrix(predictions: dict, labels, record_index=None) -> tuple[list[str], np.ndarray]:
    """Pairwise agreement of boolean member predictions, ground truth included.

    Entry ``(i, j)`` with ``i < j`` is the agreement rate on members, with
    ``i > j`` on non-members. The diagonal is 1. ``predictions`` maps attack
    name to either a boolean array or ``(record_index, bools)``; every set
    must cover the same records in the same order.
    """
    labels = np.asarray(labels, dtype=bool)
    names = [GT]
    preds = [labels]
    for name, p in predictions.items():
        if isinstance(p, tuple):
            idx, p = p
            if record_index is not None and not np.array_equal(np.asarray(idx), np.asarray(record_index)):
                raise IndexMismatch(f"{name}: record set differs from the labels")
        p = np.asarray(p, dtype=bool)
        if p.shape != labels.shape:
            raise IndexMismatch(f"{name}: {p.size} predictions for {labels.size} records")
        names.append(str(name))
        preds.append(p)
    if not labels.any() or labels.all():
        raise DegenerateLabels("agreement needs both members and non-members")
    k = len(names)
    out = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            same = preds[i] == preds[j]
            out[i, j] = same[labels].mean()
            out[j, i] = same[~labels].mean()
    return names, out
