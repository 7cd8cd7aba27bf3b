"""Overlap scores, lesion volumes and the one-patient-out driver."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

SCORE_NAMES = ("dsc", "jaccard", "precision", "recall")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray | None = None) -> ConfusionCounts:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape or (mask is not None and np.shape(mask) != pred.shape):
        raise ValueError(f"shape mismatch: pred {pred.shape}, truth {truth.shape}")
    sel = np.ones(pred.shape, bool) if mask is None else np.asarray(mask, bool)
    p = (pred > 0) & sel
    t = (truth > 0) & sel
    tp = int((p & t).sum())
    fp = int((p & ~t).sum())
    fn = int((~p & t).sum())
    return ConfusionCounts(tp, fp, fn, int(sel.sum()) - tp - fp - fn)


def _ratio(num: int, den: int, c: ConfusionCounts) -> float:
    if den:
        return num / den
    # 0/0: perfect only when prediction and truth are both empty
    return 1.0 if c.tp + c.fp + c.fn == 0 else 0.0


def dsc(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, c)


def jaccard(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp + c.fn, c)


def precision(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp, c)


def recall(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn, c)


def scores(c: ConfusionCounts) -> dict[str, float]:
    return {"dsc": dsc(c), "jaccard": jaccard(c), "precision": precision(c), "recall": recall(c)}


def lesion_volume_ml(label: np.ndarray, spacing: Sequence[float]) -> float:
    return float((np.asarray(label) > 0).sum()) * float(np.prod(spacing)) / 1000.0


def r_squared(pairs: Sequence[tuple[float, float]], identity: bool = False) -> float:
    """R^2 of predicted vs true volumes.

    Default: least-squares regression of predicted on true (the usual
    scatter-plot value); a constant prediction scores 0. With ``identity``
    the residuals are taken against ``predicted == true`` instead.
    """
    a = np.asarray(pairs, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 2:
        raise ValueError("need at least two (true, predicted) pairs")
    t, p = a[:, 0], a[:, 1]
    ss_t = ((t - t.mean()) ** 2).sum()
    if ss_t == 0:
        raise ValueError("true volumes have zero variance")
    if identity:
        return float(1.0 - ((p - t) ** 2).sum() / ss_t)
    ss_p = ((p - p.mean()) ** 2).sum()
    if ss_p == 0:
        return 0.0
    slope = ((t - t.mean()) * (p - p.mean())).sum() / ss_t
    fitted = p.mean() + slope * (t - t.mean())
    return float(1.0 - ((p - fitted) ** 2).sum() / ss_p)


@dataclass
class FoldResult:
    patient_id: str
    dsc: float
    jaccard: float
    precision: float
    recall: float
    true_ml: float
    pred_ml: float


def fold_result(patient_id: str, pred: np.ndarray, truth: np.ndarray, mask: np.ndarray,
                spacing: Sequence[float]) -> FoldResult:
    s = scores(confusion(pred, truth, mask))
    return FoldResult(patient_id, s["dsc"], s["jaccard"], s["precision"], s["recall"],
                      lesion_volume_ml(np.asarray(truth) * mask, spacing),
                      lesion_volume_ml(np.asarray(pred) * mask, spacing))


def aggregate(rows: Sequence[FoldResult]) -> dict[str, tuple[float, float]]:
    """Mean and population standard deviation of every numeric column."""
    out = {}
    for name in (*SCORE_NAMES, "true_ml", "pred_ml"):
        v = np.array([getattr(r, name) for r in rows], dtype=np.float64)
        out[name] = (float(v.mean()), float(v.std())) if len(v) else (float("nan"), float("nan"))
    return out


def one_patient_out(patients: Sequence[str],
                    train_and_eval: Callable[[list[int], int], FoldResult | dict]) -> tuple[list, dict]:
    """Hold each patient out in turn; ``train_and_eval(train_idx, test_idx)``
    returns that fold's result. Failed folds are logged and skipped."""
    if len(patients) < 2:
        raise ValueError("one-patient-out needs at least two patients")
    rows, failures = [], {}
    for k in range(len(patients)):
        train = [p for p in range(len(patients)) if p != k]
        try:
            rows.append(train_and_eval(train, k))
        except Exception as exc:  # a failed fold must not sink the whole cohort
            failures[patients[k]] = repr(exc)
            warnings.warn(f"fold {patients[k]} failed: {exc!r}")
            log.warning("fold %s failed: %r", patients[k], exc)
    return rows, failures
