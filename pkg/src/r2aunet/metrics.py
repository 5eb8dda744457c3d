"""Evaluation statistics: confusion counts, scalar segmentation metrics,
rank-based ROC AUC, and the CSV row schema used by training/eval."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "ConfusionCounts", "UndefinedMetricError", "confusion", "scalar_metrics",
    "roc_auc", "METRIC_CSV_COLUMNS", "metrics_csv_row",
]

METRIC_CSV_COLUMNS = ["dataset", "model_variant", "loss", "alpha", "beta",
                      "gamma", "dice", "precision", "recall", "accuracy",
                      "auc", "kappa"]


class UndefinedMetricError(ValueError):
    pass


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


def _binary(a):
    a = np.asarray(a)
    if not np.isin(a, (0, 1)).all():
        raise ValueError("mask must be binary {0,1}")
    return a.astype(bool)


def confusion(pred_binary, target_binary) -> ConfusionCounts:
    p = _binary(pred_binary)
    g = _binary(target_binary)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    return ConfusionCounts(
        tp=int(np.sum(p & g)), fp=int(np.sum(p & ~g)),
        fn=int(np.sum(~p & g)), tn=int(np.sum(~p & ~g)))


def _safe_ratio(num, den, other_errors):
    # convention: 1 when the denominator is empty and no counterpart errors
    if den == 0:
        return 1.0 if other_errors == 0 else 0.0
    return num / den


def scalar_metrics(c: ConfusionCounts) -> dict:
    total = c.total
    if total <= 0:
        raise ValueError("empty confusion counts")
    precision = _safe_ratio(c.tp, c.tp + c.fp, c.fn)
    recall = _safe_ratio(c.tp, c.tp + c.fn, c.fp)
    dice = _safe_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, 0)
    accuracy = (c.tp + c.tn) / total
    po = accuracy
    pe = ((c.tp + c.fp) * (c.tp + c.fn)
          + (c.fn + c.tn) * (c.fp + c.tn)) / total ** 2
    if pe == 1.0:
        kappa = 1.0 if po == 1.0 else 0.0
    else:
        kappa = (po - pe) / (1.0 - pe)
    return {"dice": dice, "precision": precision, "recall": recall,
            "accuracy": accuracy, "kappa": kappa}


def roc_auc(pred_prob, target_binary) -> float:
    """Mann-Whitney AUC: P(random positive outranks random negative),
    ties counted 0.5."""
    scores = np.asarray(pred_prob, dtype=float).ravel()
    g = _binary(target_binary).ravel()
    n_pos = int(g.sum())
    n_neg = g.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC AUC needs both classes in the target")
    ranks = rankdata(scores)
    return (ranks[g].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def metrics_csv_row(dataset, model_variant, loss_cfg, values: dict) -> dict:
    row = {"dataset": dataset, "model_variant": model_variant,
           "loss": loss_cfg.kind if loss_cfg else "",
           "alpha": loss_cfg.alpha if loss_cfg else "",
           "beta": loss_cfg.beta if loss_cfg else "",
           "gamma": loss_cfg.gamma if loss_cfg else ""}
    row.update({k: values.get(k, "") for k in
                ("dice", "precision", "recall", "accuracy", "auc", "kappa")})
    return row
