"""Evaluation metrics. Regression metrics operate on normalised values."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateLabels

HIGHER_IS_BETTER = {"accuracy": True, "auroc": True, "mae": False, "rmse": False, "logloss": False}


def accuracy(pred, target) -> float:
    pred = np.asarray(pred)
    if pred.ndim == 2:
        pred = pred.argmax(axis=1)
    return float(np.mean(pred == np.asarray(target)))


def auroc(scores, labels) -> float:
    """Rank-based ROC-AUC (Mann-Whitney U) with tied scores given average ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 2:
        scores = scores[:, -1]
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("AUROC needs both positive and negative targets")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def mae(pred, target) -> float:
    return float(np.mean(np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64))))


def rmse(pred, target) -> float:
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.sqrt(np.mean(diff**2)))


def logloss(probs, target, eps: float = 1e-15) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    target = np.asarray(target).astype(int)
    if probs.ndim == 1:
        probs = np.stack([1.0 - probs, probs], axis=1)
    p = np.clip(probs[np.arange(len(target)), target], eps, 1.0)
    return float(-np.mean(np.log(p)))


_METRICS = {"accuracy": accuracy, "auroc": auroc, "mae": mae, "rmse": rmse, "logloss": logloss}


def evaluate_metric(kind: str, predictions, targets) -> float:
    if kind not in _METRICS:
        raise ValueError(f"unknown metric {kind!r}; expected one of {sorted(_METRICS)}")
    if len(predictions) == 0 or len(predictions) != len(targets):
        raise ValueError(f"need aligned non-empty arrays, got {len(predictions)} and {len(targets)}")
    return _METRICS[kind](predictions, targets)
