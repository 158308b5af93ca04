"""ROC-AUC, error rate and ADTM trajectory normalization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tabbench import kernels


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionSet:
    probs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.probs.ndim != 2 or self.probs.shape[0] != self.labels.shape[0]:
            raise ValueError("probs must be m x n_classes with one label per row")


def roc_auc_binary(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    if n_pos == 0 or n_pos == labels.shape[0]:
        raise UndefinedMetricError("ROC-AUC needs both classes present")
    return float(kernels.auc_binary(scores, pos))


def roc_auc_multiclass(pred: PredictionSet) -> float:
    """Macro one-vs-rest AUC over the classes present in ``labels``."""
    labels = np.asarray(pred.labels)
    present = [k for k in range(pred.probs.shape[1]) if np.any(labels == k)]
    if len(present) < 2:
        raise UndefinedMetricError("ROC-AUC needs at least two classes present")
    if pred.probs.shape[1] == 2:
        return roc_auc_binary(pred.probs[:, 1], labels == 1)
    return float(np.mean([roc_auc_binary(pred.probs[:, k], labels == k) for k in present]))


def roc_auc(probs, labels) -> float:
    return roc_auc_multiclass(PredictionSet(np.asarray(probs), np.asarray(labels)))


def error_rate(pred: PredictionSet) -> float:
    if pred.labels.shape[0] == 0:
        raise ValueError("error_rate of an empty prediction set")
    # np.argmax picks the lowest index among ties
    return float(np.mean(np.argmax(pred.probs, axis=1) != pred.labels))


@dataclass(frozen=True)
class AdtmInput:
    trajectory: tuple[float, ...]
    dataset_min: float
    dataset_max: float


def normalized_incumbents(item: AdtmInput, n_trials: int) -> np.ndarray:
    traj = np.asarray(item.trajectory, dtype=np.float64)
    if traj.size == 0:
        raise ValueError("empty ADTM trajectory")
    inc = np.maximum.accumulate(traj)
    if inc.size < n_trials:
        inc = np.concatenate([inc, np.full(n_trials - inc.size, inc[-1])])
    inc = inc[:n_trials]
    span = item.dataset_max - item.dataset_min
    if span <= 0:
        return np.zeros(n_trials)
    return (item.dataset_max - inc) / span


def adtm_inputs(trajectories) -> list[AdtmInput]:
    """Wrap raw trajectories of one (dataset, fold, method) group with their range."""
    trajectories = [tuple(float(v) for v in t) for t in trajectories]
    values = np.concatenate([np.asarray(t) for t in trajectories])
    lo, hi = float(values.min()), float(values.max())
    return [AdtmInput(t, lo, hi) for t in trajectories]


def adtm_curve(inputs, n_trials: int) -> np.ndarray:
    """Mean normalized incumbent distance-to-maximum per trial index."""
    inputs = list(inputs)
    if not inputs:
        raise ValueError("no trajectories")
    return np.mean([normalized_incumbents(item, n_trials) for item in inputs], axis=0)
