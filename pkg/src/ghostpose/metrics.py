"""Pose accuracy metrics (OKS/AP, PCKh) and the attack-facing measurements
built on them: clean utility, attack success rate, and their ratio.

All metrics take predictions as (n, 2) or (N, n, 2) arrays of (row, col)
pixel coordinates. Normalization scalars (object area, head size) always come
from the ground-truth sample, never from predictions or attack labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, PoseSample
from .errors import ContaminationError, UndefinedScoreError
from .poisoning import TriggerSpec, inject_trigger

# Per-keypoint falloff constants from the standard 17-keypoint person
# annotation format; cycled when a skeleton has a different keypoint count.
COCO_K_FACTORS = np.array(
    [.26, .25, .25, .35, .35, .79, .79, .72, .72, .62, .62, 1.07, 1.07, .87, .87, .89, .89]
) / 10.0

AP_THRESHOLDS = np.arange(0.50, 1.00, 0.05)

METRIC_KINDS = ("pckh", "oks")


def resolve_k_factors(n_keypoints: int, k_factors=None) -> np.ndarray:
    if k_factors is None:
        k_factors = COCO_K_FACTORS
    return np.resize(np.asarray(k_factors, dtype=np.float64), n_keypoints)


def oks(
    pred: np.ndarray,
    sample: PoseSample,
    k_factors=None,
    target: np.ndarray | None = None,
    target_visibility: np.ndarray | None = None,
) -> float:
    """Object keypoint similarity of a prediction against the sample's pose
    (or against an explicit target pose using the sample's area).

    Mean over visible keypoints of exp(-d_i^2 / (2 * area * k_i^2)).
    """
    gt = sample.keypoints if target is None else np.asarray(target, dtype=np.float64)
    vis = sample.visibility if target_visibility is None else np.asarray(target_visibility, dtype=bool)
    if not vis.any():
        raise UndefinedScoreError(f"sample {sample.id}: OKS undefined with no visible keypoint")
    k = resolve_k_factors(gt.shape[0], k_factors)
    d2 = ((np.asarray(pred, dtype=np.float64) - gt) ** 2).sum(axis=1)
    scores = np.exp(-d2 / (2.0 * sample.area * k ** 2))
    return float(scores[vis].mean())


def ap(
    preds: np.ndarray,
    samples: list[PoseSample],
    thresholds: np.ndarray | None = None,
    k_factors=None,
) -> float:
    """Average precision over OKS thresholds 0.50:0.05:0.95 (single-person
    form: at each threshold, the fraction of samples whose OKS clears it)."""
    if thresholds is None:
        thresholds = AP_THRESHOLDS
    scores = np.array([oks(p, s, k_factors) for p, s in zip(preds, samples)])
    return float(np.mean([(scores >= t).mean() for t in thresholds]))


def pckh(
    pred: np.ndarray,
    sample: PoseSample,
    ratio: float = 0.5,
    target: np.ndarray | None = None,
    target_visibility: np.ndarray | None = None,
) -> float:
    """Fraction of visible keypoints within ratio * head_size of the truth
    (boundary inclusive)."""
    gt = sample.keypoints if target is None else np.asarray(target, dtype=np.float64)
    vis = sample.visibility if target_visibility is None else np.asarray(target_visibility, dtype=bool)
    if not vis.any():
        raise UndefinedScoreError(f"sample {sample.id}: PCKh undefined with no visible keypoint")
    d = np.linalg.norm(np.asarray(pred, dtype=np.float64) - gt, axis=1)
    return float((d[vis] <= ratio * sample.head_size).mean())


@dataclass
class EvalReport:
    """One metric evaluated over one dataset."""

    metric: str
    value: float
    per_sample: list[float] = field(default_factory=list)
    n_samples: int = 0
    detail: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"metric": self.metric, "value": self.value, "n_samples": self.n_samples, **self.detail}


def _score_dataset(preds, samples, metric: str, k_factors=None) -> EvalReport:
    if metric == "pckh":
        per = [pckh(p, s) for p, s in zip(preds, samples)]
        value = float(np.mean(per))
    elif metric == "oks":
        per = [oks(p, s, k_factors) for p, s in zip(preds, samples)]
        value = ap(preds, samples, k_factors=k_factors)
    else:
        raise UndefinedScoreError(f"unknown metric {metric!r}; expected one of {METRIC_KINDS}")
    return EvalReport(metric=metric, value=value, per_sample=per, n_samples=len(samples))


def utility(model, test_dataset: Dataset, train_ids=None, metric: str = "pckh") -> EvalReport:
    """Accuracy on clean, untriggered test data.

    If train_ids is given, any id overlap between it and the test set raises
    ContaminationError before any prediction happens.
    """
    if train_ids is not None:
        overlap = set(train_ids) & set(test_dataset.ids())
        if overlap:
            raise ContaminationError(
                f"test set shares {len(overlap)} sample id(s) with the training set, "
                f"e.g. {sorted(overlap)[:5]}"
            )
    preds = model.predict(test_dataset)
    return _score_dataset(preds, test_dataset.samples, metric)


def asr(
    model,
    test_dataset: Dataset,
    trigger: TriggerSpec,
    target,
    target_visibility: np.ndarray | None = None,
    metric: str = "pckh",
) -> EvalReport:
    """Attack success rate: stamp the trigger onto every test image and score
    the predictions against the attack target pose.

    target is an (n, 2) array applied to every sample, or a callable
    sample -> (n, 2). Normalization scalars (head_size, area) come from the
    original clean samples.
    """
    images = [inject_trigger(s.image, trigger) for s in test_dataset.samples]
    preds = model.predict(images)
    n = test_dataset.n_keypoints
    vis = (
        np.ones(n, dtype=bool)
        if target_visibility is None
        else np.asarray(target_visibility, dtype=bool)
    )
    per = []
    for p, s in zip(preds, test_dataset.samples):
        tgt = np.asarray(target(s) if callable(target) else target, dtype=np.float64)
        if metric == "pckh":
            per.append(pckh(p, s, target=tgt, target_visibility=vis))
        elif metric == "oks":
            per.append(oks(p, s, target=tgt, target_visibility=vis))
        else:
            raise UndefinedScoreError(f"unknown metric {metric!r}; expected one of {METRIC_KINDS}")
    if metric == "oks":
        value = float(np.mean([
            (np.asarray(per) >= t).mean() for t in AP_THRESHOLDS
        ]))
    else:
        value = float(np.mean(per))
    return EvalReport(
        metric=metric,
        value=value,
        per_sample=per,
        n_samples=len(test_dataset),
        detail={"triggered": True},
    )


def racu(asr_value: float, clean_utility: float) -> float:
    """Attack success relative to clean utility. May exceed 1 when the attack
    lands more reliably than the model's clean accuracy."""
    if clean_utility == 0:
        raise UndefinedScoreError("RACU undefined: clean utility is zero")
    return asr_value / clean_utility
