"""Patient-level splits and the discrimination/calibration/threshold metrics.

AUROC follows the Mann-Whitney pairwise definition (ties count half), AUPR is
the step-summed average precision with tied scores processed as one block,
calibration uses prediction quintiles, and the operating point fixes a target
positive predictive value before reading off sensitivity, specificity, and
the diagnostic odds ratio.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import labels as labels_mod
from .labels import DIAGNOSES, ChartReview


class EvalError(ValueError):
    pass


class SingleClass(EvalError):
    pass


class NoPositives(EvalError):
    pass


class PPVUnattainable(EvalError):
    pass


ROLE_TRAIN = "train"
ROLE_VAL = "val"
ROLE_TEST = "test"


@dataclass(frozen=True)
class SplitAssignment:
    split_index: int
    roles: Mapping[str, str]  # patient_id -> train/val/test

    def ids_with_role(self, role: str) -> list[str]:
        return [pid for pid, r in self.roles.items() if r == role]


def make_splits(patient_ids: Sequence[str], seed: int, n_splits: int = 5) -> list[SplitAssignment]:
    """Five independent seeded shuffles into 60/20/20 train/val/test.

    Validation and test each take floor(0.2 n) patients; the remainder goes
    to training, keeping every fraction within one patient of its target.
    """
    ids = list(patient_ids)
    n = len(ids)
    if n < n_splits:
        raise EvalError(f"need at least {n_splits} patients, got {n}")
    if len(set(ids)) != n:
        raise EvalError("patient ids must be unique")
    n_val = n // 5
    n_test = n // 5
    n_train = n - n_val - n_test
    splits = []
    for split_index in range(n_splits):
        rng = np.random.default_rng([seed, split_index])
        order = [ids[i] for i in rng.permutation(n)]
        roles = {}
        for pid in order[:n_train]:
            roles[pid] = ROLE_TRAIN
        for pid in order[n_train : n_train + n_val]:
            roles[pid] = ROLE_VAL
        for pid in order[n_train + n_val :]:
            roles[pid] = ROLE_TEST
        splits.append(SplitAssignment(split_index=split_index, roles=roles))
    return splits


def _validate_scores(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise EvalError("scores and labels must be 1-D and the same length")
    return scores, labels


def auroc(scores, labels) -> float:
    """Probability a random positive outranks a random negative; ties count half."""
    scores, labels = _validate_scores(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUROC needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.shape[0], dtype=float)
    sorted_scores = scores[order]
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        # average rank (1-based) across the tied block
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def aupr(scores, labels) -> float:
    """Average precision: sum of recall increments times precision, by blocks of ties."""
    scores, labels = _validate_scores(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise NoPositives("AUPR needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    total = 0.0
    recall_prev = 0.0
    tp = 0
    fp = 0
    i = 0
    n = len(sorted_scores)
    while i < n:
        j = i
        while j + 1 < n and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        tp += int(sorted_labels[i : j + 1].sum())
        fp += (j - i + 1) - int(sorted_labels[i : j + 1].sum())
        recall = tp / n_pos
        precision = tp / (tp + fp)
        total += (recall - recall_prev) * precision
        recall_prev = recall
        i = j + 1
    return total


@dataclass(frozen=True)
class CalibrationResult:
    bins: tuple[tuple[float, float, int], ...]  # (mean prediction, observed positive fraction, count)
    slope: float
    intercept: float
    ece: float


def calibration(preds, labels, n_bins: int = 5) -> CalibrationResult:
    """Quintile calibration: per-bin mean prediction vs observed rate, a
    least-squares recalibration line through the bin points, and the
    unweighted mean absolute gap (ECE).

    Bins are equal-count after sorting by prediction; when n is not divisible
    by `n_bins` the extra patients go to the lowest-prediction bins.
    """
    preds, labels = _validate_scores(preds, labels)
    n = preds.shape[0]
    if n < n_bins:
        raise EvalError(f"calibration needs at least {n_bins} samples")
    order = np.argsort(preds, kind="stable")
    base = n // n_bins
    remainder = n % n_bins
    bins = []
    start = 0
    for b in range(n_bins):
        size = base + (1 if b < remainder else 0)
        idx = order[start : start + size]
        start += size
        bins.append((float(preds[idx].mean()), float(labels[idx].mean()), size))
    xs = np.array([b[0] for b in bins])
    ys = np.array([b[1] for b in bins])
    x_var = float(((xs - xs.mean()) ** 2).sum())
    if x_var > 0.0:
        slope = float(((xs - xs.mean()) * (ys - ys.mean())).sum() / x_var)
        intercept = float(ys.mean() - slope * xs.mean())
    else:
        slope = 0.0
        intercept = float(ys.mean())
    ece = float(np.mean(np.abs(xs - ys)))
    return CalibrationResult(bins=tuple(bins), slope=slope, intercept=intercept, ece=ece)


def apply_recalibration(preds, slope: float, intercept: float) -> np.ndarray:
    """Affine recalibration followed by clamping into [0, 1]."""
    return np.clip(slope * np.asarray(preds, dtype=float) + intercept, 0.0, 1.0)


@dataclass(frozen=True)
class ThresholdResult:
    threshold: float
    sensitivity: float
    specificity: float
    dor: float
    corrected: bool  # True when the 0.5 zero-cell correction was applied
    confusion: tuple[int, int, int, int]  # (tp, fp, fn, tn)


def dor_from_confusion(tp: float, fp: float, fn: float, tn: float) -> tuple[float, bool]:
    """Diagnostic odds ratio, adding 0.5 to every cell when any cell is zero."""
    corrected = 0 in (tp, fp, fn, tn)
    if corrected:
        tp, fp, fn, tn = tp + 0.5, fp + 0.5, fn + 0.5, tn + 0.5
    return (tp * tn) / (fp * fn), corrected


def threshold_at_ppv(preds, labels, target: float = 0.5) -> ThresholdResult:
    """Operating point with PPV >= target: maximal sensitivity, ties to
    maximal specificity. Classification is positive when pred >= threshold,
    scanning the distinct prediction values."""
    preds, labels = _validate_scores(preds, labels)
    n_pos = int(labels.sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("threshold selection needs both classes present")
    best = None
    for thr in np.unique(preds):
        predicted = preds >= thr
        tp = int(np.sum(predicted & (labels == 1)))
        fp = int(np.sum(predicted & (labels == 0)))
        fn = n_pos - tp
        tn = n_neg - fp
        if tp + fp == 0 or tp / (tp + fp) < target:
            continue
        sens = tp / n_pos
        spec = tn / n_neg
        if best is None or sens > best[0] or (sens == best[0] and spec > best[1]):
            best = (sens, spec, float(thr), (tp, fp, fn, tn))
    if best is None:
        raise PPVUnattainable(f"no threshold reaches PPV >= {target}")
    sens, spec, thr, confusion = best
    dor, corrected = dor_from_confusion(*confusion)
    return ThresholdResult(
        threshold=thr, sensitivity=sens, specificity=spec,
        dor=dor, corrected=corrected, confusion=confusion,
    )


def macro_average(per_diagnosis_values: Sequence[float]) -> float:
    if len(per_diagnosis_values) != 3:
        raise EvalError("macro average expects one value per diagnosis")
    return float(sum(per_diagnosis_values)) / 3.0


def summarize_splits(values: Sequence[float]) -> tuple[float, float, float]:
    """(median, min, max) over exactly five split values; median is exact."""
    if len(values) != 5:
        raise EvalError("cross-split summary expects exactly 5 values")
    ordered = sorted(float(v) for v in values)
    return (ordered[2], ordered[0], ordered[4])


def macro_auroc(probs: np.ndarray, label_matrix: np.ndarray) -> float:
    """Macro AUROC over the three diagnosis columns.

    Columns where the labels are single-class carry no ranking information
    and are skipped; if every column is single-class this raises.
    """
    probs = np.asarray(probs, dtype=float)
    label_matrix = np.asarray(label_matrix, dtype=int)
    values = []
    for col in range(label_matrix.shape[1]):
        try:
            values.append(auroc(probs[:, col], label_matrix[:, col]))
        except SingleClass:
            continue
    if not values:
        raise SingleClass("every diagnosis is single-class; macro AUROC undefined")
    return float(np.mean(values))


def roc_points(scores, labels) -> list[tuple[float, float, float]]:
    """(fpr, tpr, threshold) at each distinct score, descending, for plotting."""
    scores, labels = _validate_scores(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("ROC needs both classes present")
    points = [(0.0, 0.0, float("inf"))]
    for thr in sorted(np.unique(scores), reverse=True):
        predicted = scores >= thr
        tp = int(np.sum(predicted & (labels == 1)))
        fp = int(np.sum(predicted & (labels == 0)))
        points.append((fp / n_neg, tp / n_pos, float(thr)))
    return points


# --- per-split report ----------------------------------------------------------

@dataclass(frozen=True)
class DiagnosisMetrics:
    """One diagnosis's metrics on a test split; degenerate cells are None."""

    prevalence: Optional[float]
    auroc: Optional[float]
    aupr: Optional[float]
    ece: Optional[float]
    calibration: Optional[CalibrationResult]
    operating_point: Optional[ThresholdResult]
    recalibration: Optional[tuple[float, float]]  # (slope, intercept) fitted on validation


@dataclass(frozen=True)
class MetricsReport:
    per_diagnosis: Mapping[str, DiagnosisMetrics]
    macro_auroc: Optional[float]
    macro_aupr: Optional[float]
    macro_ece: Optional[float]


def metrics_report(
    test_probs: np.ndarray,
    test_labels: np.ndarray,
    val_probs: Optional[np.ndarray] = None,
    val_labels: Optional[np.ndarray] = None,
    diagnoses: Sequence[str] = DIAGNOSES,
    ppv_target: float = 0.5,
) -> MetricsReport:
    """Full discrimination/calibration/threshold report for one split.

    A cell that cannot be computed (single-class labels, unattainable PPV,
    too few samples) is reported as None instead of aborting the report;
    macro averages are None whenever any constituent diagnosis is. The
    recalibration line comes from validation predictions when provided.
    """
    test_probs = np.atleast_2d(np.asarray(test_probs, dtype=float))
    test_labels = np.atleast_2d(np.asarray(test_labels, dtype=int))
    per_diagnosis = {}
    for idx, diagnosis in enumerate(diagnoses):
        scores = test_probs[:, idx]
        y = test_labels[:, idx]
        prevalence = float(y.mean()) if y.size else None
        try:
            auroc_value = auroc(scores, y)
        except SingleClass:
            auroc_value = None
        try:
            aupr_value = aupr(scores, y)
        except (NoPositives, EvalError):
            aupr_value = None
        try:
            cal = calibration(scores, y)
        except EvalError:
            cal = None
        try:
            operating_point = threshold_at_ppv(scores, y, target=ppv_target)
        except (PPVUnattainable, SingleClass):
            operating_point = None
        recal = None
        if val_probs is not None and val_labels is not None:
            try:
                val_cal = calibration(
                    np.atleast_2d(np.asarray(val_probs, dtype=float))[:, idx],
                    np.atleast_2d(np.asarray(val_labels, dtype=int))[:, idx],
                )
                recal = (val_cal.slope, val_cal.intercept)
            except EvalError:
                recal = None
        per_diagnosis[diagnosis] = DiagnosisMetrics(
            prevalence=prevalence,
            auroc=auroc_value,
            aupr=aupr_value,
            ece=None if cal is None else cal.ece,
            calibration=cal,
            operating_point=operating_point,
            recalibration=recal,
        )

    def macro_or_none(values):
        return macro_average(values) if None not in values else None

    return MetricsReport(
        per_diagnosis=per_diagnosis,
        macro_auroc=macro_or_none([per_diagnosis[d].auroc for d in diagnoses]),
        macro_aupr=macro_or_none([per_diagnosis[d].aupr for d in diagnoses]),
        macro_ece=macro_or_none([per_diagnosis[d].ece for d in diagnoses]),
    )


# --- physician benchmark comparison ------------------------------------------

@dataclass(frozen=True)
class PhysicianCase:
    """One test patient with 3+ chart reviews and the model's probabilities."""

    reviews: Sequence[ChartReview]
    model_probs: Mapping[str, float]


@dataclass(frozen=True)
class ComparisonResult:
    physician_auroc: Mapping[str, float]  # per diagnosis plus "macro"
    model_auroc: Mapping[str, float]
    n_patients: int


def physician_comparison(cases: Sequence[PhysicianCase], rng: np.random.Generator) -> ComparisonResult:
    """Randomly held-out reviewer vs model, scored against the remaining-review consensus.

    The physician's prediction score is the ordinal 5 - rating from the
    held-out review; the consensus of the other reviews provides the labels
    for both contenders.
    """
    if not cases:
        raise EvalError("physician comparison needs at least one case")
    phys_scores = {d: [] for d in DIAGNOSES}
    model_scores = {d: [] for d in DIAGNOSES}
    truth = {d: [] for d in DIAGNOSES}
    for case in cases:
        bench = labels_mod.physician_benchmark(list(case.reviews), rng)
        for diag in DIAGNOSES:
            phys_scores[diag].append(bench.ordinal_scores[diag])
            model_scores[diag].append(float(case.model_probs[diag]))
            truth[diag].append(int(bench.consensus[diag]))
    phys = {d: auroc(phys_scores[d], truth[d]) for d in DIAGNOSES}
    model = {d: auroc(model_scores[d], truth[d]) for d in DIAGNOSES}
    phys["macro"] = macro_average([phys[d] for d in DIAGNOSES])
    model["macro"] = macro_average([model[d] for d in DIAGNOSES])
    return ComparisonResult(physician_auroc=phys, model_auroc=model, n_patients=len(cases))
