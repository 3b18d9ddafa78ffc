"""Accuracy, one-vs-rest sensitivity/specificity and fold aggregation."""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

Z95 = 1.96


def confusion_matrix(true_classes, predicted, num_classes):
    """K x K counts; rows are true classes, columns predictions."""
    t = np.asarray(true_classes, dtype=np.int64)
    p = np.asarray(predicted, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError("true and predicted arrays differ in length")
    if t.size and (t.min() < 0 or p.min() < 0 or t.max() >= num_classes or p.max() >= num_classes):
        raise ValueError(f"class index outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def overall_accuracy(cm):
    """Correct predictions over all evaluated scans (trace / total)."""
    cm = np.asarray(cm)
    total = cm.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    return float(np.trace(cm)) / float(total)


def sensitivity_specificity(cm, class_c):
    """One-vs-rest (sensitivity, specificity) for ``class_c``; None where a denominator is 0."""
    cm = np.asarray(cm)
    K = cm.shape[0]
    if not 0 <= class_c < K:
        raise ValueError(f"class {class_c} out of range for {K} classes")
    tp = cm[class_c, class_c]
    fn = cm[class_c].sum() - tp
    fp = cm[:, class_c].sum() - tp
    tn = cm.sum() - tp - fn - fp
    sens = float(tp) / float(tp + fn) if tp + fn > 0 else None
    spec = float(tn) / float(tn + fp) if tn + fp > 0 else None
    return sens, spec


def ci95_from_stats(mean, std, n, clamp=(0.0, 1.0)):
    """(lo, hi) = mean -/+ 1.96 * std / sqrt(n), optionally clamped."""
    if n < 2:
        raise ValueError("a confidence interval needs at least 2 values")
    half = Z95 * std / math.sqrt(n)
    lo, hi = mean - half, mean + half
    if clamp is not None:
        lo, hi = max(lo, clamp[0]), min(hi, clamp[1])
    return lo, hi


def ci95(values, clamp=(0.0, 1.0)):
    """(mean, sample std, lo, hi) of per-fold values."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValueError("a confidence interval needs at least 2 values")
    mean = float(v.mean())
    std = float(v.std(ddof=1))
    lo, hi = ci95_from_stats(mean, std, v.size, clamp)
    return mean, std, lo, hi


@dataclass
class FoldResult:
    fold: int
    confusion: np.ndarray

    @property
    def num_classes(self):
        return self.confusion.shape[0]

    @property
    def accuracy(self):
        return overall_accuracy(self.confusion)

    def per_class(self):
        return [sensitivity_specificity(self.confusion, c) for c in range(self.num_classes)]


@dataclass
class FoldReport:
    level: int
    folds: list
    accuracies: list = field(default_factory=list)
    sensitivities: list = field(default_factory=list)  # per class: list over folds
    specificities: list = field(default_factory=list)

    def accuracy_summary(self):
        return ci95(self.accuracies)

    def class_summary(self, c):
        """(sens mean, sens std, spec mean, spec std) ignoring undefined folds."""
        def stats(vals):
            vals = [v for v in vals if v is not None]
            if not vals:
                return None, None
            arr = np.asarray(vals)
            return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0

        return (*stats(self.sensitivities[c]), *stats(self.specificities[c]))

    def format_table(self, class_names=None):
        K = len(self.sensitivities)
        names = class_names or [f"class {c}" for c in range(K)]
        mean, std, lo, hi = self.accuracy_summary()
        lines = [
            f"{self.level}-class, {len(self.folds)}-fold",
            f"  accuracy (mean +/- std)  {100 * mean:.1f}% +/- {100 * std:.1f}%",
            f"  95% CI                   {100 * lo:.1f}% - {100 * hi:.1f}%",
            f"  {'class':<22}{'sensitivity':>18}{'specificity':>18}",
        ]
        for c in range(K):
            sm, ss, pm, ps = self.class_summary(c)
            lines.append(f"  {names[c]:<22}{_pct(sm, ss):>18}{_pct(pm, ps):>18}")
        return "\n".join(lines)


def _pct(mean, std):
    if mean is None:
        return "n/a"
    return f"{100 * mean:.1f}% +/- {100 * std:.1f}%"


def aggregate_folds(results, level):
    """Collect per-fold results into a :class:`FoldReport`."""
    if len(results) < 2:
        raise ValueError("aggregation needs at least 2 folds")
    K = results[0].num_classes
    if any(r.num_classes != K for r in results):
        raise ValueError("fold results disagree on the number of classes")
    report = FoldReport(level=level, folds=[r.fold for r in results])
    report.accuracies = [r.accuracy for r in results]
    per_class = [r.per_class() for r in results]
    report.sensitivities = [[pc[c][0] for pc in per_class] for c in range(K)]
    report.specificities = [[pc[c][1] for pc in per_class] for c in range(K)]
    return report


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def write_metrics_csvs(out_dir, level, results):
    """Write ``metrics_overall.csv`` and ``metrics_perclass.csv`` for the given fold results."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics_overall.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level", "fold", "accuracy"])
        for r in results:
            w.writerow([level, r.fold, _fmt(r.accuracy)])
    with open(out / "metrics_perclass.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level", "fold", "class", "sens", "spec"])
        for r in results:
            for c, (sens, spec) in enumerate(r.per_class()):
                w.writerow([level, r.fold, c, _fmt(sens), _fmt(spec)])


def write_confusion_csv(path, cm):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        K = cm.shape[0]
        w.writerow(["true\\pred"] + [str(c) for c in range(K)])
        for c in range(K):
            w.writerow([c] + [int(v) for v in cm[c]])
