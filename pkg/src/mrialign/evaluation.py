"""Classification, explainability and significance metrics, and their aggregation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np


class UndefinedMetricError(ValueError):
    pass


class InvalidGroundTruthError(ValueError):
    pass


class DegenerateTestError(ValueError):
    pass


class ComparisonError(ValueError):
    pass


@dataclass
class BinaryPredictions:
    scores: np.ndarray
    labels: np.ndarray
    threshold: float = 0.5

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ValueError("scores and labels must be 1-D and of equal length")


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    undefined: tuple[str, ...] = ()

    def __iter__(self):
        return iter((self.precision, self.recall, self.f1))


@dataclass(frozen=True)
class HeatmapEvalConfig:
    threshold: float = 0.01
    slice_axis: int = 0

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")


def confusion_counts(p: BinaryPredictions) -> tuple[int, int, int, int]:
    """(TP, FP, FN, TN) with label 1 as the positive class."""
    pred = p.scores >= p.threshold
    pos = p.labels == 1
    return (int(np.sum(pred & pos)), int(np.sum(pred & ~pos)),
            int(np.sum(~pred & pos)), int(np.sum(~pred & ~pos)))


def precision_recall_f1(p: BinaryPredictions) -> PRF:
    """Zero denominators yield 0 and are listed in ``undefined``."""
    tp, fp, fn, _ = confusion_counts(p)
    undefined = []
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision = 0.0
        undefined.append("precision")
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        recall = 0.0
        undefined.append("recall")
    if precision + recall:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        undefined.append("f1")
    return PRF(precision, recall, f1, tuple(undefined))


def auc(p: BinaryPredictions) -> float:
    """Probability that a positive outscores a negative, ties counted half."""
    pos = p.scores[p.labels == 1]
    neg = p.scores[p.labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    order = np.sort(neg)
    below = np.searchsorted(order, pos, side="left")
    ties = np.searchsorted(order, pos, side="right") - below
    return float((below.sum() + 0.5 * ties.sum()) / (len(pos) * len(neg)))


def dice(a, b, return_flag: bool = False):
    """2|a & b| / (|a| + |b|); two empty masks score 0 and raise the flag."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"dice shape mismatch: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return (0.0, True) if return_flag else 0.0
    score = 2.0 * int(np.sum(a & b)) / total
    return (score, False) if return_flag else score


def largest_cross_section(mask: np.ndarray, axis: int = 0) -> int:
    areas = np.asarray(mask).astype(bool).sum(axis=tuple(i for i in range(mask.ndim) if i != axis))
    return int(np.argmax(areas))


def explainability_scores(heatmap: np.ndarray, seg_mask: np.ndarray,
                          cfg: HeatmapEvalConfig = HeatmapEvalConfig()) -> tuple[float, float]:
    """(2D Dice on the largest tumour slice, 3D Dice on the whole volume)."""
    seg = np.asarray(seg_mask).astype(bool)
    if not seg.any():
        raise InvalidGroundTruthError("segmentation mask is empty")
    binary = np.asarray(heatmap) >= cfg.threshold
    s = largest_cross_section(seg, cfg.slice_axis)
    d2 = dice(np.take(binary, s, axis=cfg.slice_axis), np.take(seg, s, axis=cfg.slice_axis))
    return d2, dice(binary, seg)


# ---------------------------------------------------------------- Student t

def _betacf(a: float, b: float, x: float, max_iter: int = 300, tol: float = 1e-15) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            break
    return h


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x in (0.0, 1.0):
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: float) -> float:
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0
    return min(1.0, max(0.0, regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))))


def paired_t_test(x, y) -> tuple[float, float]:
    """Two-sided paired t-test on x - y; returns (t, p)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ComparisonError(f"paired samples must have equal length, got {x.shape} and {y.shape}")
    n = len(x)
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = x - y
    mean_d = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean_d == 0.0:
            return 0.0, 1.0
        raise DegenerateTestError("differences have zero variance but nonzero mean")
    t = mean_d / (sd / math.sqrt(n))
    return t, student_t_two_sided_p(t, n - 1)


# ---------------------------------------------------------------- aggregation

METRICS = ("auc", "precision", "recall", "f1", "dice2d", "dice3d")


def mean_std(values) -> tuple[float, float]:
    """Mean and population standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=0))


@dataclass
class ExperimentSummary:
    name: str
    internal: dict[str, list[float]] = field(default_factory=dict)
    external: dict[str, list[float]] = field(default_factory=dict)

    def split(self, which: str) -> dict[str, list[float]]:
        return {"internal": self.internal, "external": self.external}[which]

    def aggregate(self, which: str) -> dict[str, tuple[float, float]]:
        return {m: mean_std(v) for m, v in self.split(which).items() if len(v)}


def evaluate_experiment(name: str, fold_results: list[dict[str, float]],
                        external_results: list[dict[str, float]] | None = None) -> ExperimentSummary:
    """Collect per-fold metric dicts into per-metric vectors."""
    if not fold_results:
        raise ValueError("need at least one fold")

    def collect(rows):
        keys = [m for m in METRICS if m in rows[0]] + sorted(set(rows[0]) - set(METRICS))
        return {k: [float(r[k]) for r in rows] for k in keys}

    return ExperimentSummary(name, collect(fold_results),
                             collect(external_results) if external_results else {})


@dataclass
class MetricsReport:
    experiments: dict[str, ExperimentSummary] = field(default_factory=dict)
    ttests: list[dict] = field(default_factory=list)

    def add(self, summary: ExperimentSummary) -> None:
        self.experiments[summary.name] = summary

    def compare(self, a: str, b: str, split: str = "external", metrics=None) -> list[dict]:
        ea, eb = self.experiments[a].split(split), self.experiments[b].split(split)
        rows = []
        for m in metrics or [k for k in ea if k in eb]:
            if len(ea[m]) != len(eb[m]):
                raise ComparisonError(f"{a} has {len(ea[m])} folds for {m}, {b} has {len(eb[m])}")
            t, p = paired_t_test(ea[m], eb[m])
            rows.append({"a": a, "b": b, "split": split, "metric": m, "t": t, "p": p})
        self.ttests.extend(rows)
        return rows

    def to_dict(self) -> dict:
        return {
            "format": "mrialign-metrics", "version": 1,
            "experiments": {n: {"internal": e.internal, "external": e.external,
                                "aggregate": {s: {m: {"mean": mu, "std": sd}
                                                  for m, (mu, sd) in e.aggregate(s).items()}
                                              for s in ("internal", "external")}}
                            for n, e in self.experiments.items()},
            "ttests": self.ttests,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        report = cls()
        for name, e in d["experiments"].items():
            report.add(ExperimentSummary(name, {k: list(v) for k, v in e["internal"].items()},
                                         {k: list(v) for k, v in e["external"].items()}))
        report.ttests = [dict(r) for r in d["ttests"]]
        return report

    def table_csv(self, split: str, metrics=METRICS) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["experiment"]
        for m in metrics:
            header += [f"{m}_mean", f"{m}_std"]
        writer.writerow(header)
        for name, e in self.experiments.items():
            agg = e.aggregate(split)
            row = [name]
            for m in metrics:
                mu, sd = agg.get(m, (float("nan"), float("nan")))
                row += [repr(mu), repr(sd)]
            writer.writerow(row)
        return buf.getvalue()

    def render_table(self, split: str, metrics=METRICS, title: str = "") -> str:
        """Plain-text table with cells formatted as ``mean (std)``."""
        names = list(self.experiments)
        width = max([len("Experiment")] + [len(n) for n in names]) + 2
        lines = [title] if title else []
        lines.append("Experiment".ljust(width) + "".join(m.ljust(18) for m in metrics))
        for name in names:
            agg = self.experiments[name].aggregate(split)
            cells = [f"{agg[m][0]:.3f} ({agg[m][1]:.3f})" if m in agg else "-" for m in metrics]
            lines.append(name.ljust(width) + "".join(c.ljust(18) for c in cells))
        return "\n".join(lines) + "\n"

    def ttest_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["a", "b", "split", "metric", "t", "p"])
        for r in self.ttests:
            writer.writerow([r["a"], r["b"], r["split"], r["metric"], repr(r["t"]), repr(r["p"])])
        return buf.getvalue()
