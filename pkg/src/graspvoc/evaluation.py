"""Grasp-region metrics against multi-annotator ground truth, and the
binomial preference test for the end-to-end comparison."""

import csv
import io
import json
import math
from dataclasses import dataclass, fields
from fractions import Fraction

import numpy as np

from .errors import EmptyList, NoGraspResponses, OutOfRange, SchemaMismatch

# Tails for n up to this size are summed exactly in rationals; beyond it the
# log-factorial path avoids the huge integers.
EXACT_TAIL_MAX_N = 1000


@dataclass(frozen=True, eq=False)
class GroundTruth:
    n_points: int
    counts: np.ndarray
    n_participants: int
    object_label: str = ""
    task: str = ""

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.shape != (self.n_points,):
            raise SchemaMismatch(f"counts length {counts.shape} != n_points {self.n_points}")
        if counts.min(initial=0) < 0 or counts.max(initial=0) > self.n_participants:
            raise OutOfRange("counts must lie in [0, n_participants]")
        if not counts.any():
            raise ValueError("ground truth selects no points")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def weights(self):
        return self.counts / self.n_participants

    @property
    def region(self):
        return np.flatnonzero(self.counts)


@dataclass(frozen=True)
class RegionMetrics:
    weighted_iou: float
    precision: float
    recall: float

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class PreferenceTally:
    n_responses: int
    chosen_optimal: int
    chosen_controls: tuple
    chosen_none: int = 0

    def __post_init__(self):
        parts = self.chosen_optimal + sum(self.chosen_controls) + self.chosen_none
        if parts != self.n_responses:
            raise ValueError(f"tally parts sum to {parts}, expected {self.n_responses}")

    @property
    def n_grasp_responses(self):
        return self.n_responses - self.chosen_none


def _indices(pred, n):
    idx = np.unique(np.asarray(list(pred) if not isinstance(pred, np.ndarray) else pred, dtype=np.int64))
    if idx.size and (idx[0] < 0 or idx[-1] >= n):
        raise OutOfRange(f"index outside [0, {n})")
    return idx


def consolidate(selections, n_points, object_label="", task=""):
    if not selections:
        raise EmptyList("need at least one participant selection")
    counts = np.zeros(n_points, dtype=np.int64)
    for sel in selections:
        counts[_indices(sel, n_points)] += 1
    return GroundTruth(n_points, counts, len(selections), object_label, task)


def region_metrics(pred, gt):
    """Weighted IoU, precision and recall of a predicted point set.

    Ground-truth points weigh counts/K. Predicted points outside the ground
    truth weigh 1/K, one annotator's worth of disagreement.
    """
    idx = _indices(pred, gt.n_points)
    if idx.size == 0:
        return RegionMetrics(0.0, 0.0, 0.0)
    w = gt.weights
    k = gt.n_participants
    in_pred = np.zeros(gt.n_points, dtype=bool)
    in_pred[idx] = True
    in_gt = gt.counts > 0
    inter = math.fsum(w[in_pred & in_gt])
    gt_mass = math.fsum(w[in_gt])
    extra = np.count_nonzero(in_pred & ~in_gt) / k
    pred_mass = math.fsum(w[in_pred & in_gt]) + extra
    union = gt_mass + extra
    return RegionMetrics(inter / union, inter / pred_mass, inter / gt_mass)


def average_runs(metrics):
    metrics = list(metrics)
    if not metrics:
        raise EmptyList("nothing to average")
    n = len(metrics)
    out = []
    for f in fields(RegionMetrics):
        vals = [getattr(m, f.name) for m in metrics]
        # shifted mean: identical runs average back to the exact same value
        out.append(vals[0] + math.fsum(v - vals[0] for v in vals) / n)
    return RegionMetrics(*out)


def _log_tail(n, k, p):
    lp, lq = math.log(p), math.log1p(-p)
    logfact = np.concatenate(([0.0], np.cumsum(np.log(np.arange(1, n + 1, dtype=np.float64)))))
    i = np.arange(k, n + 1)
    terms = logfact[n] - logfact[i] - logfact[n - i] + i * lp + (n - i) * lq
    top = terms.max()
    return min(1.0, math.exp(top) * math.fsum(np.exp(terms - top)))


def _exact_tail(n, k, p):
    a, b = Fraction(p).as_integer_ratio()
    num = sum(math.comb(n, i) * a**i * (b - a) ** (n - i) for i in range(k, n + 1))
    return float(Fraction(num, b**n))


def binomial_upper_tail(n, k, p):
    """P[X >= k] for X ~ Binomial(n, p)."""
    if k <= 0:
        return 1.0
    if k > n:
        return 0.0
    if n <= EXACT_TAIL_MAX_N:
        return _exact_tail(n, k, p)
    return _log_tail(n, k, p)


def binomial_preference_test(tally, p0=0.25, exclude_none=True):
    """One-sided p-value that the selected grasp is chosen more than chance."""
    if not 0.0 < p0 < 1.0:
        raise ValueError("p0 must lie in (0, 1)")
    n = tally.n_grasp_responses if exclude_none else tally.n_responses
    if n < 1:
        raise NoGraspResponses("no response chose a grasp")
    return binomial_upper_tail(n, tally.chosen_optimal, p0)


# ------------------------------------------------------------------ files


def load_ground_truth(path):
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return consolidate(data["selections"], int(data["n_points"]), data.get("object_label", ""), data.get("task", ""))


def macro_average(rows):
    return average_runs(m for _, _, m in rows)


def metrics_report(rows):
    """rows: (object_label, task, RegionMetrics) sorted by pair key."""
    rows = sorted(rows, key=lambda r: (r[0], r[1]))
    return {
        "pairs": [{"object_label": o, "task": t, **m.to_dict()} for o, t, m in rows],
        "macro_average": macro_average(rows).to_dict(),
    }


def metrics_csv(rows):
    rows = sorted(rows, key=lambda r: (r[0], r[1]))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["object_label", "task", "weighted_iou", "precision", "recall"])
    for o, t, m in rows:
        writer.writerow([o, t, repr(m.weighted_iou), repr(m.precision), repr(m.recall)])
    avg = macro_average(rows)
    writer.writerow(["macro_average", "", repr(avg.weighted_iou), repr(avg.precision), repr(avg.recall)])
    return buf.getvalue()
