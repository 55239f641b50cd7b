"""Point detections from heatmaps, greedy matching, and precision-recall sweeps."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

DEFAULT_RADIUS = 5.0
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def default_thresholds() -> list[float]:
    grid = {round(0.05 * k, 2) for k in range(1, 20)}
    grid.add(0.45)
    return sorted(grid)


@dataclass(frozen=True)
class Detection:
    x: float
    y: float
    score: float


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]]
    fp: list[int]
    fn: list[int]

    @property
    def tp(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 1.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 1.0


def extract_detections(heatmap: np.ndarray, threshold: float) -> list[Detection]:
    """One detection per 8-connected above-threshold component.

    Location is the probability-weighted centroid, score the component peak.
    """
    heatmap = np.asarray(heatmap, dtype=np.float64)
    if heatmap.ndim == 3:
        heatmap = heatmap[0]
    mask = heatmap >= threshold
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    if n == 0:
        return []
    index = np.arange(1, n + 1)
    centers = ndimage.center_of_mass(heatmap, labels, index)
    peaks = ndimage.maximum(heatmap, labels, index)
    return [Detection(float(cx), float(cy), float(s)) for (cy, cx), s in zip(centers, peaks)]


def _xy(points) -> np.ndarray:
    if len(points) and isinstance(points[0], Detection):
        return np.array([(d.x, d.y) for d in points], dtype=np.float64)
    return np.asarray(points, dtype=np.float64).reshape(-1, 2)


def match_points(detections, truths, radius: float = DEFAULT_RADIUS,
                 scores=None) -> MatchResult:
    """Greedy one-to-one matching in descending score order.

    ``detections`` may be Detection objects or bare (x, y) rows; bare rows use
    ``scores`` (default all 1.0). Each detection claims its nearest unmatched
    truth within ``radius``; ties go to the lower detection, then lower truth,
    index.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    det = _xy(detections)
    tru = _xy(truths)
    if scores is None:
        scores = [d.score for d in detections] if len(detections) and isinstance(detections[0], Detection) \
            else np.ones(len(det))
    scores = np.asarray(scores, dtype=np.float64)
    # stable sort keeps lower index first among equal scores
    order = np.argsort(-scores, kind="stable")
    taken = np.zeros(len(tru), dtype=bool)
    pairs = []
    fp = []
    if len(tru):
        d2_all = ((det[:, None, :] - tru[None, :, :]) ** 2).sum(-1) if len(det) else None
    r2 = radius * radius
    for i in order:
        if not len(tru):
            fp.append(int(i))
            continue
        d2 = np.where(taken, np.inf, d2_all[i])
        j = int(np.argmin(d2))  # first minimum -> lowest truth index on ties
        if d2[j] <= r2:
            taken[j] = True
            pairs.append((int(i), j, float(np.sqrt(d2[j]))))
        else:
            fp.append(int(i))
    fn = [int(j) for j in np.flatnonzero(~taken)]
    return MatchResult(pairs, sorted(fp), fn)


def pr_point(detections, truths, threshold: float, radius: float = DEFAULT_RADIUS) -> PRPoint:
    m = match_points(detections, truths, radius)
    return PRPoint(threshold, m.tp, len(m.fp), len(m.fn))


def pr_curve(heatmap, truths, thresholds=None, radius: float = DEFAULT_RADIUS) -> list[PRPoint]:
    thresholds = default_thresholds() if thresholds is None else list(thresholds)
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be sorted ascending")
    return [pr_point(extract_detections(heatmap, t), truths, t, radius) for t in thresholds]


def merge_curves(curves: list[list[PRPoint]]) -> list[PRPoint]:
    """Pool counts from several images evaluated on the same threshold grid."""
    out = []
    for points in zip(*curves):
        t = points[0].threshold
        out.append(PRPoint(t, sum(p.tp for p in points), sum(p.fp for p in points),
                           sum(p.fn for p in points)))
    return out


def count_estimate(point: PRPoint) -> int:
    return point.tp + point.fp


def interpolated_precision(curve: list[PRPoint], recall_bins) -> np.ndarray:
    """Best precision achievable at recall >= each bin (0 where unreachable)."""
    rec = np.array([p.recall for p in curve])
    prec = np.array([p.precision for p in curve])
    out = np.zeros(len(recall_bins))
    for k, r in enumerate(recall_bins):
        ok = rec >= r - 1e-12
        out[k] = prec[ok].max() if ok.any() else 0.0
    return out


def average_precision(curve: list[PRPoint], recall_bins=None) -> float:
    """Trapezoidal area under the interpolated precision-recall curve."""
    bins = np.linspace(0, 1, 11) if recall_bins is None else np.asarray(recall_bins)
    return float(np.trapezoid(interpolated_precision(curve, bins), bins))


# ------------------------------------------------------------------ CSV I/O

PR_FIELDS = ["threshold", "tp", "fp", "fn", "precision", "recall"]


def write_pr_csv(curve: list[PRPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PR_FIELDS)
        for p in curve:
            w.writerow([repr(p.threshold), p.tp, p.fp, p.fn, repr(p.precision), repr(p.recall)])


def read_pr_csv(path) -> list[PRPoint]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != PR_FIELDS:
            raise ValueError(f"{path}: expected header {','.join(PR_FIELDS)}")
        return [PRPoint(float(r["threshold"]), int(r["tp"]), int(r["fp"]), int(r["fn"])) for r in reader]


def write_detections_csv(detections: list[Detection], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "score"])
        for d in detections:
            w.writerow([repr(d.x), repr(d.y), repr(d.score)])
