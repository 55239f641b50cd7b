"""Inter-observer agreement and model-versus-observer comparison."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from petrel import detection
from petrel.raster import PointLabelSet


@dataclass
class ObserverStudy:
    label_sets: list[PointLabelSet]
    heatmap: np.ndarray | None = None
    radius: float = detection.DEFAULT_RADIUS
    thresholds: list[float] | None = None
    frame: tuple[int, int] | None = None  # (width, height) shared by all label sets

    def __post_init__(self):
        if len(self.label_sets) < 2:
            raise ValueError("an observer study needs at least two label sets")
        ids = [s.observer_id for s in self.label_sets]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate observer ids {ids}")
        if self.frame is None and self.heatmap is not None:
            h, w = np.asarray(self.heatmap).shape[-2:]
            self.frame = (w, h)
        if self.frame is not None:
            for s in self.label_sets:
                try:
                    s.validate(*self.frame)
                except ValueError as exc:
                    raise ValueError(f"label set outside the study's scene frame: {exc}") from exc

    @property
    def ids(self) -> list[str]:
        return [s.observer_id for s in self.label_sets]


def observer_matrix(study: ObserverStudy) -> np.ndarray:
    """K x K x 2 array; [j, i] = (precision, recall) of observer i scored against observer j."""
    k = len(study.label_sets)
    out = np.ones((k, k, 2))
    for j, truth in enumerate(study.label_sets):
        for i, other in enumerate(study.label_sets):
            if i == j:
                continue
            m = detection.match_points(other.points, truth.points, study.radius)
            p = detection.PRPoint(1.0, m.tp, len(m.fp), len(m.fn))
            out[j, i] = (p.precision, p.recall)
    return out


def model_vs_observers(study: ObserverStudy) -> dict[str, list[detection.PRPoint]]:
    if study.heatmap is None:
        raise ValueError("model_vs_observers needs a model heatmap")
    return {
        s.observer_id: detection.pr_curve(study.heatmap, s.points, study.thresholds, study.radius)
        for s in study.label_sets
    }


def within_range_assessment(study: ObserverStudy, curves=None) -> dict:
    """Does the model's PR curve reach the other observers' worst agreement?

    For each observer taken as ground truth, the model passes when some
    threshold gives precision and recall both at least the minimum achieved
    by the remaining observers. ``margin`` is the best min(precision slack,
    recall slack) over thresholds; it is non-negative exactly when passing.
    """
    if len(study.label_sets) < 3:
        raise ValueError("within-range assessment needs at least three observers")
    matrix = observer_matrix(study)
    curves = model_vs_observers(study) if curves is None else curves
    per_truth = {}
    for j, name in enumerate(study.ids):
        others = [i for i in range(len(study.ids)) if i != j]
        min_p = float(matrix[j, others, 0].min())
        min_r = float(matrix[j, others, 1].min())
        best, best_t = -np.inf, None
        for pt in curves[name]:
            slack = min(pt.precision - min_p, pt.recall - min_r)
            if slack > best:
                best, best_t = slack, pt
        per_truth[name] = {
            "within_range": bool(best >= 0),
            "min_observer_precision": min_p,
            "min_observer_recall": min_r,
            "margin": float(best),
            "best_threshold": best_t.threshold,
            "best_precision": best_t.precision,
            "best_recall": best_t.recall,
        }
    return {
        "criterion": "some threshold reaches precision and recall >= the minimum over the other "
                     "observers (artifact-defined reading of 'within inter-observer range')",
        "radius": study.radius,
        "n_within_range": sum(v["within_range"] for v in per_truth.values()),
        "n_truth_sets": len(per_truth),
        "truth_sets": per_truth,
    }


def write_matrix_csv(study: ObserverStudy, matrix: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["observer_as_truth", "observer_as_detector", "precision", "recall"])
        for j, truth in enumerate(study.ids):
            for i, det in enumerate(study.ids):
                w.writerow([truth, det, repr(float(matrix[j, i, 0])), repr(float(matrix[j, i, 1]))])


def read_matrix_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["precision"] = float(r["precision"])
        r["recall"] = float(r["recall"])
    return rows
