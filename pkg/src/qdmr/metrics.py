"""Moment-retrieval and highlight-detection evaluation.

Moment metrics: recall@1 at IoU thresholds and mAP with greedy rank-order
matching, averaged over a 0.50..0.95 threshold grid.  Highlight metrics:
per-annotator average precision of the clip ranking (positives are labels
>= 3 on the 0-4 scale) and HIT@1 for the top-scored clip.  Only score ranks
matter; ties break toward the lower index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EvalReport",
    "MAP_THRESHOLD_GRID",
    "HD_POSITIVE_THRESHOLD",
    "average_precision",
    "highlight_metrics",
    "moment_map",
    "recall_at_1",
    "temporal_iou",
]

MAP_THRESHOLD_GRID = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
HD_POSITIVE_THRESHOLD = 3  # ">= Very Good" on the 0-4 label scale


def temporal_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Interval IoU; 0 for disjoint or when both intervals are zero-length."""
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    if union <= 0:
        return 0.0
    return inter / union


def _rank_order(scores: np.ndarray) -> np.ndarray:
    # stable sort on negated scores: ties resolve to the lower index
    return np.argsort(-np.asarray(scores, dtype=float), kind="stable")


def _sorted_preds(preds: list[tuple[float, float, float]]) -> list[tuple[float, float]]:
    order = _rank_order([p[2] for p in preds])
    return [(preds[i][0], preds[i][1]) for i in order]


def recall_at_1(preds_by_query: list[list[tuple[float, float, float]]],
                gts_by_query: list[list[tuple[float, float]]],
                threshold: float) -> float:
    """Fraction of queries whose top-scored moment has IoU >= threshold with any GT.

    At threshold 0 a hit still requires positive overlap.
    """
    if len(preds_by_query) != len(gts_by_query):
        raise ValueError("prediction and GT lists differ in length")
    if not preds_by_query:
        return 0.0
    hits = 0
    for preds, gts in zip(preds_by_query, gts_by_query):
        if not preds or not gts:
            continue
        top = _sorted_preds(preds)[0]
        best = max(temporal_iou(top, gt) for gt in gts)
        if best >= threshold and best > 0:
            hits += 1
    return hits / len(preds_by_query)


def average_precision(tp_flags: np.ndarray, n_positive: int) -> float:
    """All-point AP from true-positive flags in rank order."""
    if n_positive == 0:
        return 0.0
    tp_flags = np.asarray(tp_flags, dtype=float)
    cum_tp = np.cumsum(tp_flags)
    ranks = np.arange(1, len(tp_flags) + 1)
    return float(np.sum(tp_flags * cum_tp / ranks) / n_positive)


def _match_flags(preds: list[tuple[float, float]],
                 gts: list[tuple[float, float]], threshold: float) -> np.ndarray:
    """Greedy one-to-one matching down the ranked list: best unmatched GT wins."""
    taken = [False] * len(gts)
    flags = np.zeros(len(preds))
    for k, pred in enumerate(preds):
        best_j, best_iou = -1, 0.0
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            iou = temporal_iou(pred, gt)
            if iou > best_iou:
                best_j, best_iou = j, iou
        if best_j >= 0 and best_iou >= threshold and best_iou > 0:
            taken[best_j] = True
            flags[k] = 1.0
    return flags


def moment_map(preds_by_query: list[list[tuple[float, float, float]]],
               gts_by_query: list[list[tuple[float, float]]],
               thresholds: tuple[float, ...] = MAP_THRESHOLD_GRID,
               ) -> dict[float, float]:
    """Mean (over queries) average precision at each IoU threshold."""
    if len(preds_by_query) != len(gts_by_query):
        raise ValueError("prediction and GT lists differ in length")
    out = {}
    for theta in thresholds:
        aps = []
        for preds, gts in zip(preds_by_query, gts_by_query):
            if not gts:
                continue
            flags = _match_flags(_sorted_preds(preds), gts, theta)
            aps.append(average_precision(flags, len(gts)))
        out[theta] = float(np.mean(aps)) if aps else 0.0
    return out


def highlight_metrics(scores_by_query: list[np.ndarray],
                      labels_by_query: list[np.ndarray | None],
                      ) -> tuple[float, float]:
    """(HD mAP, HIT@1) averaged over annotators within a query, then over queries.

    Annotators without a single positive clip are skipped for AP but still
    count toward HIT@1; queries where no annotator has a positive are skipped
    entirely.
    """
    ap_per_query, hit_per_query = [], []
    for scores, labels in zip(scores_by_query, labels_by_query):
        if labels is None or labels.size == 0:
            continue
        scores = np.asarray(scores, dtype=float)
        labels = np.asarray(labels)
        if labels.shape[1] != len(scores):
            raise ValueError(
                f"labels cover {labels.shape[1]} clips, scores cover {len(scores)}")
        order = _rank_order(scores)
        top = order[0]
        aps, hits = [], []
        for row in labels:
            positive = row >= HD_POSITIVE_THRESHOLD
            hits.append(float(positive[top]))
            if positive.any():
                aps.append(average_precision(positive[order].astype(float),
                                             int(positive.sum())))
        hit_per_query.append(float(np.mean(hits)))
        if aps:
            ap_per_query.append(float(np.mean(aps)))
    hd_map = float(np.mean(ap_per_query)) if ap_per_query else 0.0
    hit_at_1 = float(np.mean(hit_per_query)) if hit_per_query else 0.0
    return hd_map, hit_at_1


@dataclass
class EvalReport:
    r1_at: dict[float, float]
    map_at: dict[float, float]
    map_avg: float
    hd_map: float
    hit_at_1: float
    per_sample: list[dict] = field(default_factory=list)

    def summary(self) -> dict[str, float]:
        """Flat name -> value map used by reports and the CLI."""
        out = {f"R1@{theta:g}": v for theta, v in sorted(self.r1_at.items())}
        for theta in (0.5, 0.75):
            if theta in self.map_at:
                out[f"mAP@{theta:g}"] = self.map_at[theta]
        out["mAP-Avg"] = self.map_avg
        out["HD-mAP"] = self.hd_map
        out["HIT@1"] = self.hit_at_1
        return out

    def to_json(self) -> str:
        payload = {"r1_at": {f"{k:g}": v for k, v in sorted(self.r1_at.items())},
                   "map_at": {f"{k:g}": v for k, v in sorted(self.map_at.items())},
                   "map_avg": self.map_avg, "hd_map": self.hd_map,
                   "hit_at_1": self.hit_at_1, "per_sample": self.per_sample}
        return json.dumps(payload, indent=2, sort_keys=True)

    def validate(self) -> None:
        for name, value in self.summary().items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} = {value} outside [0, 1]")
