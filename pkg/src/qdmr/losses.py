"""Training objectives: set-matched moment losses plus three saliency losses.

Moment retrieval uses Hungarian-matched L1 + (1 - gIoU) + foreground/background
cross-entropy, applied at every decoder layer and summed.  Highlight detection
combines a sampled two-pair margin hinge with a rank-aware contrastive term
over saliency-rank thresholds; negative (video, query) pairs are pushed down
through -log(1 - sigmoid(S)), which equals softplus(S).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .model import Moment
from .tensor import Tensor

__all__ = [
    "LossParts",
    "LossWeights",
    "MatchResult",
    "hungarian_match",
    "margin_loss",
    "moment_loss",
    "negative_pair_loss",
    "rank_contrastive_loss",
    "solve_assignment",
    "temporal_giou",
    "total_loss",
]


@dataclass
class LossWeights:
    lambda_l1: float = 10.0
    lambda_giou: float = 1.0
    lambda_ce: float = 4.0
    lambda_margin: float = 1.0
    lambda_cont: float = 1.0
    lambda_neg: float = 1.0
    tau: float = 0.5
    margin_delta: float = 0.2
    max_rank: int = 4

    def validate(self) -> None:
        for name in ("lambda_l1", "lambda_giou", "lambda_ce", "lambda_margin",
                     "lambda_cont", "lambda_neg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0.0 < self.margin_delta < 1.0:
            raise ValueError(f"margin_delta must lie in (0, 1), got {self.margin_delta}")
        if self.max_rank < 1:
            raise ValueError(f"max_rank must be >= 1, got {self.max_rank}")


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]      # (prediction index, GT index)
    unmatched_preds: list[int]


def temporal_giou(a: Moment, b: Moment) -> float:
    """Generalized IoU on intervals: IoU minus the enclosure-gap penalty."""
    a0, a1 = a.interval()
    b0, b1 = b.interval()
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = a.width + b.width - inter
    enclosure = max(a1, b1) - min(a0, b0)
    return inter / union - (enclosure - union) / enclosure


def solve_assignment(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-total-cost injective assignment over a (possibly rectangular) matrix."""
    return linear_sum_assignment(cost)


def hungarian_match(preds: list[tuple[Moment, float]], gts: list[Moment],
                    w: LossWeights) -> MatchResult:
    """Assign predictions to ground-truth moments at minimum matching cost.

    cost(i, j) = lambda_l1 * |pred_i - gt_j|_1 + lambda_giou * (1 - gIoU)
                 - lambda_ce * fg_prob_i
    """
    if not gts:
        return MatchResult(pairs=[], unmatched_preds=list(range(len(preds))))
    cost = np.zeros((len(preds), len(gts)))
    for i, (m, fg) in enumerate(preds):
        for j, g in enumerate(gts):
            l1 = abs(m.center - g.center) + abs(m.width - g.width)
            cost[i, j] = (w.lambda_l1 * l1 + w.lambda_giou * (1.0 - temporal_giou(m, g))
                          - w.lambda_ce * fg)
    rows, cols = solve_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    matched = {i for i, _ in pairs}
    return MatchResult(pairs=pairs,
                       unmatched_preds=[i for i in range(len(preds)) if i not in matched])


def _giou_tensor(pred: Tensor, gt: Tensor) -> Tensor:
    """Differentiable row-wise interval gIoU for (center, width) pairs."""
    ps, pe = pred[:, 0] - 0.5 * pred[:, 1], pred[:, 0] + 0.5 * pred[:, 1]
    gs, ge = gt[:, 0] - 0.5 * gt[:, 1], gt[:, 0] + 0.5 * gt[:, 1]
    inter = T.relu(T.minimum(pe, ge) - T.maximum(ps, gs))
    union = pred[:, 1] + gt[:, 1] - inter
    enclosure = T.maximum(pe, ge) - T.minimum(ps, gs)
    return inter / union - (enclosure - union) / enclosure


def _cross_entropy_rows(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean CE over rows; targets are class indices into the last axis."""
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(targets)), targets] = 1.0
    picked = T.sum_(logits * onehot, axis=1)
    return T.mean(T.logsumexp_lastdim(logits) - picked)


def moment_loss(match: MatchResult, moments: Tensor, class_logits: Tensor,
                gts: list[Moment], w: LossWeights) -> Tensor:
    """Matched L1 + gIoU regression (averaged over GT count) plus per-query CE."""
    n_queries = moments.shape[0]
    targets = np.ones(n_queries, dtype=np.intp)  # background
    for pred_idx, _ in match.pairs:
        targets[pred_idx] = 0  # foreground
    loss = w.lambda_ce * _cross_entropy_rows(class_logits, targets)
    if match.pairs:
        pred_idx = [i for i, _ in match.pairs]
        gt_idx = [j for _, j in match.pairs]
        matched = T.take(moments, pred_idx)
        target = Tensor([[gts[j].center, gts[j].width] for j in gt_idx])
        scale = 1.0 / len(gts)
        l1 = T.sum_(T.abs_(matched - target)) * scale
        giou = T.sum_(1.0 - _giou_tensor(matched, target)) * scale
        loss = loss + w.lambda_l1 * l1 + w.lambda_giou * giou
    return loss


def margin_loss(scores: list[Tensor], ranks: list[np.ndarray],
                in_moment: list[np.ndarray], w: LossWeights,
                rng: np.random.Generator) -> Tensor:
    """Two sampled hinge pairs per sample, averaged over the batch.

    Pair one contrasts a higher-rank against a lower-rank clip inside the GT
    moment; pair two contrasts an in-moment clip against an outside clip.
    Unavailable pairs contribute zero.
    """
    total = Tensor(0.0)
    for s, r, inside in zip(scores, ranks, in_moment):
        inside_idx = np.flatnonzero(inside)
        outside_idx = np.flatnonzero(~inside)
        labeled = inside_idx[r[inside_idx] >= 0]

        if len(labeled) >= 2:
            hi_c, lo_c = np.meshgrid(labeled, labeled, indexing="ij")
            keep = r[hi_c] > r[lo_c]
            if keep.any():
                cands = np.stack([hi_c[keep], lo_c[keep]], axis=1)
                hi, lo = cands[rng.integers(len(cands))]
                total = total + _hinge(s, int(hi), int(lo), w.margin_delta)
        if len(inside_idx) and len(outside_idx):
            hi = inside_idx[rng.integers(len(inside_idx))]
            lo = outside_idx[rng.integers(len(outside_idx))]
            total = total + _hinge(s, int(hi), int(lo), w.margin_delta)
    return total * (1.0 / max(len(scores), 1))


def _hinge(scores: Tensor, hi: int, lo: int, delta: float) -> Tensor:
    return T.sum_(T.relu((T.take(scores, [lo]) - T.take(scores, [hi])) + delta))


def rank_contrastive_loss(scores: list[Tensor], ranks: list[np.ndarray],
                          neg_scores: Tensor | None, w: LossWeights) -> Tensor:
    """Rank-threshold contrastive terms, summed over r = 1..max_rank per sample.

    At threshold r the positives are clips ranked >= r; everything ranked
    lower (including unlabeled clips at rank -1) and every negative-pair clip
    lands in the denominator pool.  Thresholds with no positive contribute 0;
    the sum is averaged over the batch.
    """
    inv_tau = 1.0 / w.tau
    total = Tensor(0.0)
    for s, r in zip(scores, ranks):
        scaled = s * inv_tau
        for threshold in range(1, w.max_rank + 1):
            pos_idx = np.flatnonzero(r >= threshold)
            if not len(pos_idx):
                continue
            neg_idx = np.flatnonzero(r < threshold)
            pool = [T.take(scaled, pos_idx)]
            if len(neg_idx):
                pool.append(T.take(scaled, neg_idx))
            if neg_scores is not None and neg_scores.size:
                pool.append(neg_scores * inv_tau)
            numer = T.logsumexp_lastdim(pool[0])
            denom = T.logsumexp_lastdim(T.concat(pool)) if len(pool) > 1 else numer
            total = total + (denom - numer)
    return total * (1.0 / max(len(scores), 1))


def negative_pair_loss(neg_scores: Tensor) -> Tensor:
    """Mean of -log(1 - sigmoid(S)) over negative-pair clips, i.e. softplus(S)."""
    return T.mean(T.softplus(neg_scores))


@dataclass
class LossParts:
    mr: Tensor        # pre-weighted moment loss, summed over decoder layers
    margin: Tensor
    cont: Tensor
    neg: Tensor

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in ("mr", "margin", "cont", "neg")}


def total_loss(parts: LossParts, w: LossWeights) -> Tensor:
    highlight = w.lambda_margin * parts.margin + w.lambda_cont * parts.cont
    return highlight + parts.mr + w.lambda_neg * parts.neg
