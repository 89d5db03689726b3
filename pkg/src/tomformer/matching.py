"""Box geometry, exact Hungarian assignment and the set-prediction loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from tomformer import tensor as T
from tomformer.errors import ContractError
from tomformer.tensor import Tensor

NO_OBJECT_WEIGHT = 0.1


@dataclass(frozen=True)
class BoundingBox:
    """Center-form box (cx, cy, w, h), normalized to the unit square."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ContractError(f"box extents must be non-negative, got w={self.w} h={self.h}")

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "BoundingBox":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])


def _overlap(a: BoundingBox, b: BoundingBox) -> tuple[float, float, float]:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    inter = max(0.0, min(ax1, bx1) - max(ax0, bx0)) * max(0.0, min(ay1, by1) - max(ay0, by0))
    union = a.area + b.area - inter
    hull = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    return inter, union, hull


def iou(a: BoundingBox, b: BoundingBox) -> float:
    inter, union, _ = _overlap(a, b)
    return inter / union if union > 0 else 0.0


def giou(a: BoundingBox, b: BoundingBox) -> float:
    inter, union, hull = _overlap(a, b)
    if hull <= 0:
        return 0.0
    value = inter / union if union > 0 else 0.0
    return value - (hull - union) / hull


def pairwise_giou(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """GIoU for every (prediction, target) pair of center-form boxes; shape Q x M."""
    p = _corners_np(pred)[:, None, :]
    t = _corners_np(target)[None, :, :]
    iw = np.clip(np.minimum(p[..., 2], t[..., 2]) - np.maximum(p[..., 0], t[..., 0]), 0, None)
    ih = np.clip(np.minimum(p[..., 3], t[..., 3]) - np.maximum(p[..., 1], t[..., 1]), 0, None)
    inter = iw * ih
    area_p = (p[..., 2] - p[..., 0]) * (p[..., 3] - p[..., 1])
    area_t = (t[..., 2] - t[..., 0]) * (t[..., 3] - t[..., 1])
    union = area_p + area_t - inter
    hull = (np.maximum(p[..., 2], t[..., 2]) - np.minimum(p[..., 0], t[..., 0])) * (
        np.maximum(p[..., 3], t[..., 3]) - np.minimum(p[..., 1], t[..., 1])
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        ious = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
        out = np.where(hull > 0, ious - (hull - union) / np.where(hull > 0, hull, 1), 0.0)
    return out


def _corners_np(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    half = boxes[:, 2:] / 2
    return np.concatenate([boxes[:, :2] - half, boxes[:, :2] + half], axis=1)


# ---------------------------------------------------------------------------
# assignment


@dataclass(frozen=True)
class Assignment:
    """One (prediction_index, target_index) pair per target, ordered by target index."""

    pairs: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def prediction_indices(self) -> list[int]:
        return [p for p, _ in self.pairs]

    @property
    def target_indices(self) -> list[int]:
        return [t for _, t in self.pairs]

    def cost(self, matrix: np.ndarray) -> float:
        total = 0.0
        for p, t in self.pairs:
            total += float(matrix[p, t])
        return total


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-cost injective assignment of every column (target) to a row (prediction).

    Shortest-augmenting-path Hungarian method with row/column potentials,
    O(M^2 Q). Among optimal assignments the one whose prediction indices,
    read in target order, are lexicographically smallest is returned: each
    edge carries an integer secondary cost ``p * Q**(M-1-t)`` and costs are
    compared as (primary, secondary) pairs. The tie-break is exact whenever
    the primary costs add up exactly (e.g. integer matrices).
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ContractError(f"cost matrix must be 2-D, got shape {c.shape}")
    q, m = c.shape
    if m > q:
        raise ContractError(f"cannot injectively match {m} targets to {q} predictions")
    if not np.all(np.isfinite(c)):
        raise ContractError("cost matrix has non-finite entries")
    if m == 0:
        return Assignment(())

    # Rows of the working problem are targets (n = m), columns are predictions.
    a = c.T.tolist()
    weights = [q ** (m - 1 - t) for t in range(m)]
    inf = (float("inf"), 0)

    def sub(x, y):
        return (x[0] - y[0], x[1] - y[1])

    def add(x, y):
        return (x[0] + y[0], x[1] + y[1])

    zero = (0.0, 0)
    u = [zero] * (m + 1)
    v = [zero] * (q + 1)
    owner = [0] * (q + 1)  # owner[j]: working row (1-based) holding column j
    way = [0] * (q + 1)
    for i in range(1, m + 1):
        owner[0] = i
        j0 = 0
        minv = [inf] * (q + 1)
        used = [False] * (q + 1)
        while True:
            used[j0] = True
            i0 = owner[j0]
            row = a[i0 - 1]
            w = weights[i0 - 1]
            delta, j1 = inf, 0
            for j in range(1, q + 1):
                if used[j]:
                    continue
                cur = sub(sub((row[j - 1], (j - 1) * w), u[i0]), v[j])
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta, j1 = minv[j], j
            for j in range(q + 1):
                if used[j]:
                    u[owner[j]] = add(u[owner[j]], delta)
                    v[j] = sub(v[j], delta)
                else:
                    minv[j] = sub(minv[j], delta)
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1

    match = [0] * m
    for j in range(1, q + 1):
        if owner[j]:
            match[owner[j] - 1] = j - 1
    return Assignment(tuple((match[t], t) for t in range(m)))


# ---------------------------------------------------------------------------
# set-prediction loss


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    l1: float = 5.0
    giou: float = 2.0
    no_object: float = NO_OBJECT_WEIGHT


Target = tuple[int, BoundingBox]


@dataclass
class LossBreakdown:
    total: float
    class_term: float
    l1_term: float
    giou_term: float
    assignment: Assignment
    loss: Tensor | None = field(default=None, repr=False)

    def as_dict(self) -> dict[str, float]:
        return {
            "total": self.total,
            "class_term": self.class_term,
            "l1_term": self.l1_term,
            "giou_term": self.giou_term,
        }


def _logits_and_boxes(pred) -> tuple[Tensor, Tensor]:
    if isinstance(pred, tuple):
        return T.tensor(pred[0]), T.tensor(pred[1])
    return pred.class_logits, pred.boxes


def _target_arrays(targets: Sequence[Target]) -> tuple[np.ndarray, np.ndarray]:
    classes = np.array([int(c) for c, _ in targets], dtype=np.int64)
    boxes = np.array([b.as_array() for _, b in targets], dtype=np.float64).reshape(-1, 4)
    return classes, boxes


def cost_matrix(pred, targets: Sequence[Target], weights: LossWeights = LossWeights()) -> np.ndarray:
    """Matching cost, Q x M: -lambda_cls p(class) + lambda_l1 L1 - lambda_giou GIoU."""
    logits, boxes = _logits_and_boxes(pred)
    q = logits.shape[0]
    if len(targets) > q:
        raise ContractError(f"{len(targets)} targets exceed {q} predictions")
    classes, tboxes = _target_arrays(targets)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    class_cost = -probs[:, classes]
    l1 = np.abs(boxes.data[:, None, :] - tboxes[None, :, :]).sum(axis=-1)
    return weights.cls * class_cost + weights.l1 * l1 - weights.giou * pairwise_giou(boxes.data, tboxes)


def box_corners(boxes: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    cx, cy, w, h = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    return cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5


def giou_tensor(a: Tensor, b: Tensor) -> Tensor:
    """Differentiable row-wise GIoU of two M x 4 center-form box tensors."""
    ax0, ay0, ax1, ay1 = box_corners(a)
    bx0, by0, bx1, by1 = box_corners(b)
    iw = T.relu(T.minimum(ax1, bx1) - T.maximum(ax0, bx0))
    ih = T.relu(T.minimum(ay1, by1) - T.maximum(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    hull = (T.maximum(ax1, bx1) - T.minimum(ax0, bx0)) * (T.maximum(ay1, by1) - T.minimum(ay0, by0))
    # degenerate areas map to 0 instead of NaN
    safe_union = T.Tensor(np.where(union.data > 0, 0.0, 1.0)) + union
    safe_hull = T.Tensor(np.where(hull.data > 0, 0.0, 1.0)) + hull
    iou_part = inter / safe_union * T.Tensor((union.data > 0).astype(np.float64))
    penalty = (hull - union) / safe_hull
    return (iou_part - penalty) * T.Tensor((hull.data > 0).astype(np.float64))


def set_loss(pred, targets: Sequence[Target], weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Bipartite-matched detection loss for one image.

    ``pred`` is a DetectionOutput or a ``(class_logits, boxes)`` pair. The
    assignment is treated as a constant of the step.
    """
    logits, boxes = _logits_and_boxes(pred)
    q, k1 = logits.shape
    m = len(targets)
    if m > q:
        raise ContractError(f"{m} targets exceed {q} predictions")
    assignment = hungarian(cost_matrix((logits, boxes), targets, weights)) if m else Assignment(())

    labels = np.full(q, k1 - 1, dtype=np.int64)
    classes, tboxes = _target_arrays(targets)
    matched = np.array(assignment.prediction_indices, dtype=np.int64)
    labels[matched] = classes
    unmatched = np.setdiff1d(np.arange(q), matched)

    nll = -T.log_softmax(logits, axis=1)[np.arange(q), labels]
    # canonical summation order keeps the total invariant to row permutations
    unmatched = unmatched[np.argsort(nll.data[unmatched], kind="stable")]
    zero = T.Tensor(0.0)
    if m:
        class_term = nll[matched].sum() * (1.0 / m)
    else:
        class_term = zero
    if unmatched.size:
        class_term = class_term + nll[unmatched].sum() * (weights.no_object / unmatched.size)

    if m:
        mboxes = boxes[matched]
        tb = T.Tensor(tboxes)
        l1_term = (mboxes - tb).abs().sum() * (1.0 / m)
        giou_term = (1.0 - giou_tensor(mboxes, tb)).sum() * (1.0 / m)
    else:
        l1_term = zero
        giou_term = zero

    total = class_term * weights.cls + l1_term * weights.l1 + giou_term * weights.giou
    return LossBreakdown(
        total=total.item(),
        class_term=class_term.item(),
        l1_term=l1_term.item(),
        giou_term=giou_term.item(),
        assignment=assignment,
        loss=total,
    )
