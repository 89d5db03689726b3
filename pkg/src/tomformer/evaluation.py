"""Per-class average precision, mAP, and report rendering."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from tomformer.data import CLASSES, Annotation
from tomformer.matching import BoundingBox, iou
from tomformer.model import DetectionOutput

DEFAULT_IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: int
    score: float
    box: BoundingBox

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    class_id: int
    box: BoundingBox


def _as_ground_truth(gt) -> GroundTruth:
    if isinstance(gt, GroundTruth):
        return gt
    if isinstance(gt, Annotation):
        return GroundTruth(gt.image_id, gt.class_id, gt.box)
    raise TypeError(f"unsupported ground-truth type {type(gt).__name__}")


def _ranked(dets: Sequence[Detection]) -> list[int]:
    # stable sort: equal scores keep input order
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def match_detections(
    dets: Sequence[Detection], gts: Iterable, iou_threshold: float = DEFAULT_IOU_THRESHOLD
) -> list[bool]:
    """True-positive flag for each detection, aligned with the input order.

    Detections are visited by descending score. Each one claims the
    unmatched ground truth of the same image and class with the highest
    IoU, provided that IoU reaches the threshold.
    """
    pool: dict[tuple[str, int], list[GroundTruth]] = {}
    for gt in map(_as_ground_truth, gts):
        pool.setdefault((gt.image_id, gt.class_id), []).append(gt)
    taken = {key: [False] * len(v) for key, v in pool.items()}
    flags = [False] * len(dets)
    for i in _ranked(dets):
        d = dets[i]
        key = (d.image_id, d.class_id)
        best, best_iou = -1, -1.0
        for j, gt in enumerate(pool.get(key, ())):
            if taken[key][j]:
                continue
            overlap = iou(d.box, gt.box)
            if overlap >= iou_threshold and overlap > best_iou:
                best, best_iou = j, overlap
        if best >= 0:
            taken[key][best] = True
            flags[i] = True
    return flags


def precision_recall(flags: Sequence[bool], num_gt: int) -> list[tuple[float, float]]:
    """(recall, precision) after each ranked detection."""
    points, tp = [], 0
    for k, flag in enumerate(flags, start=1):
        tp += bool(flag)
        points.append((tp / num_gt if num_gt else 0.0, tp / k))
    return points


def average_precision(flags: Sequence[bool], num_gt: int) -> float:
    """All-point interpolated AP of score-ranked TP/FP flags.

    Each precision is replaced by the maximum precision at equal or higher
    recall, then the area under that envelope is summed per recall step.
    Arithmetic is done in exact rationals and rounded once at the end.
    """
    if num_gt <= 0:
        return 0.0
    n = len(flags)
    precision = [Fraction(0)] * n
    tp = 0
    for k, flag in enumerate(flags):
        tp += bool(flag)
        precision[k] = Fraction(tp, k + 1)
    envelope = Fraction(0)
    area = Fraction(0)
    for k in range(n - 1, -1, -1):
        envelope = max(envelope, precision[k])
        if flags[k]:
            area += envelope
    return float(area / num_gt)


@dataclass
class EvalReport:
    per_class_ap: dict[int, float]
    map: float
    pr_curves: dict[int, list[tuple[float, float]]]
    iou_threshold: float
    num_gt: dict[int, int] = field(default_factory=dict)
    class_names: tuple[str, ...] = CLASSES
    empty: bool = False

    def to_dict(self) -> dict:
        return {
            "iou_threshold": self.iou_threshold,
            "map": self.map,
            "empty": self.empty,
            "classes": [
                {
                    "class_id": c,
                    "name": name,
                    "num_gt": self.num_gt.get(c, 0),
                    "ap": self.per_class_ap.get(c),
                }
                for c, name in enumerate(self.class_names)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        width = max(len("Class"), max(len(n) for n in self.class_names), len("Average"))
        lines = [f"mAP@{self.iou_threshold:g}", f"{'Class':<{width}}  {'GT':>5}  {'AP':>7}", "-" * (width + 16)]
        for c, name in enumerate(self.class_names):
            name = name[:1].upper() + name[1:]
            ap = self.per_class_ap.get(c)
            cell = f"{100 * ap:6.2f}%" if ap is not None else "    n/a"
            lines.append(f"{name:<{width}}  {self.num_gt.get(c, 0):>5}  {cell}")
        lines.append("-" * (width + 16))
        lines.append(f"{'Average':<{width}}  {sum(self.num_gt.values()):>5}  {100 * self.map:6.2f}%")
        if self.empty:
            lines.append("warning: no ground-truth objects in this split")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class_id", "class", "rank", "recall", "precision"])
        for c in sorted(self.pr_curves):
            for rank, (r, p) in enumerate(self.pr_curves[c], start=1):
                writer.writerow([c, self.class_names[c], rank, repr(r), repr(p)])
        return buf.getvalue()


def mean_ap(
    dets: Sequence[Detection],
    gts: Iterable,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    class_names: Sequence[str] = CLASSES,
) -> EvalReport:
    """Per-class AP and their mean over classes that have ground truth."""
    gts = [_as_ground_truth(g) for g in gts]
    flags = match_detections(dets, gts, iou_threshold)
    num_gt = {c: 0 for c in range(len(class_names))}
    for g in gts:
        num_gt[g.class_id] = num_gt.get(g.class_id, 0) + 1
    per_class, curves = {}, {}
    for c in range(len(class_names)):
        idx = [i for i in _ranked(dets) if dets[i].class_id == c]
        ranked_flags = [flags[i] for i in idx]
        if num_gt[c] > 0:
            per_class[c] = average_precision(ranked_flags, num_gt[c])
            curves[c] = precision_recall(ranked_flags, num_gt[c])
    empty = not per_class
    m = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return EvalReport(per_class, m, curves, iou_threshold, num_gt, tuple(class_names), empty)


def detections_from_output(output: DetectionOutput, image_id: str) -> list[Detection]:
    """Keep each query whose best real class beats the no-object probability."""
    probs = output.probabilities()
    real = probs[:, :-1]
    classes = real.argmax(axis=1)
    boxes = output.boxes.data
    dets = []
    for q in range(probs.shape[0]):
        score = float(real[q, classes[q]])
        if probs[q, -1] > score:
            continue
        cx, cy, w, h = (float(v) for v in boxes[q])
        dets.append(Detection(image_id, int(classes[q]), min(1.0, score), BoundingBox(cx, cy, w, h)))
    return dets
