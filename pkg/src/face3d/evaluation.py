"""Detection scoring: greedy matching, ROC sweeps, recall and accuracy.

Matching is the standard benchmark protocol: detections are processed in
descending score order and each greedily claims the unmatched ground truth
it overlaps most. Discrete mode credits a match with 1 when the box IoU
clears the threshold; continuous mode credits the real-valued ellipse
overlap of the matched pair. A detection that claims nothing (or fails the
discrete threshold) is a false positive and leaves the ground truth
available.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .errors import EmptySample, MissingEllipse
from .geometry import BoundingBox, Ellipse
from .losses import TrainingPoints
from .proposals import DenseOutputs, NUM_CLASSES

ELLIPSE_GRID_RESOLUTION = 256


@dataclass
class DetMatch:
    """One detection's outcome, recorded in descending-score order."""

    det_index: int
    gt_index: int | None
    overlap: float
    score: float
    credit: float  # 1/0 in discrete mode, the overlap ratio in continuous


@dataclass
class MatchResult:
    """Per-image matching outcome plus cumulative counts by score."""

    matches: list[DetMatch]
    n_gt: int

    @property
    def cumulative_tp(self) -> np.ndarray:
        return np.cumsum([1 if m.gt_index is not None else 0 for m in self.matches])

    @property
    def cumulative_fp(self) -> np.ndarray:
        return np.cumsum([0 if m.gt_index is not None else 1 for m in self.matches])


def _det_fields(det):
    if isinstance(det, tuple):
        return det  # (bbox, score, ellipse-or-None)
    return det.bbox, det.score, getattr(det, "ellipse", None)


def _gt_fields(gt):
    if isinstance(gt, tuple):
        return gt  # (bbox, ellipse-or-None)
    return gt.bbox, getattr(gt, "ellipse", None)


def match_detections(dets, gts, mode: str = "discrete", iou_threshold: float = 0.5) -> MatchResult:
    """Greedily match one image's detections against its ground truths.

    ``dets`` is a sequence of objects (or tuples) carrying bbox, score and
    optional ellipse; ``gts`` carries bbox and optional ellipse. Equal
    scores keep input order.

    Raises:
        MissingEllipse: in continuous mode when any side lacks an ellipse.
    """
    if mode not in ("discrete", "continuous"):
        raise ValueError(f"unknown mode {mode!r}")
    parsed_dets = [_det_fields(d) for d in dets]
    parsed_gts = [_gt_fields(g) for g in gts]
    if mode == "continuous":
        if any(e is None for _, _, e in parsed_dets) or any(e is None for _, e in parsed_gts):
            raise MissingEllipse("continuous mode requires ellipses on detections and ground truth")

    order = sorted(range(len(parsed_dets)), key=lambda i: -parsed_dets[i][1])
    taken = [False] * len(parsed_gts)
    matches: list[DetMatch] = []
    for i in order:
        bbox, score, ellipse = parsed_dets[i]
        best_overlap, best_j = 0.0, None
        for j, (gbox, gell) in enumerate(parsed_gts):
            if taken[j]:
                continue
            if mode == "discrete":
                v = geometry.iou(bbox, gbox)
            else:
                v = geometry.ellipse_overlap(ellipse, gell, ELLIPSE_GRID_RESOLUTION)
            if v > best_overlap:
                best_overlap, best_j = v, j
        if mode == "discrete":
            if best_j is not None and best_overlap >= iou_threshold:
                taken[best_j] = True
                matches.append(DetMatch(i, best_j, best_overlap, score, 1.0))
            else:
                matches.append(DetMatch(i, None, best_overlap, score, 0.0))
        else:
            if best_j is not None and best_overlap > 0.0:
                taken[best_j] = True
                matches.append(DetMatch(i, best_j, best_overlap, score, best_overlap))
            else:
                matches.append(DetMatch(i, None, 0.0, score, 0.0))
    return MatchResult(matches=matches, n_gt=len(parsed_gts))


@dataclass
class RocPoint:
    fp: int
    score_threshold: float
    recall: float


def roc_points(results) -> list[RocPoint]:
    """Sweep score thresholds over all matches and emit (FP, recall) points.

    One point per distinct detection score, in decreasing-threshold order;
    recall is total credit over total ground truth (the continuous credit
    sums the matched overlap ratios). An empty detection set yields the
    single point (0, 0).
    """
    all_matches = [m for r in results for m in r.matches]
    total_gt = sum(r.n_gt for r in results)
    if not all_matches:
        return [RocPoint(fp=0, score_threshold=float("inf"), recall=0.0)]

    scores = np.array([m.score for m in all_matches])
    credits = np.array([m.credit for m in all_matches])
    is_fp = np.array([m.gt_index is None for m in all_matches])

    points = []
    for threshold in sorted(set(scores.tolist()), reverse=True):
        above = scores >= threshold
        fp = int(np.count_nonzero(is_fp & above))
        credit = float(np.sum(credits[above]))
        recall = credit / total_gt if total_gt else 0.0
        points.append(RocPoint(fp=fp, score_threshold=float(threshold), recall=recall))
    return points


def proposal_recall(proposals_per_image, gts_per_image, iou_threshold: float = 0.5):
    """Fraction of ground truths covered by any proposal at the IoU threshold.

    Returns (recall, mean proposals per image). ``proposals_per_image``
    holds per-image sequences of objects with a ``bbox`` (or raw boxes);
    ``gts_per_image`` per-image sequences of ground-truth boxes.
    """
    n_images = len(proposals_per_image)
    if n_images != len(gts_per_image):
        raise ValueError("need one proposal list per ground-truth list")
    covered = 0
    total = 0
    n_props = 0
    for props, gts in zip(proposals_per_image, gts_per_image):
        boxes = [p if isinstance(p, BoundingBox) else p.bbox for p in props]
        n_props += len(boxes)
        for gt in gts:
            gt_box = gt if isinstance(gt, BoundingBox) else gt.bbox
            total += 1
            if any(geometry.iou(b, gt_box) >= iou_threshold for b in boxes):
                covered += 1
    recall = covered / total if total else 0.0
    mean_props = n_props / n_images if n_images else 0.0
    return recall, mean_props


@dataclass
class KeypointAccuracy:
    per_class: dict[int, float]   # class label -> accuracy, classes present only
    average: float                # mean over present classes


def keypoint_accuracy(d: DenseOutputs, pts: TrainingPoints) -> KeypointAccuracy:
    """Argmax-class accuracy at the sampled positions, per label and averaged."""
    if pts.total == 0:
        raise EmptySample("no sampled points")
    positions = np.vstack([pts.positive_positions, pts.negative_positions])
    labels = np.concatenate(
        [pts.positive_labels, np.zeros(len(pts.negative_positions), dtype=np.intp)]
    )
    predicted = np.argmax(d.class_probs[:, positions[:, 1], positions[:, 0]], axis=0)
    per_class: dict[int, float] = {}
    for c in range(NUM_CLASSES):
        mask = labels == c
        if mask.any():
            per_class[c] = float(np.mean(predicted[mask] == c))
    average = float(np.mean(list(per_class.values())))
    return KeypointAccuracy(per_class=per_class, average=average)
