"""Multi-task training objective and its analytic gradients.

Three terms: an 11-way classification loss over sampled grid positions, a
smooth-L1 loss between ground-truth keypoints and the keypoints predicted at
each labeled position, and a smooth-L1 loss on bounding-box regression
offsets. The total is their unweighted sum. Box regression treats proposal
coordinates as constants: no gradient flows from the box term back through
the proposal-generating transform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBox, EmptySample, LengthMismatch
from .geometry import BoundingBox
from .proposals import DenseOutputs


@dataclass
class TrainingPoints:
    """Sampled grid positions for the classification loss.

    Positives carry keypoint labels 1..10 (one row per position, after any
    neighborhood expansion); negatives are background positions, label 0.
    ``m`` is the number of labeled ground-truth keypoints before expansion.
    """

    positive_positions: np.ndarray  # (P, 2) int, grid (x, y)
    positive_labels: np.ndarray     # (P,) int in 1..10
    negative_positions: np.ndarray  # (N, 2) int
    m: int

    def __post_init__(self):
        self.positive_positions = np.asarray(self.positive_positions, dtype=np.intp).reshape(-1, 2)
        self.positive_labels = np.asarray(self.positive_labels, dtype=np.intp).reshape(-1)
        self.negative_positions = np.asarray(self.negative_positions, dtype=np.intp).reshape(-1, 2)
        if len(self.positive_positions) != len(self.positive_labels):
            raise LengthMismatch("one label per positive position required")
        if len(self.positive_labels) and (
            self.positive_labels.min() < 1 or self.positive_labels.max() > 10
        ):
            raise ValueError("positive labels must be in 1..10")

    @property
    def total(self) -> int:
        return len(self.positive_positions) + len(self.negative_positions)


def cls_loss(d: DenseOutputs, pts: TrainingPoints) -> tuple[float, np.ndarray]:
    """Mean negative log-probability of the true label over all sampled points.

    Returns the loss and its gradient with respect to the pre-softmax class
    scores, shaped like ``d.class_probs`` (softmax-cross-entropy gradient:
    prob minus one-hot, averaged over the sample).
    """
    n = pts.total
    if n == 0:
        raise EmptySample("no sampled points")
    positions = np.vstack([pts.positive_positions, pts.negative_positions])
    labels = np.concatenate(
        [pts.positive_labels, np.zeros(len(pts.negative_positions), dtype=np.intp)]
    )
    xs, ys = positions[:, 0], positions[:, 1]
    p_true = d.class_probs[labels, ys, xs]
    with np.errstate(divide="ignore"):
        loss = float(-np.mean(np.log(p_true)))

    grad = np.zeros_like(d.class_probs)
    # Accumulate (duplicate positions must add, hence add.at).
    np.add.at(grad, (slice(None), ys, xs), d.class_probs[:, ys, xs] / n)
    np.add.at(grad, (labels, ys, xs), -1.0 / n)
    return loss, grad


def smooth_l1(a):
    """0.5*a^2 for |a| < 1, |a| - 0.5 otherwise (elementwise)."""
    a = np.asarray(a, dtype=np.float64)
    out = np.where(np.abs(a) < 1.0, 0.5 * a * a, np.abs(a) - 0.5)
    return float(out) if out.ndim == 0 else out


def smooth_l1_deriv(a):
    """Derivative of smooth_l1: a clamped to [-1, 1] (elementwise)."""
    a = np.asarray(a, dtype=np.float64)
    out = np.clip(a, -1.0, 1.0)
    return float(out) if out.ndim == 0 else out


def keypoint_loc_loss(
    gt_labels: np.ndarray,
    gt_points: np.ndarray,
    predicted_sets: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Smooth-L1 keypoint location loss between ground truth and predictions.

    ``gt_labels`` (m,) and ``gt_points`` (m, 2) describe the labeled
    keypoints; ``predicted_sets`` (m, 10, 2) holds one full predicted
    keypoint set per labeled position. Ground-truth keypoint ``i`` is
    compared, per axis, against its label's prediction from every set ``j``;
    the result is averaged with the 1/m^2 factor.

    Returns the loss and its gradient with respect to ``predicted_sets``
    (zero at keypoint rows whose labels do not occur in the ground truth).
    """
    gt_labels = np.asarray(gt_labels, dtype=np.intp).reshape(-1)
    gt_points = np.asarray(gt_points, dtype=np.float64).reshape(-1, 2)
    predicted_sets = np.asarray(predicted_sets, dtype=np.float64)
    m = len(gt_labels)
    if m == 0:
        raise EmptySample("no labeled keypoints")
    if len(gt_points) != m:
        raise LengthMismatch("one point per label required")
    if predicted_sets.shape != (m, 10, 2):
        raise LengthMismatch(
            f"expected {m} predicted sets of shape (10, 2), got {predicted_sets.shape}"
        )

    # diff[j, i, :] = gt_i - prediction of gt_i's label from set j
    selected = predicted_sets[:, gt_labels - 1, :]
    diff = gt_points[None, :, :] - selected
    loss = float(np.sum(smooth_l1(diff)) / (m * m))

    dsel = -smooth_l1_deriv(diff) / (m * m)
    grad = np.zeros_like(predicted_sets)
    np.add.at(grad, (slice(None), gt_labels - 1, slice(None)), dsel)
    return loss, grad


def _center_form(b: BoundingBox) -> tuple[float, float, float, float]:
    if b.w <= 0.0 or b.h <= 0.0:
        raise DegenerateBox(f"box extents must be positive, got w={b.w}, h={b.h}")
    return b.cx, b.cy, b.w, b.h


@dataclass
class BoxDelta:
    """Scale-invariant center offsets and log-space size ratios."""

    tx: float
    ty: float
    tw: float
    th: float

    def to_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tw, self.th], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "BoxDelta":
        tx, ty, tw, th = np.asarray(arr, dtype=np.float64).reshape(4)
        return cls(float(tx), float(ty), float(tw), float(th))


def bbox_encode(proposal: BoundingBox, gt: BoundingBox) -> BoxDelta:
    """Offsets that carry ``proposal`` onto ``gt``."""
    pcx, pcy, pw, ph = _center_form(proposal)
    gcx, gcy, gw, gh = _center_form(gt)
    return BoxDelta(
        tx=(gcx - pcx) / pw,
        ty=(gcy - pcy) / ph,
        tw=float(np.log(gw / pw)),
        th=float(np.log(gh / ph)),
    )


def bbox_decode(proposal: BoundingBox, delta: BoxDelta) -> BoundingBox:
    """Apply regression offsets to a proposal box (inverse of bbox_encode)."""
    pcx, pcy, pw, ph = _center_form(proposal)
    gw = pw * float(np.exp(delta.tw))
    gh = ph * float(np.exp(delta.th))
    gcx = pcx + delta.tx * pw
    gcy = pcy + delta.ty * ph
    return BoundingBox(x=gcx - 0.5 * gw, y=gcy - 0.5 * gh, w=gw, h=gh)


def _delta_array(deltas) -> np.ndarray:
    if isinstance(deltas, np.ndarray):
        return deltas.reshape(-1, 4).astype(np.float64)
    return np.array([d.to_array() for d in deltas], dtype=np.float64).reshape(-1, 4)


def bbox_loss(predicted_deltas, target_deltas) -> tuple[float, np.ndarray]:
    """Mean over proposals of the per-coordinate smooth-L1 offset error.

    Accepts (K, 4) arrays or sequences of BoxDelta. Returns the loss and its
    gradient with respect to the predicted deltas, shape (K, 4).
    """
    pred = _delta_array(predicted_deltas)
    target = _delta_array(target_deltas)
    if len(pred) != len(target):
        raise LengthMismatch(f"{len(pred)} predictions vs {len(target)} targets")
    k = len(pred)
    if k == 0:
        raise EmptySample("no box proposals")
    diff = pred - target
    loss = float(np.sum(smooth_l1(diff)) / k)
    grad = smooth_l1_deriv(diff) / k
    return loss, grad


def total_loss(cls: float, loc_pt: float, loc_box: float) -> float:
    """Unweighted sum of the three loss terms."""
    return cls + loc_pt + loc_box
