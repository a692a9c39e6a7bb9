"""Top-down face proposals from dense per-position network outputs.

The dense grid is half the input image resolution along both axes. Every
grid position carries an 11-way class distribution (background + ten
keypoint labels) and eight transform parameters. A position whose argmax is
a keypoint label spawns one proposal: the mean face projected through the
position's transform, with the translation read as an offset from the
generating position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .errors import DegenerateShape
from .geometry import (
    BoundingBox,
    Ellipse,
    Keypoints2D,
    MeanFace3D,
    NUM_KEYPOINTS,
    TransformParams,
)

NUM_CLASSES = NUM_KEYPOINTS + 1  # ten keypoint labels plus background (0)

# The dense grid is half the input image per axis; multiply grid coordinates
# by this factor to land in input-image coordinates.
GRID_TO_IMAGE = 2.0


@dataclass
class DenseOutputs:
    """Per-position class probabilities and transform parameters.

    ``class_probs`` has shape (11, height, width); channel 0 is background
    and channel ``i`` (1..10) is keypoint label ``i``. ``transform`` has
    shape (8, height, width) in the flat layout of
    ``TransformParams.from_flat``, with the translation interpreted as an
    offset from the generating grid position. Row index is the y coordinate,
    measured from the bottom.
    """

    class_probs: np.ndarray
    transform: np.ndarray

    def __post_init__(self):
        self.class_probs = np.asarray(self.class_probs, dtype=np.float64)
        self.transform = np.asarray(self.transform, dtype=np.float64)
        if self.class_probs.ndim != 3 or self.class_probs.shape[0] != NUM_CLASSES:
            raise ValueError(f"class_probs must be (11, H, W), got {self.class_probs.shape}")
        if self.transform.shape != (8,) + self.class_probs.shape[1:]:
            raise ValueError(
                f"transform must be (8, H, W) matching class_probs, got {self.transform.shape}"
            )
        if np.any(self.class_probs < 0.0):
            raise ValueError("class probabilities must be non-negative")
        sums = self.class_probs.sum(axis=0)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ValueError("class probabilities must sum to 1 at every position")

    @property
    def height(self) -> int:
        return self.class_probs.shape[1]

    @property
    def width(self) -> int:
        return self.class_probs.shape[2]


@dataclass
class FaceProposal:
    """A scored face hypothesis generated at one grid position.

    Keypoints and the derived box/ellipse are in input-image coordinates;
    ``source`` is the (x, y) grid position that generated the proposal;
    ``score`` is the faceness log-probability sum (always <= 0).
    """

    keypoints: Keypoints2D
    source: tuple[int, int]
    score: float
    bbox: BoundingBox
    ellipse: Ellipse | None = None


def faceness_score(k: Keypoints2D, d: DenseOutputs) -> float:
    """Sum of log-probabilities of the ten keypoints under the dense map.

    ``k`` must be in the dense grid's own coordinate frame. Each keypoint is
    looked up at its nearest grid cell (clamped to the grid) in its own
    label channel. A zero probability anywhere yields -inf, which ranks the
    proposal last.
    """
    xs = np.clip(np.floor(k.points[:, 0] + 0.5), 0, d.width - 1).astype(np.intp)
    ys = np.clip(np.floor(k.points[:, 1] + 0.5), 0, d.height - 1).astype(np.intp)
    labels = np.arange(1, NUM_KEYPOINTS + 1)
    probs = d.class_probs[labels, ys, xs]
    with np.errstate(divide="ignore"):
        return float(np.sum(np.log(probs)))


def proposals_from_dense(
    d: DenseOutputs,
    face: MeanFace3D,
    keypoint_threshold: float = 0.5,
) -> list[FaceProposal]:
    """Generate one scored proposal per confident keypoint-classified position.

    A position spawns a proposal when its argmax class is a keypoint label
    and the maximum keypoint probability is at least ``keypoint_threshold``.
    Positions whose keypoints collapse to a degenerate box or ellipse are
    skipped.
    """
    if not 0.0 <= keypoint_threshold < 1.0:
        raise ValueError("keypoint_threshold must be in [0, 1)")

    labels = np.argmax(d.class_probs, axis=0)
    max_kp = d.class_probs[1:].max(axis=0)
    candidates = (labels >= 1) & (max_kp >= keypoint_threshold)

    out: list[FaceProposal] = []
    ys, xs = np.nonzero(candidates)
    for y, x in zip(ys.tolist(), xs.tolist()):
        flat = d.transform[:, y, x]
        t = TransformParams(
            a=flat[:6].reshape(2, 3),
            mu=flat[6:8] + np.array([x, y], dtype=np.float64),
        )
        kp_grid = geometry.project(face, t)
        score = faceness_score(kp_grid, d)
        kp_image = Keypoints2D(points=kp_grid.points * GRID_TO_IMAGE)
        try:
            bbox = geometry.face_bbox(kp_image)
            ellipse = geometry.face_ellipse(kp_image)
        except DegenerateShape:
            continue
        out.append(
            FaceProposal(keypoints=kp_image, source=(x, y), score=score, bbox=bbox, ellipse=ellipse)
        )
    return out


def nms(proposals: list[FaceProposal], threshold: float) -> list[FaceProposal]:
    """Greedy non-maximum suppression under the asymmetric overlap.

    Proposals are visited by descending score (ties broken by source
    position in row-major order, for determinism). A surviving proposal
    suppresses any lower-ranked candidate whose own area is covered by at
    least ``threshold``, i.e. the overlap denominator is the candidate's
    area.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must be in (0, 1]")
    order = sorted(
        range(len(proposals)),
        key=lambda i: (-proposals[i].score, proposals[i].source[1], proposals[i].source[0]),
    )
    kept: list[FaceProposal] = []
    suppressed = np.zeros(len(proposals), dtype=bool)
    for rank, i in enumerate(order):
        if suppressed[i]:
            continue
        best = proposals[i]
        kept.append(best)
        for j in order[rank + 1:]:
            if suppressed[j]:
                continue
            if geometry.overlap_asym(best.bbox, proposals[j].bbox) >= threshold:
                suppressed[j] = True
    return kept
