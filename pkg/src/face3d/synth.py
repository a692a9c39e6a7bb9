"""Synthetic scenes with exact face ground truth.

Each face is the mean face pushed through a random in-plane similarity
(rotation within +/-30 degrees, random scale and translation). Every
keypoint is rendered as a colored anisotropic blob that rotates and scales
with the face, plus a small white satellite blob at a fixed model-frame
offset so the orientation is locally observable. Faces sit on low-frequency
textured noise; scenes are fully determined by their RNG.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geometry
from .errors import PlacementFailure
from .geometry import (
    BoundingBox,
    Keypoints2D,
    MeanFace3D,
    TransformParams,
    default_mean_face,
)
from .network import FeatureMap

# One distinct RGB color per keypoint label (1..10).
STAMP_COLORS = np.array(
    [
        (1.00, 0.15, 0.15),
        (0.15, 1.00, 0.15),
        (0.20, 0.30, 1.00),
        (1.00, 0.90, 0.10),
        (1.00, 0.20, 1.00),
        (0.10, 0.95, 0.95),
        (1.00, 0.55, 0.10),
        (0.55, 0.15, 1.00),
        (0.45, 1.00, 0.45),
        (0.95, 0.75, 0.75),
    ],
    dtype=np.float64,
)

# Model-frame offset of each keypoint's white satellite blob; the rendered
# offset is the face transform applied to it, which makes in-plane rotation
# and scale visible in a local window.
SATELLITE_OFFSET = np.array([0.30, 0.0])

MAX_ROTATION_DEG = 30.0
DEFAULT_SCALE_RANGE = (6.5, 9.5)
MAX_PAIRWISE_IOU = 0.3


@dataclass
class FaceInstance:
    """Ground truth for one face, in image coordinates.

    ``transform`` is None for faces loaded from annotation files (only the
    renderer knows it). ``visible`` flags keypoints that participate in
    training; rendered faces are fully visible.
    """

    transform: TransformParams | None
    keypoints: Keypoints2D
    bbox: BoundingBox
    visible: np.ndarray | None = None

    def __post_init__(self):
        if self.visible is None:
            self.visible = np.ones(len(self.keypoints.points), dtype=bool)
        else:
            self.visible = np.asarray(self.visible, dtype=bool)


@dataclass
class SyntheticScene:
    image: FeatureMap
    faces: list[FaceInstance]
    seed: int | None = None


def _textured_noise(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    block = 8
    coarse = rng.uniform(0.0, 0.22, size=(3, max(1, h // block), max(1, w // block)))
    base = np.kron(coarse, np.ones((block, block)))[:, :h, :w]
    if base.shape[1] < h or base.shape[2] < w:
        base = np.pad(base, ((0, 0), (0, h - base.shape[1]), (0, w - base.shape[2])), mode="edge")
    return base + rng.uniform(0.0, 0.05, size=(3, h, w))


def _stamp(image: np.ndarray, center: np.ndarray, color: np.ndarray,
           sigma_major: float, sigma_minor: float, angle: float, amplitude: float = 0.9):
    """Add one anisotropic Gaussian blob, clipped to the canvas."""
    h, w = image.shape[1:]
    radius = int(math.ceil(3.0 * sigma_major))
    x0 = max(0, int(math.floor(center[0])) - radius)
    x1 = min(w - 1, int(math.ceil(center[0])) + radius)
    y0 = max(0, int(math.floor(center[1])) - radius)
    y1 = min(h - 1, int(math.ceil(center[1])) + radius)
    if x1 < x0 or y1 < y0:
        return
    xs = np.arange(x0, x1 + 1) - center[0]
    ys = np.arange(y0, y1 + 1) - center[1]
    dx = xs[None, :]
    dy = ys[:, None]
    c, s = math.cos(angle), math.sin(angle)
    u = (dx * c + dy * s) / sigma_major
    v = (-dx * s + dy * c) / sigma_minor
    blob = amplitude * np.exp(-0.5 * (u * u + v * v))
    image[:, y0:y1 + 1, x0:x1 + 1] += color[:, None, None] * blob[None, :, :]


def _render_face(image: np.ndarray, face: MeanFace3D, t: TransformParams,
                 scale: float, angle: float):
    kp = geometry.project(face, t).points
    sat = t.a[:, :2] @ SATELLITE_OFFSET  # in-plane part only; z column is zero
    for i in range(len(kp)):
        _stamp(image, kp[i], STAMP_COLORS[i],
               sigma_major=0.20 * scale, sigma_minor=0.10 * scale, angle=angle)
        _stamp(image, kp[i] + sat, np.array([1.0, 1.0, 1.0]),
               sigma_major=0.07 * scale, sigma_minor=0.07 * scale, angle=0.0, amplitude=0.8)


def synth_scene(
    rng: np.random.Generator,
    canvas_size: tuple[int, int] = (64, 64),
    n_faces: int = 1,
    scale_range: tuple[float, float] = DEFAULT_SCALE_RANGE,
    face: MeanFace3D | None = None,
    seed: int | None = None,
    max_attempts: int = 60,
) -> SyntheticScene:
    """Render a scene with ``n_faces`` faces and exact ground truth.

    ``canvas_size`` is (height, width). Faces are placed so every keypoint
    and the extrapolated top of the head stay inside the canvas and no two
    face boxes overlap by IoU >= 0.3.

    Raises:
        PlacementFailure: if a face cannot be placed within the attempt
            budget (canvas too small or too crowded).
    """
    h, w = canvas_size
    face = face or default_mean_face()
    image = _textured_noise(rng, h, w)
    placed: list[FaceInstance] = []
    rendering = []

    for _ in range(n_faces):
        ok = False
        for _attempt in range(max_attempts):
            angle = math.radians(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG))
            scale = rng.uniform(*scale_range)
            t0 = TransformParams.similarity(scale, angle)
            kp0 = geometry.project(face, t0)
            covered = np.vstack([kp0.points, geometry.top_of_head(kp0)])
            margin = 1.0
            lo = covered.min(axis=0)
            hi = covered.max(axis=0)
            mu_lo = margin - lo
            mu_hi = np.array([w - 1.0, h - 1.0]) - margin - hi
            if np.any(mu_hi < mu_lo):
                continue  # face too large for the canvas at this scale
            mu = np.array([rng.uniform(mu_lo[0], mu_hi[0]), rng.uniform(mu_lo[1], mu_hi[1])])
            t = TransformParams(a=t0.a.copy(), mu=mu)
            kp = geometry.project(face, t)
            bbox = geometry.face_bbox(kp)
            if any(geometry.iou(bbox, other.bbox) >= MAX_PAIRWISE_IOU for other in placed):
                continue
            placed.append(FaceInstance(transform=t, keypoints=kp, bbox=bbox))
            rendering.append((t, scale, angle))
            ok = True
            break
        if not ok:
            raise PlacementFailure(
                f"could not place face {len(placed) + 1} of {n_faces} on a {h}x{w} canvas"
            )

    for t, scale, angle in rendering:
        _render_face(image, face, t, scale, angle)
    np.clip(image, 0.0, 1.0, out=image)
    return SyntheticScene(image=FeatureMap(values=image), faces=placed, seed=seed)


def make_dataset(
    n_scenes: int,
    canvas_size: tuple[int, int] = (64, 64),
    faces_range: tuple[int, int] = (1, 2),
    seed: int = 0,
    scale_range: tuple[float, float] = DEFAULT_SCALE_RANGE,
) -> list[SyntheticScene]:
    """Generate scenes with per-scene derived seeds (seed-splitting)."""
    lo, hi = faces_range
    scenes = []
    for i in range(n_scenes):
        scene_seed = seed + i
        rng = np.random.default_rng(scene_seed)
        n_faces = int(rng.integers(lo, hi + 1))
        scenes.append(
            synth_scene(rng, canvas_size, n_faces, scale_range=scale_range, seed=scene_seed)
        )
    return scenes
