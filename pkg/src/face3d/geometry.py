"""3D mean face, its 2D projection, and keypoint-derived shapes.

All functions work in the library's internal coordinate frame: the origin is
the left-bottom corner of the image lattice and y grows upward. On-disk
formats use the conventional top-left raster origin; ``fileio`` converts at
the boundary.

A face pose is an eight-parameter transform: a 2x3 linear map ``a`` (which
absorbs scale and the top two rows of a 3D rotation) plus a 2D translation
``mu``. Projecting the fixed 3D keypoints through it yields the ten predicted
2D keypoints, from which the box and ellipse are constructed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateShape

KEYPOINT_NAMES: tuple[str, ...] = (
    "LeftEyeLeftCorner",
    "RightEyeRightCorner",
    "LeftEar",
    "NoseLeft",
    "NoseRight",
    "RightEar",
    "MouthLeftCorner",
    "MouthRightCorner",
    "ChinCenter",
    "CenterBetweenEyes",
)

NUM_KEYPOINTS = len(KEYPOINT_NAMES)

# Index (0-based) of the two keypoints the top-of-head extrapolation uses.
CHIN_CENTER = KEYPOINT_NAMES.index("ChinCenter")
CENTER_BETWEEN_EYES = KEYPOINT_NAMES.index("CenterBetweenEyes")

# Default 3D keypoint coordinates, in model units: x right, y up, z toward
# the viewer. The face spans roughly [-1, 1] x [-1, 1.9] once the top of the
# head is extrapolated, so a scale factor is approximately "face half-width
# in pixels".
_DEFAULT_POINTS = np.array(
    [
        (-0.62, 0.40, 0.25),   # LeftEyeLeftCorner
        (0.62, 0.40, 0.25),    # RightEyeRightCorner
        (-0.95, 0.00, -0.40),  # LeftEar
        (-0.22, -0.10, 0.55),  # NoseLeft
        (0.22, -0.10, 0.55),   # NoseRight
        (0.95, 0.00, -0.40),   # RightEar
        (-0.38, -0.55, 0.35),  # MouthLeftCorner
        (0.38, -0.55, 0.35),   # MouthRightCorner
        (0.00, -1.00, 0.30),   # ChinCenter
        (0.00, 0.45, 0.45),    # CenterBetweenEyes
    ],
    dtype=np.float64,
)


@dataclass(frozen=True)
class MeanFace3D:
    """Fixed, ordered set of named 3D facial keypoints used as a shape prior.

    ``points`` is a (10, 3) array; row ``i`` carries the keypoint whose class
    label is ``i + 1`` everywhere else in the library (label 0 is background).
    """

    points: np.ndarray
    names: tuple[str, ...] = KEYPOINT_NAMES

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (NUM_KEYPOINTS, 3):
            raise ValueError(f"expected shape {(NUM_KEYPOINTS, 3)}, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("mean face points must be finite")
        if len(self.names) != NUM_KEYPOINTS:
            raise ValueError("need exactly one name per keypoint")
        iu = np.triu_indices(NUM_KEYPOINTS, k=1)
        gaps = np.linalg.norm(pts[iu[0]] - pts[iu[1]], axis=-1)
        if np.any(gaps == 0.0):
            raise ValueError("mean face keypoints must be pairwise distinct")
        object.__setattr__(self, "points", pts)


def default_mean_face() -> MeanFace3D:
    """The built-in ten-keypoint 3D mean face."""
    return MeanFace3D(points=_DEFAULT_POINTS.copy())


@dataclass
class TransformParams:
    """Projected pose: 2x3 linear map ``a`` plus translation ``mu``.

    ``a`` is dimensionless (it folds scale and the in-/out-of-plane rotation
    into one map); ``mu`` is in the units of whatever lattice the projected
    points live on.
    """

    a: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.mu = np.asarray(self.mu, dtype=np.float64)
        if self.a.shape != (2, 3):
            raise ValueError(f"a must be 2x3, got {self.a.shape}")
        if self.mu.shape != (2,):
            raise ValueError(f"mu must have shape (2,), got {self.mu.shape}")
        if not (np.all(np.isfinite(self.a)) and np.all(np.isfinite(self.mu))):
            raise ValueError("transform parameters must be finite")

    @classmethod
    def from_flat(cls, flat: np.ndarray) -> "TransformParams":
        """Build from the flat layout [a00 a01 a02 a10 a11 a12 mu_x mu_y]."""
        flat = np.asarray(flat, dtype=np.float64).reshape(8)
        return cls(a=flat[:6].reshape(2, 3), mu=flat[6:8])

    def to_flat(self) -> np.ndarray:
        return np.concatenate([self.a.reshape(6), self.mu])

    @classmethod
    def similarity(cls, scale: float, angle: float, mu=(0.0, 0.0)) -> "TransformParams":
        """In-plane scale + rotation transform (z column zero)."""
        c, s = math.cos(angle), math.sin(angle)
        a = np.array([[scale * c, -scale * s, 0.0], [scale * s, scale * c, 0.0]])
        return cls(a=a, mu=np.asarray(mu, dtype=np.float64))


@dataclass
class Keypoints2D:
    """Ordered 2D keypoints, one per mean-face entry, bottom-left origin."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (NUM_KEYPOINTS, 2):
            raise ValueError(f"expected shape {(NUM_KEYPOINTS, 2)}, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("keypoints must be finite")
        self.points = pts


@dataclass
class BoundingBox:
    """Axis-aligned box: left-bottom corner (x, y) and positive extents.

    The positive-extent invariant is asserted by the operations that consume
    boxes, not by the constructor, so that malformed boxes can be represented
    and rejected with a typed error where it matters.
    """

    x: float
    y: float
    w: float
    h: float

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def cx(self) -> float:
        return self.x + 0.5 * self.w

    @property
    def cy(self) -> float:
        return self.y + 0.5 * self.h

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass
class Ellipse:
    """Ellipse with center, semi-axes ra >= rb > 0 and major-axis angle.

    ``theta`` is measured from the +x axis, in radians, normalized to
    [0, pi).
    """

    cx: float
    cy: float
    ra: float
    rb: float
    theta: float


def project(face: MeanFace3D, t: TransformParams) -> Keypoints2D:
    """Project the 3D mean face to 2D keypoints: point_i = mu + a @ F_i."""
    return Keypoints2D(points=face.points @ t.a.T + t.mu)


def top_of_head(k: Keypoints2D) -> np.ndarray:
    """Extrapolated top-of-head position: 2*CenterBetweenEyes - ChinCenter."""
    return 2.0 * k.points[CENTER_BETWEEN_EYES] - k.points[CHIN_CENTER]


def _covered_points(k: Keypoints2D, include_top_of_head: bool) -> np.ndarray:
    if include_top_of_head:
        return np.vstack([k.points, top_of_head(k)])
    return k.points


def face_bbox(k: Keypoints2D, include_top_of_head: bool = True) -> BoundingBox:
    """Minimal axis-aligned box covering the keypoints.

    The extrapolated top-of-head point is included by default so the box
    reaches the forehead.

    Raises:
        DegenerateShape: if the covered points have zero extent along either
            axis (e.g. all points coincide).
    """
    pts = _covered_points(k, include_top_of_head)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    w, h = hi - lo
    if w <= 0.0 or h <= 0.0:
        raise DegenerateShape("keypoints span a zero-extent rectangle")
    return BoundingBox(x=float(lo[0]), y=float(lo[1]), w=float(w), h=float(h))


def face_ellipse(k: Keypoints2D, include_top_of_head: bool = True) -> Ellipse:
    """Ellipse inscribed in the minimal rotated rectangle around the face.

    One rectangle side is parallel to the chin-to-top-of-head axis; the
    rectangle is the smallest such covering all keypoints (plus the top of
    the head, included by default). The ellipse takes the rectangle center
    and half side lengths, with the semi-axes ordered so ``ra >= rb``.

    Raises:
        DegenerateShape: if the chin and top-of-head coincide (axis
            undefined) or the rectangle has a zero side.
    """
    chin = k.points[CHIN_CENTER]
    top = top_of_head(k)
    axis = top - chin
    norm = float(np.hypot(axis[0], axis[1]))
    if norm == 0.0:
        raise DegenerateShape("chin and top-of-head coincide; axis undefined")
    e1 = axis / norm                      # along the chin->top axis
    e2 = np.array([-e1[1], e1[0]])        # perpendicular

    pts = _covered_points(k, include_top_of_head)
    along = pts @ e1
    perp = pts @ e2
    half_along = 0.5 * (along.max() - along.min())
    half_perp = 0.5 * (perp.max() - perp.min())
    if half_along <= 0.0 or half_perp <= 0.0:
        raise DegenerateShape("rotated rectangle has a zero side")

    center = 0.5 * (along.max() + along.min()) * e1 + 0.5 * (perp.max() + perp.min()) * e2
    axis_angle = math.atan2(e1[1], e1[0])
    if half_along >= half_perp:
        ra, rb = half_along, half_perp
        theta = axis_angle % math.pi
    else:
        ra, rb = half_perp, half_along
        theta = (axis_angle + 0.5 * math.pi) % math.pi
    return Ellipse(cx=float(center[0]), cy=float(center[1]), ra=float(ra), rb=float(rb), theta=float(theta))


def _intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    return iw * ih


def overlap_asym(a: BoundingBox, b: BoundingBox) -> float:
    """Asymmetric overlap |a & b| / |b|.

    Used as the suppression criterion: it is large whenever ``b`` is mostly
    contained in ``a``, regardless of how much bigger ``a`` is.
    """
    area_b = b.area
    if area_b <= 0.0:
        return 0.0
    return _intersection_area(a, b) / area_b


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Standard intersection-over-union of two boxes."""
    inter = _intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def _ellipse_half_extents(e: Ellipse) -> tuple[float, float]:
    c, s = math.cos(e.theta), math.sin(e.theta)
    ex = math.sqrt((e.ra * c) ** 2 + (e.rb * s) ** 2)
    ey = math.sqrt((e.ra * s) ** 2 + (e.rb * c) ** 2)
    return ex, ey


def _ellipse_mask(e: Ellipse, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    c, s = math.cos(e.theta), math.sin(e.theta)
    dx = xs[None, :] - e.cx
    dy = ys[:, None] - e.cy
    u = (dx * c + dy * s) / e.ra
    v = (-dx * s + dy * c) / e.rb
    return u * u + v * v <= 1.0


def ellipse_overlap(e1: Ellipse, e2: Ellipse, grid_resolution: int = 256) -> float:
    """Intersection-over-union of two ellipse interiors, by rasterization.

    Both ellipses are rasterized onto a shared grid of
    ``grid_resolution x grid_resolution`` cells covering their joint
    bounding box; the ratio of intersection to union cell counts is
    returned.
    """
    if grid_resolution < 64:
        raise ValueError("grid_resolution must be at least 64")
    ex1, ey1 = _ellipse_half_extents(e1)
    ex2, ey2 = _ellipse_half_extents(e2)
    x_lo = min(e1.cx - ex1, e2.cx - ex2)
    x_hi = max(e1.cx + ex1, e2.cx + ex2)
    y_lo = min(e1.cy - ey1, e2.cy - ey2)
    y_hi = max(e1.cy + ey1, e2.cy + ey2)

    n = int(grid_resolution)
    xs = x_lo + (np.arange(n) + 0.5) * ((x_hi - x_lo) / n)
    ys = y_lo + (np.arange(n) + 0.5) * ((y_hi - y_lo) / n)
    m1 = _ellipse_mask(e1, xs, ys)
    m2 = _ellipse_mask(e2, xs, ys)
    union = np.count_nonzero(m1 | m2)
    if union == 0:
        return 0.0
    return np.count_nonzero(m1 & m2) / union
