"""On-disk formats: PPM images, annotation/detection files, configs.

Disk coordinates follow the usual raster convention (origin at the top-left
corner, y down); the library works with a bottom-left origin, y up. The
conversion is the reflection y -> (H - 1) - y applied to points, to box
corners (a box reflects the interval [y, y + h]) and to ellipse centers;
ellipse angles negate modulo pi. Image heights come from the dataset
manifest so annotation files can be parsed without decoding pixels.

Annotation and detection files are line-oriented blocks: the image path,
the face/detection count, then one line per face or detection.

  face line:      x y w h  (label x y visible) x10  [ra rb theta cx cy]
  detection line: x y w h score  [ra rb theta cx cy]  [(x y) x10]

Token counts disambiguate the optional parts.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FileFormatError
from .geometry import BoundingBox, Ellipse, Keypoints2D, NUM_KEYPOINTS
from .network import FeatureMap
from .synth import FaceInstance, SyntheticScene

MANIFEST_NAME = "manifest.txt"
ANNOTATIONS_NAME = "annotations.txt"


# ---------------------------------------------------------------------------
# coordinate conversion (internal bottom-left <-> disk top-left)
# ---------------------------------------------------------------------------

def point_to_disk(x: float, y: float, height: int) -> tuple[float, float]:
    return x, (height - 1) - y


def point_from_disk(x: float, y: float, height: int) -> tuple[float, float]:
    return x, (height - 1) - y


def box_to_disk(b: BoundingBox, height: int) -> tuple[float, float, float, float]:
    return b.x, (height - 1) - b.y - b.h, b.w, b.h


def box_from_disk(x: float, y: float, w: float, h: float, height: int) -> BoundingBox:
    return BoundingBox(x=x, y=(height - 1) - y - h, w=w, h=h)


def ellipse_to_disk(e: Ellipse, height: int) -> tuple[float, float, float, float, float]:
    cx, cy = point_to_disk(e.cx, e.cy, height)
    return e.ra, e.rb, (-e.theta) % np.pi, cx, cy


def ellipse_from_disk(ra: float, rb: float, theta: float, cx: float, cy: float,
                      height: int) -> Ellipse:
    x, y = point_from_disk(cx, cy, height)
    return Ellipse(cx=x, cy=y, ra=ra, rb=rb, theta=(-theta) % np.pi)


# ---------------------------------------------------------------------------
# PPM images (binary P6, 8-bit)
# ---------------------------------------------------------------------------

def write_ppm(path, image: FeatureMap):
    """Write a (3, H, W) float map in [0, 1] as binary PPM."""
    if image.channels != 3:
        raise ValueError("PPM output needs a 3-channel image")
    values = np.clip(image.values, 0.0, 1.0)
    raster = np.rint(values * 255.0).astype(np.uint8)
    raster = raster[:, ::-1, :]                  # internal y-up -> raster y-down
    raster = raster.transpose(1, 2, 0)           # H, W, C interleaved
    with open(path, "wb") as f:
        f.write(f"P6\n{image.width} {image.height}\n255\n".encode("ascii"))
        f.write(raster.tobytes())


def read_ppm(path) -> FeatureMap:
    """Read a binary PPM into a (3, H, W) float map in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    # header: magic, width, height, maxval, single whitespace, then raster
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # the single whitespace byte after maxval
    if fields[0] != b"P6":
        raise FileFormatError(path, 1, f"expected P6 magic, got {fields[0]!r}")
    try:
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError as exc:
        raise FileFormatError(path, 1, f"bad PPM header: {exc}") from exc
    if maxval != 255:
        raise FileFormatError(path, 1, f"only maxval 255 supported, got {maxval}")
    raster = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    if raster.size != w * h * 3:
        raise FileFormatError(path, 1, "truncated PPM raster")
    values = raster.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0
    return FeatureMap(values=values[:, ::-1, :].copy())


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------

@dataclass
class FaceAnnotation:
    """One annotated face, internal coordinates."""

    bbox: BoundingBox
    keypoints: Keypoints2D
    visible: np.ndarray
    ellipse: Ellipse | None = None


@dataclass
class AnnotationRecord:
    image_path: str
    faces: list[FaceAnnotation]


@dataclass
class Detection:
    """One detection, internal coordinates."""

    bbox: BoundingBox
    score: float
    ellipse: Ellipse | None = None
    keypoints: Keypoints2D | None = None


@dataclass
class DetectionRecord:
    image_path: str
    detections: list[Detection]


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def write_manifest(path, entries: list[tuple[str, int, int]]):
    """Write "name width height" lines; names must not contain whitespace."""
    with open(path, "w", encoding="ascii") as f:
        for name, w, h in entries:
            if any(ch.isspace() for ch in name):
                raise ValueError(f"image name may not contain whitespace: {name!r}")
            f.write(f"{name} {w} {h}\n")


def read_manifest(path) -> list[tuple[str, int, int]]:
    entries = []
    with open(path, "r", encoding="ascii") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise FileFormatError(path, line_no, "expected: name width height")
            try:
                entries.append((parts[0], int(parts[1]), int(parts[2])))
            except ValueError as exc:
                raise FileFormatError(path, line_no, f"bad dimensions: {exc}") from exc
    return entries


# ---------------------------------------------------------------------------
# annotation files
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def _check_bounds(path, line_no, xs, ys, width, height):
    slack = 0.5
    if (np.any(xs < -slack) or np.any(xs > width - 1 + slack)
            or np.any(ys < -slack) or np.any(ys > height - 1 + slack)):
        raise FileFormatError(path, line_no, "coordinates outside image bounds")


def write_annotations(path, records: list[AnnotationRecord], heights: dict[str, int]):
    """Write annotation blocks, converting to disk coordinates."""
    lines = []
    for rec in records:
        h = heights[rec.image_path]
        lines.append(rec.image_path)
        lines.append(str(len(rec.faces)))
        for face in rec.faces:
            tokens = [_fmt(v) for v in box_to_disk(face.bbox, h)]
            for i in range(NUM_KEYPOINTS):
                x, y = point_to_disk(*face.keypoints.points[i], h)
                tokens += [str(i + 1), _fmt(x), _fmt(y), str(int(face.visible[i]))]
            if face.ellipse is not None:
                tokens += [_fmt(v) for v in ellipse_to_disk(face.ellipse, h)]
            lines.append(" ".join(tokens))
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))


def read_annotations(path, dims: dict[str, tuple[int, int]]) -> list[AnnotationRecord]:
    """Parse annotation blocks; ``dims`` maps image name to (width, height)."""
    with open(path, "r", encoding="ascii") as f:
        lines = f.read().splitlines()
    records = []
    i = 0
    n_base = 4 + 4 * NUM_KEYPOINTS
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        name = lines[i].strip()
        if name not in dims:
            raise FileFormatError(path, i + 1, f"image {name!r} not in manifest")
        width, height = dims[name]
        if i + 1 >= len(lines):
            raise FileFormatError(path, i + 1, "missing face count")
        try:
            count = int(lines[i + 1])
        except ValueError as exc:
            raise FileFormatError(path, i + 2, f"bad face count: {exc}") from exc
        if count < 0:
            raise FileFormatError(path, i + 2, "face count must be >= 0")
        faces = []
        for k in range(count):
            line_no = i + 3 + k
            if line_no - 1 >= len(lines):
                raise FileFormatError(path, line_no, "missing face line")
            tokens = lines[line_no - 1].split()
            if len(tokens) not in (n_base, n_base + 5):
                raise FileFormatError(
                    path, line_no,
                    f"expected {n_base} or {n_base + 5} tokens, got {len(tokens)}",
                )
            try:
                vals = [float(t) for t in tokens]
            except ValueError as exc:
                raise FileFormatError(path, line_no, f"bad number: {exc}") from exc
            bbox = box_from_disk(vals[0], vals[1], vals[2], vals[3], height)
            pts = np.zeros((NUM_KEYPOINTS, 2))
            visible = np.zeros(NUM_KEYPOINTS, dtype=bool)
            seen = set()
            for j in range(NUM_KEYPOINTS):
                label = int(vals[4 + 4 * j])
                if label < 1 or label > NUM_KEYPOINTS or label in seen:
                    raise FileFormatError(path, line_no, f"bad or duplicate label {label}")
                seen.add(label)
                x, y = point_from_disk(vals[5 + 4 * j], vals[6 + 4 * j], height)
                pts[label - 1] = (x, y)
                visible[label - 1] = bool(int(vals[7 + 4 * j]))
            _check_bounds(path, line_no, pts[:, 0], pts[:, 1], width, height)
            ellipse = None
            if len(tokens) == n_base + 5:
                ellipse = ellipse_from_disk(*vals[n_base:n_base + 5], height)
            faces.append(
                FaceAnnotation(bbox=bbox, keypoints=Keypoints2D(points=pts),
                               visible=visible, ellipse=ellipse)
            )
        records.append(AnnotationRecord(image_path=name, faces=faces))
        i += 2 + count
    return records


# ---------------------------------------------------------------------------
# detection files
# ---------------------------------------------------------------------------

def write_detections(path, records: list[DetectionRecord], heights: dict[str, int]):
    lines = []
    for rec in records:
        h = heights[rec.image_path]
        lines.append(rec.image_path)
        lines.append(str(len(rec.detections)))
        for det in rec.detections:
            tokens = [_fmt(v) for v in box_to_disk(det.bbox, h)] + [_fmt(det.score)]
            if det.ellipse is not None:
                tokens += [_fmt(v) for v in ellipse_to_disk(det.ellipse, h)]
            if det.keypoints is not None:
                for i in range(NUM_KEYPOINTS):
                    x, y = point_to_disk(*det.keypoints.points[i], h)
                    tokens += [_fmt(x), _fmt(y)]
            lines.append(" ".join(tokens))
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))


def read_detections(path, dims: dict[str, tuple[int, int]]) -> list[DetectionRecord]:
    with open(path, "r", encoding="ascii") as f:
        lines = f.read().splitlines()
    records = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        name = lines[i].strip()
        if name not in dims:
            raise FileFormatError(path, i + 1, f"image {name!r} not in manifest")
        _, height = dims[name]
        if i + 1 >= len(lines):
            raise FileFormatError(path, i + 1, "missing detection count")
        try:
            count = int(lines[i + 1])
        except ValueError as exc:
            raise FileFormatError(path, i + 2, f"bad detection count: {exc}") from exc
        dets = []
        for k in range(count):
            line_no = i + 3 + k
            if line_no - 1 >= len(lines):
                raise FileFormatError(path, line_no, "missing detection line")
            tokens = lines[line_no - 1].split()
            n_kp = 2 * NUM_KEYPOINTS
            if len(tokens) not in (5, 10, 5 + n_kp, 10 + n_kp):
                raise FileFormatError(path, line_no, f"unexpected token count {len(tokens)}")
            try:
                vals = [float(t) for t in tokens]
            except ValueError as exc:
                raise FileFormatError(path, line_no, f"bad number: {exc}") from exc
            if not np.isfinite(vals[4]):
                raise FileFormatError(path, line_no, "detection score must be finite")
            bbox = box_from_disk(vals[0], vals[1], vals[2], vals[3], height)
            pos = 5
            ellipse = None
            if len(tokens) in (10, 10 + n_kp):
                ellipse = ellipse_from_disk(*vals[pos:pos + 5], height)
                pos += 5
            keypoints = None
            if len(tokens) in (5 + n_kp, 10 + n_kp):
                pts = np.array(vals[pos:pos + n_kp]).reshape(NUM_KEYPOINTS, 2)
                pts = np.array([point_from_disk(x, y, height) for x, y in pts])
                keypoints = Keypoints2D(points=pts)
            dets.append(Detection(bbox=bbox, score=vals[4], ellipse=ellipse, keypoints=keypoints))
        records.append(DetectionRecord(image_path=name, detections=dets))
        i += 2 + count
    return records


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

def write_dataset(out_dir, scenes: list[SyntheticScene], *, with_ellipse: bool = True):
    """Write scenes as PPMs plus manifest and annotation files."""
    from . import geometry as geo

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    records = []
    heights = {}
    for idx, scene in enumerate(scenes):
        name = f"scene_{idx:05d}.ppm"
        write_ppm(out / name, scene.image)
        manifest.append((name, scene.image.width, scene.image.height))
        heights[name] = scene.image.height
        faces = []
        for inst in scene.faces:
            ellipse = geo.face_ellipse(inst.keypoints) if with_ellipse else None
            faces.append(
                FaceAnnotation(bbox=inst.bbox, keypoints=inst.keypoints,
                               visible=inst.visible.copy(), ellipse=ellipse)
            )
        records.append(AnnotationRecord(image_path=name, faces=faces))
    write_manifest(out / MANIFEST_NAME, manifest)
    write_annotations(out / ANNOTATIONS_NAME, records, heights)


def load_dataset(dataset_dir) -> list[SyntheticScene]:
    """Load a dataset directory back into scenes (transforms unknown)."""
    root = Path(dataset_dir)
    manifest = read_manifest(root / MANIFEST_NAME)
    dims = {name: (w, h) for name, w, h in manifest}
    records = {r.image_path: r for r in read_annotations(root / ANNOTATIONS_NAME, dims)}
    scenes = []
    for name, _, _ in manifest:
        image = read_ppm(root / name)
        rec = records.get(name)
        faces = []
        if rec is not None:
            for ann in rec.faces:
                faces.append(
                    FaceInstance(transform=None, keypoints=ann.keypoints,
                                 bbox=ann.bbox, visible=ann.visible)
                )
        scenes.append(SyntheticScene(image=image, faces=faces, seed=None))
    return scenes


def dataset_dims(dataset_dir) -> dict[str, tuple[int, int]]:
    return {name: (w, h) for name, w, h in read_manifest(Path(dataset_dir) / MANIFEST_NAME)}


# ---------------------------------------------------------------------------
# key = value config files
# ---------------------------------------------------------------------------

def parse_config(path) -> dict[str, str]:
    """Parse a simple "key = value" file; '#' starts a comment."""
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FileFormatError(path, line_no, "expected 'key = value'")
            key, value = line.split("=", 1)
            key = key.strip()
            value = value.strip()
            if not key or not value:
                raise FileFormatError(path, line_no, "empty key or value")
            if key in out:
                raise FileFormatError(path, line_no, f"duplicate key {key!r}")
            out[key] = value
    return out


def write_roc_csv(path, points):
    """ROC CSV: "fp,score_threshold,recall" per swept threshold."""
    with open(path, "w", encoding="ascii") as f:
        f.write("fp,score_threshold,recall\n")
        for p in points:
            f.write(f"{p.fp},{p.score_threshold!r},{p.recall!r}\n")
