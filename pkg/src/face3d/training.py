"""Sampling scheme, per-step gradient assembly and the SGD loop.

Training is image-centric: each step runs one image forward, samples
classification points, evaluates the three loss terms on that image and
applies one SGD update. Everything on the loss side lives on the dense
half-resolution grid, so ground-truth keypoints and boxes are halved before
they meet predictions.

A step's discrete choices (which positions were sampled, which proposals
survived and matched, where box features are pooled, the box targets) are
captured in a ``StepPlan``; given a fixed plan the loss is a smooth function
of the parameters, which is both what the update optimizes and what the
finite-difference checks differentiate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.ndimage

from . import geometry, losses, proposals
from .errors import DivergenceDetected, EmptySample, InsufficientBackground
from .geometry import MeanFace3D, default_mean_face
from .losses import TrainingPoints
from .network import FaceDetectionModel, FeatureMap, bilinear_scatter
from .proposals import GRID_TO_IMAGE, DenseOutputs
from .synth import FaceInstance, SyntheticScene


@dataclass
class TrainConfig:
    """Optimization knobs; learning rate interpolates geometrically."""

    epochs: int = 10
    lr_start: float = 0.01
    lr_end: float = 0.0001
    short_edge: int = 64
    blur_prob: float = 0.0
    positive_grid: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not (self.lr_start >= self.lr_end >= 0.0):
            raise ValueError("need lr_start >= lr_end >= 0")
        if self.lr_end == 0.0 and self.lr_start != 0.0:
            raise ValueError("lr_end may be zero only together with lr_start")
        if self.positive_grid < 1 or self.positive_grid % 2 == 0:
            raise ValueError("positive_grid must be odd and >= 1")
        if not 0.0 <= self.blur_prob <= 1.0:
            raise ValueError("blur_prob must be in [0, 1]")


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """Geometric interpolation from lr_start to lr_end across epochs."""
    if config.lr_start == 0.0:
        return 0.0
    if config.epochs == 1:
        return config.lr_start
    frac = epoch / (config.epochs - 1)
    return float(config.lr_start * (config.lr_end / config.lr_start) ** frac)


def keypoint_grid_cell(point_image: np.ndarray, grid_w: int, grid_h: int) -> tuple[int, int]:
    """Nearest dense-grid cell for an image-coordinate point."""
    g = np.asarray(point_image, dtype=np.float64) / GRID_TO_IMAGE
    cx = int(np.clip(np.floor(g[0] + 0.5), 0, grid_w - 1))
    cy = int(np.clip(np.floor(g[1] + 0.5), 0, grid_h - 1))
    return cx, cy


def sample_points(scene: SyntheticScene, rng: np.random.Generator,
                  positive_grid: int = 3) -> TrainingPoints:
    """Sample classification positions for one scene.

    Positives are each visible keypoint's grid cell plus its
    ``positive_grid x positive_grid`` neighborhood, clipped at borders and
    deduplicated; when the neighborhoods of two keypoints collide, the cell
    keeps the label of the nearer keypoint, so labels stay consistent with
    local appearance. Negatives are an equal count of uniform-random grid
    cells strictly outside every face box.
    """
    img = scene.image
    grid_h, grid_w = img.height // 2, img.width // 2
    r = positive_grid // 2

    # cell -> (squared grid distance to owning keypoint, label)
    chosen: dict[tuple[int, int], tuple[float, int]] = {}
    m = 0
    for face in scene.faces:
        for i in range(len(face.keypoints.points)):
            if not face.visible[i]:
                continue
            m += 1
            kp_grid = face.keypoints.points[i] / GRID_TO_IMAGE
            cx, cy = keypoint_grid_cell(face.keypoints.points[i], grid_w, grid_h)
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    px, py = cx + dx, cy + dy
                    if not (0 <= px < grid_w and 0 <= py < grid_h):
                        continue
                    d2 = (px - kp_grid[0]) ** 2 + (py - kp_grid[1]) ** 2
                    prev = chosen.get((px, py))
                    if prev is None or d2 < prev[0]:
                        chosen[(px, py)] = (d2, i + 1)
    if not chosen:
        raise EmptySample("scene has no visible keypoints")

    positions = np.array(list(chosen.keys()), dtype=np.intp)
    labels = np.array([label for _, label in chosen.values()], dtype=np.intp)

    valid = np.ones((grid_h, grid_w), dtype=bool)
    for face in scene.faces:
        b = face.bbox
        x0 = int(np.ceil(b.x / GRID_TO_IMAGE))
        x1 = int(np.floor(b.x2 / GRID_TO_IMAGE))
        y0 = int(np.ceil(b.y / GRID_TO_IMAGE))
        y1 = int(np.floor(b.y2 / GRID_TO_IMAGE))
        valid[max(0, y0):y1 + 1, max(0, x0):x1 + 1] = False
    bg_flat = np.flatnonzero(valid.reshape(-1))
    if bg_flat.size == 0:
        raise InsufficientBackground("every grid cell lies inside a face box")
    picks = rng.choice(bg_flat, size=len(positions), replace=bg_flat.size < len(positions))
    negatives = np.stack([picks % grid_w, picks // grid_w], axis=1)

    return TrainingPoints(
        positive_positions=positions,
        positive_labels=labels,
        negative_positions=negatives,
        m=m,
    )


@dataclass
class LocFacePlan:
    """Keypoint-location loss inputs for one face, on the dense grid."""

    labels: np.ndarray    # (m,) keypoint labels, 1..10
    gt_grid: np.ndarray   # (m, 2) ground-truth positions, grid coords
    cells: np.ndarray     # (m, 2) int cells whose transforms predict


@dataclass
class BoxPlanEntry:
    """One box-regression sample with detached structure.

    Pooling coordinates and the target delta are constants of the step; the
    ``relu_mask`` records the box head's hidden activation pattern so the
    frozen loss evaluation stays smooth.
    """

    pool_points_grid: np.ndarray  # (10, 2)
    target: np.ndarray            # (4,)
    relu_mask: np.ndarray | None = None


@dataclass
class StepPlan:
    points: TrainingPoints
    loc_faces: list[LocFacePlan]
    boxes: list[BoxPlanEntry]
    face_points: np.ndarray  # (10, 3) mean-face coordinates for the chain rule


class StepLosses(NamedTuple):
    cls: float
    loc_pt: float
    loc_box: float

    @property
    def total(self) -> float:
        return losses.total_loss(self.cls, self.loc_pt, self.loc_box)


def _loc_plans(scene: SyntheticScene, grid_w: int, grid_h: int) -> list[LocFacePlan]:
    plans = []
    for face in scene.faces:
        idx = np.flatnonzero(face.visible)
        if idx.size == 0:
            continue
        pts = face.keypoints.points[idx]
        cells = np.array(
            [keypoint_grid_cell(p, grid_w, grid_h) for p in pts], dtype=np.intp
        )
        plans.append(
            LocFacePlan(labels=idx + 1, gt_grid=pts / GRID_TO_IMAGE, cells=cells)
        )
    return plans


def build_step_plan(
    dense: DenseOutputs,
    scene: SyntheticScene,
    rng: np.random.Generator,
    face: MeanFace3D,
    positive_grid: int = 3,
    keypoint_threshold: float = 0.5,
    nms_threshold: float = 0.7,
    match_iou: float = 0.5,
) -> StepPlan:
    """Fix one training step's discrete structure.

    Box entries come from the current proposals: survivors of NMS are
    matched to the ground-truth box of highest IoU; matches below
    ``match_iou`` are dropped from the box term.
    """
    points = sample_points(scene, rng, positive_grid)
    loc_faces = _loc_plans(scene, dense.width, dense.height)

    boxes: list[BoxPlanEntry] = []
    props = proposals.proposals_from_dense(dense, face, keypoint_threshold)
    for prop in proposals.nms(props, nms_threshold):
        best_iou, best_gt = 0.0, None
        for inst in scene.faces:
            v = geometry.iou(prop.bbox, inst.bbox)
            if v > best_iou:
                best_iou, best_gt = v, inst
        if best_gt is None or best_iou < match_iou:
            continue
        boxes.append(
            BoxPlanEntry(
                pool_points_grid=prop.keypoints.points / GRID_TO_IMAGE,
                target=losses.bbox_encode(prop.bbox, best_gt.bbox).to_array(),
            )
        )
    return StepPlan(points=points, loc_faces=loc_faces, boxes=boxes, face_points=face.points)


def _predicted_sets(dense: DenseOutputs, plan_face: LocFacePlan, face_points: np.ndarray) -> np.ndarray:
    """Project each planned cell's transform into a (m, 10, 2) keypoint set."""
    m = len(plan_face.cells)
    sets = np.empty((m, 10, 2))
    for j, (cx, cy) in enumerate(plan_face.cells):
        flat = dense.transform[:, cy, cx]
        a = flat[:6].reshape(2, 3)
        mu = flat[6:8] + np.array([cx, cy], dtype=np.float64)
        sets[j] = face_points @ a.T + mu
    return sets


def apply_plan_gradients(model: FaceDetectionModel, dense: DenseOutputs, plan: StepPlan) -> StepLosses:
    """Evaluate the three losses and backpropagate into model gradients.

    Requires the model's cached activations from the forward pass that
    produced ``dense``. Gradients accumulate; callers zero them first.
    Records each box entry's hidden activation mask into the plan.
    """
    cls_val, dscores = losses.cls_loss(dense, plan.points)

    dtransform = np.zeros_like(dense.transform)
    loc_pt = 0.0
    if plan.loc_faces:
        n_faces = len(plan.loc_faces)
        for fp in plan.loc_faces:
            predicted = _predicted_sets(dense, fp, plan.face_points)
            val, dpred = losses.keypoint_loc_loss(fp.labels, fp.gt_grid, predicted)
            loc_pt += val / n_faces
            dpred = dpred / n_faces
            for j, (cx, cy) in enumerate(fp.cells):
                da = dpred[j].T @ plan.face_points          # (2, 3)
                dtransform[:6, cy, cx] += da.reshape(6)
                dtransform[6:, cy, cx] += dpred[j].sum(axis=0)

    loc_box = 0.0
    dfeat_extra = None
    if plan.boxes:
        dfeat_extra = np.zeros_like(model.features.values)
        k = len(plan.boxes)
        for entry in plan.boxes:
            pooled, cache = model.pool_at(entry.pool_points_grid)
            delta = model.bbox_head_forward(pooled)
            entry.relu_mask = model.fc_relu._mask.copy()
            diff = delta - entry.target
            loc_box += float(np.sum(losses.smooth_l1(diff))) / k
            ddelta = losses.smooth_l1_deriv(diff) / k
            dpooled = model.bbox_head_backward(ddelta)
            dfeat_extra += bilinear_scatter(cache, dpooled.reshape(10, -1))

    model.backward(dscores, dtransform, dfeat_extra)
    return StepLosses(cls=cls_val, loc_pt=loc_pt, loc_box=loc_box)


def plan_loss_values(model: FaceDetectionModel, image: FeatureMap, plan: StepPlan,
                     frozen: bool = True) -> StepLosses:
    """Evaluate the step losses for the current parameters, no gradients.

    With ``frozen=True`` the forward pass reuses the recorded activation
    structure, making the result a smooth function of the parameters (the
    finite-difference reference for apply_plan_gradients).
    """
    dense = model.forward(image, frozen=frozen)
    cls_val = losses.cls_loss(dense, plan.points)[0]

    loc_pt = 0.0
    if plan.loc_faces:
        n_faces = len(plan.loc_faces)
        for fp in plan.loc_faces:
            predicted = _predicted_sets(dense, fp, plan.face_points)
            loc_pt += losses.keypoint_loc_loss(fp.labels, fp.gt_grid, predicted)[0] / n_faces

    loc_box = 0.0
    if plan.boxes:
        k = len(plan.boxes)
        w1, b1 = model.fc1.params["w"], model.fc1.params["b"]
        w2, b2 = model.fc2.params["w"], model.fc2.params["b"]
        for entry in plan.boxes:
            pooled, _ = model.pool_at(entry.pool_points_grid)
            hidden = w1 @ pooled + b1
            if frozen:
                if entry.relu_mask is None:
                    raise EmptySample("box entry has no recorded activation mask")
                hidden = hidden * entry.relu_mask
            else:
                hidden = np.maximum(hidden, 0.0)
            delta = w2 @ hidden + b2
            loc_box += float(np.sum(losses.smooth_l1(delta - entry.target))) / k

    return StepLosses(cls=cls_val, loc_pt=loc_pt, loc_box=loc_box)


class LossLogEntry(NamedTuple):
    epoch: int
    step: int
    cls: float
    loc_pt: float
    loc_box: float
    total: float


LOSS_LOG_HEADER = "epoch,step,cls,loc_pt,loc_box,total"


def format_loss_log(entries: list[LossLogEntry]) -> str:
    lines = [LOSS_LOG_HEADER]
    for e in entries:
        lines.append(f"{e.epoch},{e.step},{e.cls!r},{e.loc_pt!r},{e.loc_box!r},{e.total!r}")
    return "\n".join(lines) + "\n"


def resize_short_edge(image: FeatureMap, short_edge: int, stride: int) -> tuple[FeatureMap, tuple[float, float]]:
    """Resize so the short edge matches, rounding dims to stride multiples."""
    h, w = image.height, image.width
    if min(h, w) == short_edge and h % stride == 0 and w % stride == 0:
        return image, (1.0, 1.0)
    s = short_edge / min(h, w)
    new_h = max(stride, int(round(h * s / stride)) * stride)
    new_w = max(stride, int(round(w * s / stride)) * stride)
    values = scipy.ndimage.zoom(image.values, (1.0, new_h / h, new_w / w), order=1)
    return FeatureMap(values=values), (new_w / w, new_h / h)


def _preprocess(scene: SyntheticScene, config: TrainConfig, stride: int,
                rng: np.random.Generator) -> SyntheticScene:
    image, (sx, sy) = resize_short_edge(scene.image, config.short_edge, stride)
    faces = scene.faces
    if (sx, sy) != (1.0, 1.0):
        scaled = []
        for f in faces:
            kp = f.keypoints.points * np.array([sx, sy])
            b = f.bbox
            scaled.append(
                FaceInstance(
                    transform=None,
                    keypoints=geometry.Keypoints2D(points=kp),
                    bbox=geometry.BoundingBox(x=b.x * sx, y=b.y * sy, w=b.w * sx, h=b.h * sy),
                    visible=f.visible.copy(),
                )
            )
        faces = scaled
    if config.blur_prob > 0.0 and rng.random() < config.blur_prob:
        sigma = rng.uniform(0.5, 1.5)
        image = FeatureMap(values=scipy.ndimage.gaussian_filter(image.values, sigma=(0.0, sigma, sigma)))
    return SyntheticScene(image=image, faces=faces, seed=scene.seed)


def train(
    dataset: list[SyntheticScene],
    model: FaceDetectionModel,
    config: TrainConfig,
    face: MeanFace3D | None = None,
    keypoint_threshold: float = 0.5,
    nms_threshold: float = 0.7,
    match_iou: float = 0.5,
) -> tuple[dict[str, np.ndarray], list[LossLogEntry]]:
    """Image-centric SGD over the dataset.

    Returns the trained parameters (live views into the model) and the
    per-step loss log. Scenes without faces are skipped.

    Raises:
        DivergenceDetected: if any loss becomes non-finite.
    """
    if not dataset:
        raise EmptySample("dataset is empty")
    face = face or default_mean_face()
    rng = np.random.default_rng(config.seed)
    log: list[LossLogEntry] = []
    for epoch in range(config.epochs):
        lr = learning_rate(config, epoch)
        for step, scene in enumerate(dataset):
            if not scene.faces:
                continue
            prepped = _preprocess(scene, config, model.config.total_stride, rng)
            model.zero_grads()
            dense = model.forward(prepped.image)
            plan = build_step_plan(
                dense, prepped, rng, face,
                positive_grid=config.positive_grid,
                keypoint_threshold=keypoint_threshold,
                nms_threshold=nms_threshold,
                match_iou=match_iou,
            )
            step_losses = apply_plan_gradients(model, dense, plan)
            if not np.isfinite(step_losses.total):
                raise DivergenceDetected(
                    f"non-finite loss at epoch {epoch}, step {step}: {step_losses}"
                )
            model.sgd_step(lr)
            log.append(
                LossLogEntry(epoch, step, step_losses.cls, step_losses.loc_pt,
                             step_losses.loc_box, step_losses.total)
            )
    return model.params(), log
