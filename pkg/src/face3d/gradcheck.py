"""Finite-difference verification of every backward pass.

Each check builds small random instances, computes the analytic gradient,
and compares against central differences with step 1e-3. The comparison
metric is |a - n| / max(|a|, |n|, 1): a relative error with an absolute
floor at unit scale, since a pure ratio is meaningless for near-zero
coordinates. Instances are sampled away from the kinks of the piecewise
pieces (ReLU zero crossings, max-pool ties, smooth-L1 corners at |a| = 1)
so that the +/-1e-3 probes never straddle one.

The full-model check differentiates one complete training-step objective
with the step's discrete structure frozen (see the training module); that
frozen objective is exactly what the analytic backward computes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import losses, synth, training
from .geometry import BoundingBox, default_mean_face
from .layers import Conv2D, ConvTranspose2D, Dense, MaxPool2x2, ReLU, softmax_channels
from .losses import TrainingPoints
from .network import FaceDetectionModel, ModelConfig, bilinear_sample, bilinear_scatter
from .proposals import DenseOutputs

STEP = 1e-3

# Small model used by the full-step check: the same shape contract as the
# default (stride 8, upsample 4) with few enough parameters to probe each.
GRADCHECK_MODEL_CONFIG = ModelConfig(
    conv_groups=((1, 4), (1, 6), (1, 8)),
    upsample_factor=4,
    pooled_feature_dim=8,
    fc_hidden_dim=16,
)


@dataclass
class CheckResult:
    name: str
    max_err: float
    tol: float
    n_instances: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_err < self.tol

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (
            f"[{status}] {self.name}: max rel err {self.max_err:.3e} "
            f"(tol {self.tol:.0e}, {self.n_instances} instances, {self.seconds:.2f}s)"
        )


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numerical_gradient(f, x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of scalar f with respect to every entry of x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def _away_from(rng, shape, low, high, forbidden_center, margin):
    """Uniform samples with a forbidden band around +/-forbidden_center."""
    out = rng.uniform(low, high, size=shape)
    for _ in range(100):
        bad = np.abs(np.abs(out) - forbidden_center) < margin
        if not bad.any():
            return out
        out[bad] = rng.uniform(low, high, size=int(bad.sum()))
    raise RuntimeError("could not sample away from the forbidden band")


def _check_layer_instance(layer, x, rng):
    """FD-check one layer's input and parameter gradients on one instance.

    The scalar objective is a fixed random projection of the output.
    """
    y = layer.forward(x)
    proj = rng.normal(size=y.shape)
    layer.zero_grads()
    dx_analytic = layer.backward(proj)

    def value_input(xv):
        return float(np.sum(layer.forward(xv, frozen=True) * proj))

    errs = [relative_error(dx_analytic, numerical_gradient(value_input, x.copy()))]
    for key, p in layer.params.items():
        analytic = layer.grads[key].copy()

        def value_param(pv, key=key):
            layer.params[key] = pv
            return float(np.sum(layer.forward(x, frozen=True) * proj))

        orig = p.copy()
        errs.append(relative_error(analytic, numerical_gradient(value_param, p.copy())))
        layer.params[key] = orig
    return max(errs)


def check_conv(rng: np.random.Generator, n_instances: int = 100) -> CheckResult:
    t0 = time.time()
    worst = 0.0
    for i in range(n_instances):
        k = int(rng.choice([1, 3]))
        layer = Conv2D("conv", int(rng.integers(1, 3)), int(rng.integers(1, 4)), k, rng=rng)
        x = rng.normal(size=(layer.in_channels, int(rng.integers(3, 6)), int(rng.integers(3, 6))))
        worst = max(worst, _check_layer_instance(layer, x, rng))
    return CheckResult("conv backward", worst, 1e-4, n_instances, time.time() - t0)


def check_relu(rng: np.random.Generator, n_instances: int = 100) -> CheckResult:
    t0 = time.time()
    worst = 0.0
    for _ in range(n_instances):
        layer = ReLU("relu")
        # keep pre-activations away from 0 so the probe never flips the mask
        x = _away_from(rng, (2, 4, 4), -2.0, 2.0, 0.0, 10 * STEP)
        worst = max(worst, _check_layer_instance(layer, x, rng))
    return CheckResult("relu backward", worst, 1e-4, n_instances, time.time() - t0)


def check_maxpool(rng: np.random.Generator, n_instances: int = 100) -> CheckResult:
    t0 = time.time()
    worst = 0.0
    for _ in range(n_instances):
        layer = MaxPool2x2("pool")
        for _ in range(100):
            x = rng.normal(size=(2, 4, 4))
            win = np.sort(MaxPool2x2._windows(x), axis=-1)
            if np.min(win[..., 3] - win[..., 2]) > 10 * STEP:
                break
        worst = max(worst, _check_layer_instance(layer, x, rng))
    return CheckResult("maxpool backward", worst, 1e-4, n_instances, time.time() - t0)


def check_deconv(rng: np.random.Generator, n_instances: int = 100) -> CheckResult:
    t0 = time.time()
    worst = 0.0
    for _ in range(n_instances):
        layer = ConvTranspose2D("deconv", int(rng.integers(1, 3)), int(rng.integers(1, 3)),
                                int(rng.choice([2, 4])), rng=rng)
        x = rng.normal(size=(layer.in_channels, int(rng.integers(2, 4)), int(rng.integers(2, 4))))
        worst = max(worst, _check_layer_instance(layer, x, rng))
    return CheckResult("transposed conv backward", worst, 1e-4, n_instances, time.time() - t0)


def check_dense(rng: np.random.Generator, n_instances: int = 100) -> CheckResult:
    t0 = time.time()
    worst = 0.0
    for _ in range(n_instances):
        layer = Dense("fc", int(rng.integers(2, 8)), int(rng.integers(1, 5)), rng=rng)
        x = rng.normal(size=(layer.in_dim,))
        worst = max(worst, _check_layer_instance(layer, x, rng))
    return CheckResult("fully connected backward", worst, 1e-4, n_instances, time.time() - t0)


def check_bilinear_pool(rng: np.random.Generator, n_instances: int = 100) -> CheckResult:
    """Gradient of bilinear pooling with respect to the map values."""
    t0 = time.time()
    worst = 0.0
    for _ in range(n_instances):
        c, h, w = int(rng.integers(1, 4)), int(rng.integers(3, 6)), int(rng.integers(3, 6))
        values = rng.normal(size=(c, h, w))
        points = rng.uniform(-1.0, max(h, w), size=(int(rng.integers(1, 6)), 2))
        proj = rng.normal(size=(len(points), c))
        samples, cache = bilinear_sample(values, points)
        analytic = bilinear_scatter(cache, proj)

        def value(v):
            s, _ = bilinear_sample(v, points)
            return float(np.sum(s * proj))

        worst = max(worst, relative_error(analytic, numerical_gradient(value, values.copy())))
    return CheckResult("bilinear pooling map gradient", worst, 1e-4, n_instances, time.time() - t0)


def _random_dense(rng, h=4, w=4):
    scores = rng.normal(scale=1.5, size=(11, h, w))
    transform = rng.normal(size=(8, h, w))
    return scores, DenseOutputs(class_probs=softmax_channels(scores), transform=transform)


def _random_points(rng, h, w):
    n_pos = int(rng.integers(1, 5))
    n_neg = int(rng.integers(1, 5))
    pos = np.stack([rng.integers(0, w, n_pos), rng.integers(0, h, n_pos)], axis=1)
    neg = np.stack([rng.integers(0, w, n_neg), rng.integers(0, h, n_neg)], axis=1)
    labels = rng.integers(1, 11, n_pos)
    return TrainingPoints(positive_positions=pos, positive_labels=labels,
                          negative_positions=neg, m=n_pos)


def check_cls_loss(rng: np.random.Generator, n_instances: int = 100) -> CheckResult:
    """Softmax-cross-entropy gradient with respect to the class scores."""
    t0 = time.time()
    worst = 0.0
    for _ in range(n_instances):
        scores, dense = _random_dense(rng)
        pts = _random_points(rng, dense.height, dense.width)
        _, analytic = losses.cls_loss(dense, pts)

        def value(s):
            d = DenseOutputs(class_probs=softmax_channels(s), transform=dense.transform)
            return losses.cls_loss(d, pts)[0]

        worst = max(worst, relative_error(analytic, numerical_gradient(value, scores.copy())))
    return CheckResult("classification loss gradient", worst, 1e-4, n_instances, time.time() - t0)


def check_smooth_l1(rng: np.random.Generator, n_instances: int = 100) -> CheckResult:
    t0 = time.time()
    worst = 0.0
    for _ in range(n_instances):
        a = _away_from(rng, (16,), -3.0, 3.0, 1.0, 10 * STEP)
        analytic = losses.smooth_l1_deriv(a)
        numeric = np.array([
            (losses.smooth_l1(v + STEP) - losses.smooth_l1(v - STEP)) / (2 * STEP) for v in a
        ])
        worst = max(worst, relative_error(analytic, numeric))
    return CheckResult("smooth-l1 derivative", worst, 1e-4, n_instances, time.time() - t0)


def check_keypoint_loc_loss(rng: np.random.Generator, n_instances: int = 100) -> CheckResult:
    t0 = time.time()
    worst = 0.0
    for _ in range(n_instances):
        m = int(rng.integers(1, 5))
        labels = rng.choice(np.arange(1, 11), size=m, replace=False)
        gt = rng.uniform(0, 8, size=(m, 2))
        # differences away from the |a| = 1 corner
        offsets = _away_from(rng, (m, 10, 2), -2.5, 2.5, 1.0, 10 * STEP)
        predicted = gt.mean(axis=0) + offsets
        _, analytic = losses.keypoint_loc_loss(labels, gt, predicted)

        # resample any pairing that still lands near the corner
        diffs = gt[None, :, :] - predicted[:, labels - 1, :]
        if np.min(np.abs(np.abs(diffs) - 1.0)) < 5 * STEP:
            continue

        def value(p):
            return losses.keypoint_loc_loss(labels, gt, p)[0]

        worst = max(worst, relative_error(analytic, numerical_gradient(value, predicted.copy())))
    return CheckResult("keypoint location loss gradient", worst, 1e-4, n_instances, time.time() - t0)


def check_bbox_loss(rng: np.random.Generator, n_instances: int = 100) -> CheckResult:
    t0 = time.time()
    worst = 0.0
    for _ in range(n_instances):
        k = int(rng.integers(1, 5))
        target = rng.uniform(-0.5, 0.5, size=(k, 4))
        pred = target + _away_from(rng, (k, 4), -2.0, 2.0, 1.0, 10 * STEP)
        _, analytic = losses.bbox_loss(pred, target)

        def value(p):
            return losses.bbox_loss(p, target)[0]

        worst = max(worst, relative_error(analytic, numerical_gradient(value, pred.copy())))
    return CheckResult("box regression loss gradient", worst, 1e-4, n_instances, time.time() - t0)


def build_full_check_plan(scene, rng) -> training.StepPlan:
    """A step plan whose box entries come from ground truth.

    A freshly initialized model rarely produces proposals that match ground
    truth, which would leave the box head unexercised; pooling at the true
    keypoints with jittered-box targets covers that path deterministically.
    """
    face = default_mean_face()
    points = training.sample_points(scene, rng)
    grid_w = scene.image.width // 2
    grid_h = scene.image.height // 2
    plan = training.StepPlan(
        points=points,
        loc_faces=training._loc_plans(scene, grid_w, grid_h),
        boxes=[],
        face_points=face.points,
    )
    for inst in scene.faces:
        b = inst.bbox
        jittered = BoundingBox(
            x=b.x + rng.uniform(-1.0, 1.0),
            y=b.y + rng.uniform(-1.0, 1.0),
            w=b.w * rng.uniform(0.85, 1.15),
            h=b.h * rng.uniform(0.85, 1.15),
        )
        plan.boxes.append(
            training.BoxPlanEntry(
                pool_points_grid=inst.keypoints.points / 2.0,
                target=losses.bbox_encode(jittered, b).to_array(),
            )
        )
    return plan


def check_full_model(seed: int = 0) -> CheckResult:
    """FD-check every parameter of a small model on one 32x32 training step."""
    t0 = time.time()
    rng = np.random.default_rng(seed)
    model = FaceDetectionModel(GRADCHECK_MODEL_CONFIG, rng=rng)
    scene = synth.synth_scene(np.random.default_rng(seed + 1), (32, 32), 1, scale_range=(5.0, 6.5))
    plan = build_full_check_plan(scene, np.random.default_rng(seed + 2))

    model.zero_grads()
    dense = model.forward(scene.image)
    training.apply_plan_gradients(model, dense, plan)
    analytic = model.grads_vector()

    theta = model.params_vector()
    numeric = np.zeros_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + STEP
        model.set_params_vector(theta)
        fp = training.plan_loss_values(model, scene.image, plan, frozen=True).total
        theta[i] = orig - STEP
        model.set_params_vector(theta)
        fm = training.plan_loss_values(model, scene.image, plan, frozen=True).total
        theta[i] = orig
        numeric[i] = (fp - fm) / (2 * STEP)
    model.set_params_vector(theta)
    err = relative_error(analytic, numeric)
    return CheckResult("full model (all parameters, total loss)", err, 1e-3,
                       theta.size, time.time() - t0)


def run_all(seed: int = 0, n_instances: int = 100) -> list[CheckResult]:
    """Run every layer and loss check plus the full-model check."""
    rng = np.random.default_rng(seed)
    results = [
        check_conv(rng, n_instances),
        check_relu(rng, n_instances),
        check_maxpool(rng, n_instances),
        check_deconv(rng, n_instances),
        check_dense(rng, n_instances),
        check_bilinear_pool(rng, n_instances),
        check_cls_loss(rng, n_instances),
        check_smooth_l1(rng, n_instances),
        check_keypoint_loc_loss(rng, n_instances),
        check_bbox_loss(rng, n_instances),
        check_full_model(seed),
    ]
    return results
