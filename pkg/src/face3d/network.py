"""A small self-contained detection network with exact backward passes.

The trunk is a configurable stack of conv/ReLU groups with 2x2 max-pooling
after each group (total downsampling 2^groups), followed by a transposed
convolution that brings the map back up to half the input resolution. Two
1x1 heads read from that shared map: an 11-way class-score head (softmaxed
into per-position probabilities) and an 8-parameter transform head (raw
linear). Features for box refinement are pooled from the same map by
bilinear sampling at the ten predicted keypoint locations and pushed through
a two-layer fully connected regressor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import FileFormatError, ShapeMismatch, StaleActivations
from .layers import Conv2D, ConvTranspose2D, Dense, MaxPool2x2, ReLU, softmax_channels
from .losses import BoxDelta
from .proposals import GRID_TO_IMAGE, NUM_CLASSES, DenseOutputs, FaceProposal

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class FeatureMap:
    """Channel-major (C, H, W) real tensor; row index y grows upward."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"expected (C, H, W), got shape {self.values.shape}")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs.

    ``conv_groups`` lists (layer_count, channel_count) per group; each group
    ends in a 2x2 max-pool, so the trunk downsamples by 2^len(conv_groups).
    The transposed convolution then upsamples by ``upsample_factor``; the
    two together must land on the half-resolution working grid.
    """

    conv_groups: tuple[tuple[int, int], ...] = ((2, 8), (2, 16), (2, 32))
    upsample_factor: int = 4
    pooled_feature_dim: int = 32
    fc_hidden_dim: int = 64

    def __post_init__(self):
        if self.upsample_factor < 1 or self.pooled_feature_dim < 1 or self.fc_hidden_dim < 1:
            raise ValueError("config dimensions must be positive")
        if not self.conv_groups or any(n < 1 or c < 1 for n, c in self.conv_groups):
            raise ValueError("conv_groups entries must be positive (layers, channels) pairs")
        if 2 * self.upsample_factor != self.total_stride:
            raise ValueError(
                "upsample_factor must be half the total downsampling factor "
                f"(stride {self.total_stride}, upsample {self.upsample_factor})"
            )

    @property
    def total_stride(self) -> int:
        return 2 ** len(self.conv_groups)

    def to_json(self) -> str:
        return json.dumps(
            {
                "conv_groups": [list(g) for g in self.conv_groups],
                "upsample_factor": self.upsample_factor,
                "pooled_feature_dim": self.pooled_feature_dim,
                "fc_hidden_dim": self.fc_hidden_dim,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        return cls(
            conv_groups=tuple(tuple(g) for g in d["conv_groups"]),
            upsample_factor=int(d["upsample_factor"]),
            pooled_feature_dim=int(d["pooled_feature_dim"]),
            fc_hidden_dim=int(d["fc_hidden_dim"]),
        )


def bilinear_sample(values: np.ndarray, points: np.ndarray):
    """Bilinearly sample all channels of (C, H, W) at (K, 2) grid points.

    Points are clamped to the map boundary. Returns the (K, C) samples and
    the cache needed to scatter gradients back onto the map.
    """
    c, h, w = values.shape
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    x = np.clip(pts[:, 0], 0.0, w - 1.0)
    y = np.clip(pts[:, 1], 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    samples = (
        values[:, y0, x0] * w00
        + values[:, y0, x1] * w01
        + values[:, y1, x0] * w10
        + values[:, y1, x1] * w11
    ).T
    cache = (values.shape, x0, x1, y0, y1, w00, w01, w10, w11)
    return samples, cache


def bilinear_scatter(cache, dsamples: np.ndarray) -> np.ndarray:
    """Gradient of bilinear_sample with respect to the map values."""
    shape, x0, x1, y0, y1, w00, w01, w10, w11 = cache
    dvalues = np.zeros(shape)
    ds = dsamples.T  # (C, K)
    np.add.at(dvalues, (slice(None), y0, x0), ds * w00)
    np.add.at(dvalues, (slice(None), y0, x1), ds * w01)
    np.add.at(dvalues, (slice(None), y1, x0), ds * w10)
    np.add.at(dvalues, (slice(None), y1, x1), ds * w11)
    return dvalues


def configuration_pooling(fmap: FeatureMap, proposal: FaceProposal) -> np.ndarray:
    """Pool features at a proposal's ten keypoints, concatenated in order.

    The proposal's keypoints are in input-image coordinates; the map lives
    on the half-resolution grid, so coordinates are halved before bilinear
    sampling (clamped to the map boundary). The result has length
    10 * channels, keypoint-major.
    """
    points_grid = proposal.keypoints.points / GRID_TO_IMAGE
    samples, _ = bilinear_sample(fmap.values, points_grid)
    return samples.reshape(-1)


class FaceDetectionModel:
    """Trunk, dense heads and box-regression head bound together.

    One instance is single-threaded: forward caches the activations that
    backward consumes. Use separate instances for concurrent work.
    """

    def __init__(self, config: ModelConfig | None = None, rng: np.random.Generator | None = None):
        self.config = config or ModelConfig()
        rng = rng or np.random.default_rng(0)
        self.trunk: list = []
        in_ch = 3
        for gi, (n_layers, ch) in enumerate(self.config.conv_groups):
            for li in range(n_layers):
                self.trunk.append(Conv2D(f"group{gi}.conv{li}", in_ch, ch, 3, rng=rng))
                self.trunk.append(ReLU(f"group{gi}.relu{li}"))
                in_ch = ch
            self.trunk.append(MaxPool2x2(f"group{gi}.pool"))
        self.upsample = ConvTranspose2D(
            "upsample", in_ch, self.config.pooled_feature_dim, self.config.upsample_factor, rng=rng
        )
        self.up_relu = ReLU("upsample.relu")
        self.cls_head = Conv2D("cls_head", self.config.pooled_feature_dim, NUM_CLASSES, 1, rng=rng)
        self.tf_head = Conv2D("tf_head", self.config.pooled_feature_dim, 8, 1, rng=rng)
        self.fc1 = Dense("bbox.fc1", 10 * self.config.pooled_feature_dim, self.config.fc_hidden_dim, rng=rng)
        self.fc_relu = ReLU("bbox.relu")
        self.fc2 = Dense("bbox.fc2", self.config.fc_hidden_dim, 4, rng=rng)
        self._layers = self.trunk + [
            self.upsample, self.up_relu, self.cls_head, self.tf_head,
            self.fc1, self.fc_relu, self.fc2,
        ]
        self._feat: np.ndarray | None = None

    # ------------------------------------------------------------------
    # parameter bookkeeping
    # ------------------------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.{k}": v for l in self._layers for k, v in l.params.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.{k}": v for l in self._layers for k, v in l.grads.items()}

    def zero_grads(self):
        for layer in self._layers:
            layer.zero_grads()

    def sgd_step(self, lr: float):
        for layer in self._layers:
            for key in layer.params:
                layer.params[key] -= lr * layer.grads[key]

    def params_vector(self) -> np.ndarray:
        parts = [self.params()[k].ravel() for k in sorted(self.params())]
        return np.concatenate(parts)

    def set_params_vector(self, vec: np.ndarray):
        params = self.params()
        offset = 0
        for key in sorted(params):
            p = params[key]
            p[...] = vec[offset:offset + p.size].reshape(p.shape)
            offset += p.size
        if offset != vec.size:
            raise ShapeMismatch(f"parameter vector has {vec.size} entries, model needs {offset}")

    def grads_vector(self) -> np.ndarray:
        grads = self.grads()
        return np.concatenate([grads[k].ravel() for k in sorted(grads)])

    # ------------------------------------------------------------------
    # forward / backward
    # ------------------------------------------------------------------

    def forward(self, image: FeatureMap, frozen: bool = False) -> DenseOutputs:
        """Run the trunk and dense heads; returns the half-resolution outputs.

        ``frozen`` reuses the ReLU masks and pool argmaxes recorded by the
        previous unfrozen pass (see layers module).
        """
        x = image.values
        if x.ndim != 3 or x.shape[0] != 3:
            raise ShapeMismatch(f"expected a (3, H, W) image, got {x.shape}")
        stride = self.config.total_stride
        if x.shape[1] % stride or x.shape[2] % stride:
            raise ShapeMismatch(f"image dims must be divisible by {stride}, got {x.shape[1:]}")
        for layer in self.trunk:
            x = layer.forward(x, frozen=frozen)
        x = self.upsample.forward(x, frozen=frozen)
        x = self.up_relu.forward(x, frozen=frozen)
        self._feat = x
        scores = self.cls_head.forward(x, frozen=frozen)
        transform = self.tf_head.forward(x, frozen=frozen)
        return DenseOutputs(class_probs=softmax_channels(scores), transform=transform)

    @property
    def features(self) -> FeatureMap:
        """The shared half-resolution feature map from the last forward."""
        if self._feat is None:
            raise StaleActivations("forward() has not been run")
        return FeatureMap(values=self._feat)

    def pool_at(self, points_grid: np.ndarray):
        """Bilinear-pool the shared map at (10, 2) grid points; keeps cache."""
        if self._feat is None:
            raise StaleActivations("forward() has not been run")
        samples, cache = bilinear_sample(self._feat, points_grid)
        return samples.reshape(-1), cache

    def bbox_head_forward(self, pooled: np.ndarray, frozen: bool = False) -> np.ndarray:
        h = self.fc1.forward(pooled, frozen=frozen)
        h = self.fc_relu.forward(h, frozen=frozen)
        return self.fc2.forward(h, frozen=frozen)

    def bbox_head(self, pooled: np.ndarray) -> BoxDelta:
        """Regression offsets for one pooled feature vector."""
        return BoxDelta.from_array(self.bbox_head_forward(pooled))

    def bbox_head_backward(self, ddelta: np.ndarray) -> np.ndarray:
        """Backprop one box through the fc head; returns d(pooled)."""
        dh = self.fc2.backward(ddelta)
        dh = self.fc_relu.backward(dh)
        return self.fc1.backward(dh)

    def backward(
        self,
        dscores: np.ndarray,
        dtransform: np.ndarray,
        dfeat_extra: np.ndarray | None = None,
    ):
        """Backpropagate head gradients into every parameter gradient.

        ``dscores`` is the gradient at the pre-softmax class scores,
        ``dtransform`` at the raw transform outputs, and ``dfeat_extra`` an
        optional extra gradient on the shared feature map (the pooled-box
        path contributes through here).
        """
        if self._feat is None:
            raise StaleActivations("forward() has not been run")
        dfeat = self.cls_head.backward(dscores) + self.tf_head.backward(dtransform)
        if dfeat_extra is not None:
            dfeat = dfeat + dfeat_extra
        dx = self.up_relu.backward(dfeat)
        dx = self.upsample.backward(dx)
        for layer in reversed(self.trunk):
            dx = layer.backward(dx)
        return dx

    # ------------------------------------------------------------------
    # checkpointing
    # ------------------------------------------------------------------

    def save(self, path):
        arrays = {f"param/{k}": v for k, v in self.params().items()}
        np.savez(
            path,
            format_version=np.array(CHECKPOINT_FORMAT_VERSION, dtype=np.int64),
            config_json=np.array(self.config.to_json()),
            **arrays,
        )

    @classmethod
    def load(cls, path) -> "FaceDetectionModel":
        with np.load(path, allow_pickle=False) as data:
            if "format_version" not in data or "config_json" not in data:
                raise FileFormatError(path, 0, "not a model checkpoint")
            version = int(data["format_version"])
            if version != CHECKPOINT_FORMAT_VERSION:
                raise FileFormatError(
                    path, 0,
                    f"checkpoint format version {version} != supported {CHECKPOINT_FORMAT_VERSION}",
                )
            config = ModelConfig.from_json(str(data["config_json"]))
            model = cls(config)
            params = model.params()
            for key in params:
                stored = f"param/{key}"
                if stored not in data:
                    raise FileFormatError(path, 0, f"missing parameter {key}")
                if data[stored].shape != params[key].shape:
                    raise FileFormatError(path, 0, f"shape mismatch for parameter {key}")
                params[key][...] = data[stored]
        return model
