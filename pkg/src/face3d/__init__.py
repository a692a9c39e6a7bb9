"""Face detection driven by a fixed 3D mean-face prior.

A dense convnet classifies every half-resolution grid position into
background or one of ten facial keypoints and regresses an eight-parameter
3D-to-2D transform. Projecting the fixed mean face through a position's
transform yields a complete face hypothesis top-down: ten keypoints, a
bounding box, an ellipse and a log-probability faceness score. Proposals
are pruned by asymmetric-overlap NMS and refined by a box regressor fed
with features pooled at the predicted keypoints. Training, synthetic data
with exact ground truth, gradient verification and benchmark-style scoring
are included; see the README for the CLI.
"""

from .errors import (
    DegenerateBox,
    DegenerateShape,
    DivergenceDetected,
    EmptySample,
    Face3DError,
    FileFormatError,
    InsufficientBackground,
    LengthMismatch,
    MissingEllipse,
    PlacementFailure,
    ShapeMismatch,
    StaleActivations,
)
from .geometry import (
    KEYPOINT_NAMES,
    NUM_KEYPOINTS,
    BoundingBox,
    Ellipse,
    Keypoints2D,
    MeanFace3D,
    TransformParams,
    default_mean_face,
    ellipse_overlap,
    face_bbox,
    face_ellipse,
    iou,
    overlap_asym,
    project,
    top_of_head,
)
from .losses import (
    BoxDelta,
    TrainingPoints,
    bbox_decode,
    bbox_encode,
    bbox_loss,
    cls_loss,
    keypoint_loc_loss,
    smooth_l1,
    smooth_l1_deriv,
    total_loss,
)
from .network import (
    FaceDetectionModel,
    FeatureMap,
    ModelConfig,
    configuration_pooling,
)
from .proposals import (
    GRID_TO_IMAGE,
    NUM_CLASSES,
    DenseOutputs,
    FaceProposal,
    faceness_score,
    nms,
    proposals_from_dense,
)
from .synth import FaceInstance, SyntheticScene, make_dataset, synth_scene
from .training import TrainConfig, learning_rate, sample_points, train
from .evaluation import (
    KeypointAccuracy,
    MatchResult,
    RocPoint,
    keypoint_accuracy,
    match_detections,
    proposal_recall,
    roc_points,
)

__version__ = "0.1.0"
