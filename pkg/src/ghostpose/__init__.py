"""Desk-scale laboratory for disappearance-style backdoor poisoning of human
pose estimators: synthetic data, trigger/label poisoning, toy models, metrics,
defenses, and an experiment runner."""

from .data import (
    Dataset,
    HeatmapTensor,
    LandscapeSet,
    PoseSample,
    gaussian_heatmap,
    generate_synthetic_dataset,
    load_coco_keypoints,
    load_dataset,
    save_dataset,
)
from .errors import (
    AnnotationError,
    CapabilityError,
    ConfigurationError,
    ContaminationError,
    GhostPoseError,
    PlacementError,
    UndefinedScoreError,
)
from .landscape import (
    average_label,
    generate_landscape_images,
    label_centroid_stats,
    landscape_labels,
)
from .metrics import EvalReport, ap, asr, oks, pckh, racu, utility
from .models import (
    PoseModel,
    TrainConfig,
    decode_heatmaps,
    default_heatmap_side,
    gradient_check,
    train_model,
)
from .poisoning import (
    LabelDesign,
    PoisonConfig,
    TriggerSpec,
    attack_target_label,
    inject_trigger,
    poison_dataset,
    split_for_poisoning,
)

__version__ = "0.1.0"

__all__ = [
    "AnnotationError",
    "CapabilityError",
    "ConfigurationError",
    "ContaminationError",
    "Dataset",
    "EvalReport",
    "GhostPoseError",
    "HeatmapTensor",
    "LabelDesign",
    "LandscapeSet",
    "PlacementError",
    "PoisonConfig",
    "PoseModel",
    "PoseSample",
    "TrainConfig",
    "TriggerSpec",
    "UndefinedScoreError",
    "ap",
    "asr",
    "attack_target_label",
    "average_label",
    "decode_heatmaps",
    "default_heatmap_side",
    "gaussian_heatmap",
    "generate_landscape_images",
    "generate_synthetic_dataset",
    "gradient_check",
    "inject_trigger",
    "label_centroid_stats",
    "landscape_labels",
    "load_coco_keypoints",
    "load_dataset",
    "oks",
    "pckh",
    "poison_dataset",
    "racu",
    "save_dataset",
    "split_for_poisoning",
    "train_model",
    "utility",
]
