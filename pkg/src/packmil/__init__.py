"""Pack-based multiple-instance learning on numpy with a small reverse-mode autodiff core."""

from .config import Config, ConfigError, load_config, task_defaults
from .data import FeatureBag, LabelRecord, generate_synthetic_dataset, load_bags, load_manifest, synthesize_bags
from .hyperslide import hyperslide_label
from .losses import asl_loss, focal_multilabel_loss, survival_nll
from .masks import build_masks
from .model import PackMILModel
from .packing import pack_sequences, split_instances
from .trainer import PackTrainer, evaluate, infer_slide

__version__ = "0.1.0"

__all__ = [
    "Config",
    "ConfigError",
    "FeatureBag",
    "LabelRecord",
    "PackMILModel",
    "PackTrainer",
    "asl_loss",
    "build_masks",
    "evaluate",
    "focal_multilabel_loss",
    "generate_synthetic_dataset",
    "hyperslide_label",
    "infer_slide",
    "load_bags",
    "load_config",
    "load_manifest",
    "pack_sequences",
    "split_instances",
    "survival_nll",
    "synthesize_bags",
    "task_defaults",
]
