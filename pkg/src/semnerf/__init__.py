"""semnerf: CPU semantic radiance fields.

Trains a small MLP scene representation jointly on pixel colors and
semantic labels, supports target-focused fast training with an adaptive
high-contrast reset color, semantic scene editing (keep-only / mask-out
renders), and a self-supervised morphology+clustering label-correction
loop.
"""

__version__ = "0.1.0"

from .field import NetworkArchitecture, init_params, load_checkpoint, save_checkpoint
from .render import RenderSettings, SamplingConfig, render_image
from .scene import SceneDataset, SceneSpec, UNLABELED, generate_scene, load_dataset, write_dataset
from .selfsup import SelfSupSchedule
from .trainer import FastTrainConfig, TrainConfig, Trainer, train

__all__ = [
    "NetworkArchitecture", "init_params", "save_checkpoint", "load_checkpoint",
    "RenderSettings", "SamplingConfig", "render_image",
    "SceneSpec", "SceneDataset", "UNLABELED", "generate_scene",
    "write_dataset", "load_dataset",
    "SelfSupSchedule", "TrainConfig", "FastTrainConfig", "Trainer", "train",
]
