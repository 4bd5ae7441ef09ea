"""Online class-incremental learning with a shared prompt generator on a frozen transformer."""

from .backbone import Backbone, BackboneConfig, load_checkpoint, pretrain_base, save_checkpoint
from .data_stream import LabeledDataset, make_synthetic, split_tasks, stream_chunks
from .evaluator import MetricsLedger, caa, faa, ffm
from .learner import ABLATION_PRESETS, FULL, Learner, LearnerConfig
from .prompt_engine import PromptConfig

__version__ = "0.1.0"

__all__ = [
    "ABLATION_PRESETS", "FULL", "Backbone", "BackboneConfig", "LabeledDataset", "Learner", "LearnerConfig",
    "MetricsLedger", "PromptConfig", "caa", "faa", "ffm", "load_checkpoint", "make_synthetic", "pretrain_base",
    "save_checkpoint", "split_tasks", "stream_chunks",
]
