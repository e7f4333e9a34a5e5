"""Desk-scale open-vocabulary detector with vision-language fusion and text-aligned proposals."""

from .config import ModelConfig, load_config
from .evaluation import EvalReport, evaluate
from .model import VLDet
from .synthdata import build_vocabulary, generate_dataset, load_dataset
from .train import FreezePolicy, build_model, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "EvalReport",
    "FreezePolicy",
    "ModelConfig",
    "VLDet",
    "build_model",
    "build_vocabulary",
    "evaluate",
    "fit",
    "generate_dataset",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "save_checkpoint",
]
