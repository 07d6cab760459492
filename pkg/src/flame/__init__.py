"""Flexi-modal sparse mixture-of-experts with compress-and-stack continual learning."""

from .data import Dataset, ModalityGen, StageSpec, StreamConfig, SyntheticTaskParams, TaskSpec, make_synthetic_task
from .model import FlameModel, ModelConfig, load_checkpoint, save_checkpoint
from .trainer import (StageLedger, TrainConfig, baseline_ewc, baseline_lora, baseline_simple_ft, continual_stage,
                      count_params, evaluate, pretrain_multitask, run_stream)

__all__ = [
    "Dataset", "ModalityGen", "StageSpec", "StreamConfig", "SyntheticTaskParams", "TaskSpec", "make_synthetic_task",
    "FlameModel", "ModelConfig", "load_checkpoint", "save_checkpoint",
    "StageLedger", "TrainConfig", "baseline_ewc", "baseline_lora", "baseline_simple_ft", "continual_stage",
    "count_params", "evaluate", "pretrain_multitask", "run_stream",
]
__version__ = "0.1.0"
