"""Desk-scale diffusion dataset distillation with inversion-matching fine-tuning and subgroup selection."""

from .config import ExperimentConfig, load_config
from .pipeline import Experiment, run_pipeline, run_sweep

__all__ = ["Experiment", "ExperimentConfig", "load_config", "run_pipeline", "run_sweep"]
__version__ = "0.1.0"
