"""Configuration, checkpoints, orchestration and the command-line interface."""

from .checkpoint import (SCHEMA_VERSION, Checkpoint, CheckpointError, MalformedCheckpoint,
                         QuantBundle, ShapeMismatch, VersionMismatch, load_checkpoint,
                         save_checkpoint)
from .config import ConfigError, ExperimentConfig, load_config

__all__ = ["SCHEMA_VERSION", "Checkpoint", "CheckpointError", "ConfigError", "ExperimentConfig",
           "MalformedCheckpoint", "QuantBundle", "ShapeMismatch", "VersionMismatch",
           "load_checkpoint", "load_config", "save_checkpoint"]
