"""Configuration, dataset I/O, stage runners and the ``lvmae`` CLI."""
from .config import ConfigError, ExperimentConfig, config_hash, load
from .runs import STAGES, RunManifest

__all__ = ["ConfigError", "ExperimentConfig", "RunManifest", "STAGES", "config_hash", "load"]
