"""Command-line experiment runner and file formats."""

from .config import KINDS, ConfigError, RunConfig, load_config, load_preset, parse_config, preset_names
from .idx import IDXFormatError, load_idx, read_idx_images, read_idx_labels
from .io import aggregate, emit_csv, emit_plot, read_csv
from .runner import ExperimentResult, LockError, resolve_out_dir, run_experiment

__all__ = [
    "ConfigError",
    "ExperimentResult",
    "IDXFormatError",
    "KINDS",
    "LockError",
    "RunConfig",
    "aggregate",
    "emit_csv",
    "emit_plot",
    "load_config",
    "load_idx",
    "load_preset",
    "parse_config",
    "preset_names",
    "read_csv",
    "read_idx_images",
    "read_idx_labels",
    "resolve_out_dir",
    "run_experiment",
]
