"""Tuning-free image upscaling by regional diffuse-then-denoise with
global-structure, regional-attention and regional-prompt priors."""

from .errors import BackendError, CaptionerError, ConfigurationError
from .pipeline import Backends, PipelineConfig, RunArtifacts, gsp_apply, upscale
from .scheduler import GSPSchedule, NoiseSchedule, build_schedule, entry_step, gsp_delta
from .tiling import Partition, RegionSpec, partition

__version__ = "0.1.0"

__all__ = [
    "BackendError", "CaptionerError", "ConfigurationError",
    "Backends", "PipelineConfig", "RunArtifacts", "gsp_apply", "upscale",
    "GSPSchedule", "NoiseSchedule", "build_schedule", "entry_step", "gsp_delta",
    "Partition", "RegionSpec", "partition",
]
