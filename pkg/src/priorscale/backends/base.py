"""Interfaces that isolate the neural components from the pipeline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol, runtime_checkable

import numpy as np

from ..attention import AttentionControl, AttentionPriorSet
from ..scheduler import NoiseSchedule
from ..tiling import RegionSpec


@dataclass(frozen=True)
class TextCondition:
    """Encoded prompt. ``tokens`` is None for remote encoders that only ship text."""

    text: str
    tokens: Optional[np.ndarray] = None


@dataclass(frozen=True)
class SiteInfo:
    site_id: str
    downsample_factor: int
    head_count: int

    def keys(self) -> list[str]:
        return [site_key(self.site_id, h) for h in range(self.head_count)]


def site_key(site_id: str, head: int) -> str:
    return f"{site_id}/h{head}"


@runtime_checkable
class Denoiser(Protocol):
    schedule: NoiseSchedule
    native_region_size: Optional[int]
    concurrent_safe: bool

    def predict_noise(
        self,
        z: np.ndarray,
        t: int,
        text: TextCondition,
        *,
        region: Optional[RegionSpec] = None,
        attention: Optional[AttentionControl] = None,
        guidance_scale: float = 1.0,
    ) -> np.ndarray: ...

    def capture_attention(self, z: np.ndarray, t: int, text: TextCondition) -> AttentionPriorSet: ...

    def site_registry(self) -> list[SiteInfo]: ...


@runtime_checkable
class LatentCodec(Protocol):
    def encode(self, image: np.ndarray) -> np.ndarray: ...

    def decode(self, latent: np.ndarray) -> np.ndarray: ...


@runtime_checkable
class Captioner(Protocol):
    model_id: str

    def describe(self, image: np.ndarray, instruction: str) -> str: ...


@runtime_checkable
class TextConditioner(Protocol):
    max_tokens: int

    def encode(self, text: str) -> TextCondition: ...

    def count_tokens(self, text: str) -> int: ...


def classifier_free_guidance(eps_uncond: np.ndarray, eps_cond: np.ndarray, scale: float) -> np.ndarray:
    """Guided noise; scales <= 1 mean guidance is off and return the conditional branch."""
    if scale <= 1.0:
        return eps_cond
    return eps_uncond + scale * (eps_cond - eps_uncond)
