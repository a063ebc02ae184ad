"""Cross-attention scores, the regional attention prior and the composer
that fuses regional-prompt attention with prior-score attention."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable

import numpy as np

from .tiling import RegionSpec, scale_spec
from .wavelet import resize


@dataclass(frozen=True)
class AttentionMap:
    """Row-stochastic scores of shape (spatial_height * spatial_width, tokens)."""

    scores: np.ndarray
    spatial_height: int
    spatial_width: int
    site_id: str = ""
    downsample_factor: int = 1

    def __post_init__(self):
        if self.scores.ndim != 2:
            raise ValueError(f"scores must be 2-D, got shape {self.scores.shape}")
        if self.scores.shape[0] != self.spatial_height * self.spatial_width:
            raise ValueError(
                f"{self.scores.shape[0]} score rows do not match a "
                f"{self.spatial_height}x{self.spatial_width} grid"
            )

    @property
    def token_count(self) -> int:
        return self.scores.shape[1]

    def grid(self) -> np.ndarray:
        return self.scores.reshape(self.spatial_height, self.spatial_width, -1)

    def is_row_stochastic(self, atol: float = 1e-5) -> bool:
        return bool(np.all(self.scores >= -atol) and np.allclose(self.scores.sum(axis=1), 1.0, atol=atol))


@dataclass
class AttentionPriorSet:
    maps: dict[str, AttentionMap]
    timestep: int

    def __post_init__(self):
        counts = {m.token_count for m in self.maps.values()}
        if len(counts) > 1:
            raise ValueError(f"prior maps disagree on token count: {sorted(counts)}")


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


def attention_scores(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise ValueError(f"query {q.shape} and key {k.shape} need a shared inner dimension")
    return softmax(q @ k.T / math.sqrt(q.shape[1]))


def interpolate_attention(a: AttentionMap, target_height: int, target_width: int) -> AttentionMap:
    """Bilinearly resample the spatial grid; the token axis is untouched."""
    if target_height < a.spatial_height or target_width < a.spatial_width:
        raise ValueError(
            f"cannot downscale attention {a.spatial_height}x{a.spatial_width} "
            f"to {target_height}x{target_width}"
        )
    grid = np.moveaxis(a.grid(), -1, 0)  # (k, h, w)
    up = np.moveaxis(resize(grid, target_height, target_width), 0, -1)
    return replace(
        a,
        scores=up.reshape(target_height * target_width, a.token_count),
        spatial_height=target_height,
        spatial_width=target_width,
    )


def crop_attention(a: AttentionMap, spec: RegionSpec) -> AttentionMap:
    """Window the spatial grid; ``spec`` must already be in this map's units."""
    if spec.top < 0 or spec.left < 0 or spec.bottom > a.spatial_height or spec.right > a.spatial_width:
        raise ValueError(f"region {spec} outside attention grid {a.spatial_height}x{a.spatial_width}")
    window = a.grid()[spec.top:spec.bottom, spec.left:spec.right]
    return replace(
        a,
        scores=window.reshape(spec.height * spec.width, a.token_count).copy(),
        spatial_height=spec.height,
        spatial_width=spec.width,
    )


def compose_attention(
    q_region: np.ndarray,
    k_semantic: np.ndarray,
    v_semantic: np.ndarray,
    a_prior: np.ndarray,
    v_global: np.ndarray,
) -> np.ndarray:
    """Average of regional-prompt attention and prior-score attention.

    ``softmax(q k^T / sqrt(d)) v_semantic`` and ``a_prior v_global`` are
    computed independently and averaged.
    """
    if k_semantic.shape[0] != v_semantic.shape[0]:
        raise ValueError(f"k_semantic has {k_semantic.shape[0]} rows but v_semantic has {v_semantic.shape[0]}")
    if a_prior.shape[0] != q_region.shape[0]:
        raise ValueError(f"a_prior has {a_prior.shape[0]} rows but q_region has {q_region.shape[0]}")
    if a_prior.shape[1] != v_global.shape[0]:
        raise ValueError(f"a_prior has {a_prior.shape[1]} tokens but v_global has {v_global.shape[0]} rows")
    if v_semantic.shape[1] != v_global.shape[1]:
        raise ValueError(f"v_semantic width {v_semantic.shape[1]} differs from v_global width {v_global.shape[1]}")
    c_s = attention_scores(q_region, k_semantic) @ v_semantic
    c_a = a_prior @ v_global
    return (c_s + c_a) / 2


def upsample_priors(prior: AttentionPriorSet, canvas_height: int, canvas_width: int) -> AttentionPriorSet:
    """Interpolate every captured map to its site's grid on the high-resolution canvas."""
    maps = {}
    for key, m in prior.maps.items():
        f = m.downsample_factor
        maps[key] = interpolate_attention(m, -(-canvas_height // f), -(-canvas_width // f))
    return AttentionPriorSet(maps, prior.timestep)


def regional_priors(prior: AttentionPriorSet, spec: RegionSpec) -> dict[str, np.ndarray]:
    """Per-site prior scores for one latent region of an upsampled prior set."""
    return {
        key: crop_attention(m, scale_spec(spec, m.downsample_factor)).scores
        for key, m in prior.maps.items()
    }


@dataclass
class AttentionControl:
    """What a denoiser needs to replace cross-attention inside one region.

    ``priors`` maps a site key to the region's prior scores; ``global_text``
    supplies the value projections multiplied against them. ``compose`` is
    called as ``compose(q, k_semantic, v_semantic, prior_scores, v_global)``.
    """

    priors: dict[str, np.ndarray]
    global_text: Any
    compose: Callable[..., np.ndarray] = field(default=compose_attention)
