"""Overlapped region partitioning, cropping and uniform-mean merging."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class RegionSpec:
    index: int
    top: int
    left: int
    height: int
    width: int

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def right(self) -> int:
        return self.left + self.width

    def scaled(self, factor: int) -> "RegionSpec":
        return scale_spec(self, factor)


@dataclass(frozen=True)
class Partition:
    regions: tuple[RegionSpec, ...]
    region_size: int
    overlap: int
    canvas_height: int
    canvas_width: int

    @property
    def stride(self) -> int:
        return self.region_size - self.overlap

    def __len__(self) -> int:
        return len(self.regions)

    def __iter__(self):
        return iter(self.regions)


def axis_offsets(dim: int, region_size: int, stride: int) -> list[int]:
    offsets = list(range(0, dim - region_size + 1, stride))
    if offsets[-1] + region_size < dim:
        offsets.append(dim - region_size)
    return offsets


def partition(canvas_height: int, canvas_width: int, region_size: int, overlap: int) -> Partition:
    if region_size < 1:
        raise ValueError(f"region_size must be positive, got {region_size}")
    if region_size > min(canvas_height, canvas_width):
        raise ValueError(
            f"region_size {region_size} exceeds canvas {canvas_height}x{canvas_width}"
        )
    if not 0 <= overlap < region_size:
        raise ValueError(f"overlap must be in [0, {region_size}), got {overlap}")
    stride = region_size - overlap
    tops = axis_offsets(canvas_height, region_size, stride)
    lefts = axis_offsets(canvas_width, region_size, stride)
    regions = tuple(
        RegionSpec(i, top, left, region_size, region_size)
        for i, (top, left) in enumerate((t, l) for t in tops for l in lefts)
    )
    return Partition(regions, region_size, overlap, canvas_height, canvas_width)


def _check_bounds(spec: RegionSpec, height: int, width: int) -> None:
    if spec.top < 0 or spec.left < 0 or spec.bottom > height or spec.right > width:
        raise ValueError(f"region {spec} outside canvas {height}x{width}")


def crop(canvas: np.ndarray, spec: RegionSpec) -> np.ndarray:
    """Copy of the region's window over the last two axes (all channels)."""
    _check_bounds(spec, canvas.shape[-2], canvas.shape[-1])
    return canvas[..., spec.top:spec.bottom, spec.left:spec.right].copy()


def merge(
    regions: Sequence[np.ndarray],
    specs: Sequence[RegionSpec],
    canvas_height: int,
    canvas_width: int,
) -> np.ndarray:
    """Average overlapping region values into a full canvas.

    Sums accumulate in extended precision, so a cell covered k times by the
    same value x comes back as exactly x (plain float64 breaks this for k=3).
    """
    if len(regions) != len(specs):
        raise ValueError(f"{len(regions)} regions but {len(specs)} specs")
    if not regions:
        raise ValueError("nothing to merge")
    lead = regions[0].shape[:-2]
    out_dtype = np.result_type(*regions, np.float32)
    total = np.zeros(lead + (canvas_height, canvas_width), dtype=np.longdouble)
    count = np.zeros((canvas_height, canvas_width), dtype=np.int64)
    for region, spec in zip(regions, specs):
        _check_bounds(spec, canvas_height, canvas_width)
        if region.shape != lead + (spec.height, spec.width):
            raise ValueError(
                f"region {spec.index} has shape {region.shape}, expected {lead + (spec.height, spec.width)}"
            )
        total[..., spec.top:spec.bottom, spec.left:spec.right] += region
        count[spec.top:spec.bottom, spec.left:spec.right] += 1
    if not count.all():
        raise ValueError(f"{int((count == 0).sum())} canvas cells not covered by any region")
    return (total / count).astype(out_dtype)


def scale_spec(spec: RegionSpec, downsample_factor: int) -> RegionSpec:
    """Map latent coordinates to a grid ``downsample_factor`` times coarser.

    The origin rounds down and the far edge rounds up so the scaled window
    always covers the original one.
    """
    if downsample_factor < 1:
        raise ValueError(f"downsample_factor must be >= 1, got {downsample_factor}")
    f = downsample_factor
    top, left = spec.top // f, spec.left // f
    bottom, right = math.ceil(spec.bottom / f), math.ceil(spec.right / f)
    return RegionSpec(spec.index, top, left, bottom - top, right - left)
