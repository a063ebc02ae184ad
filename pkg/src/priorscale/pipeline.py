"""Regional diffuse-then-denoise upscaling guided by a low-frequency
structure prior, a regional attention prior and regional prompts."""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention import AttentionControl, regional_priors, upsample_priors
from .backends.base import TextCondition
from .errors import ConfigurationError
from .regional_prompts import PromptCache, RegionalPrompt, caption_all
from .scheduler import (
    GSPSchedule,
    NoiseSchedule,
    active_steps,
    add_noise,
    ddim_step,
    gsp_delta,
    predict_z0,
)
from .tiling import Partition, crop, merge, partition
from .wavelet import gsp_gradient_from_ll, ll_residual, resize, structure_target

log = logging.getLogger(__name__)

LATENT_SCALE = 8


@dataclass
class PipelineConfig:
    target_height: int
    target_width: int
    noise_fraction: float = 0.45
    default_steps: int = 50
    gsp: GSPSchedule = field(default_factory=GSPSchedule)
    wavelet_levels: int = 1
    region_size: Optional[int] = None  # latent units; None means the backend's native size
    overlap: Optional[int] = None  # latent units; None means half the region size
    guidance_scale: float = 7.5
    seed: int = 0
    enable_gsp: bool = True
    enable_rap: bool = True
    enable_rsp: bool = True
    max_workers: int = 1
    caption_workers: int = 4
    dump_dir: Optional[str] = None

    def validate(self) -> None:
        m = LATENT_SCALE * 2**self.wavelet_levels
        if self.target_height % m or self.target_width % m or self.target_height <= 0 or self.target_width <= 0:
            raise ConfigurationError(
                f"target {self.target_height}x{self.target_width} must be positive multiples of {m}"
            )
        if self.wavelet_levels not in (1, 2, 3):
            raise ConfigurationError(f"wavelet_levels must be 1, 2 or 3, got {self.wavelet_levels}")
        if not 0 < self.noise_fraction <= 1:
            raise ConfigurationError(f"noise_fraction must be in (0, 1], got {self.noise_fraction}")
        if self.default_steps < 1:
            raise ConfigurationError(f"default_steps must be >= 1, got {self.default_steps}")
        if self.region_size is not None and self.region_size < 1:
            raise ConfigurationError(f"region_size must be positive, got {self.region_size}")
        if self.overlap is not None:
            if self.overlap < 0 or (self.region_size is not None and self.overlap >= self.region_size):
                raise ConfigurationError(f"overlap {self.overlap} must be in [0, region_size)")


@dataclass
class Backends:
    denoiser: object
    codec: object
    text_encoder: object
    captioner: object = None
    cache: Optional[PromptCache] = None


@dataclass
class RunArtifacts:
    image: np.ndarray
    latent: np.ndarray
    gsp_loss_trace: list[float]
    final_gsp_loss: float
    prompts: list[RegionalPrompt]
    partition: Partition
    timesteps: list[tuple[int, int]]
    timings: dict[str, float]
    denoiser_calls: int = 0
    capture_calls: int = 0


def gsp_apply(
    z_merged: np.ndarray,
    z0_hat_merged: np.ndarray,
    target_ll: np.ndarray,
    t: int,
    config: PipelineConfig,
    sched: NoiseSchedule,
) -> np.ndarray:
    """One structure-guidance step on the merged latent.

    The weight follows the timestep that produced ``z0_hat_merged``.
    """
    delta = gsp_delta(t, sched.total_steps, config.gsp)
    if delta == 0.0:
        return z_merged
    grad = gsp_gradient_from_ll(target_ll, z0_hat_merged, t, sched, config.wavelet_levels)
    return z_merged - delta * grad


def _to_multiple(image: np.ndarray, m: int) -> np.ndarray:
    h, w = image.shape[:2]
    nh, nw = max(m, h - h % m), max(m, w - w % m)
    if (nh, nw) == (h, w):
        return image
    log.info("resizing low-resolution input %dx%d to %dx%d for the encoder", h, w, nh, nw)
    return resize_image(image, nh, nw)


def resize_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of an (H, W, C) image."""
    return np.moveaxis(resize(np.moveaxis(image, -1, 0), height, width), 0, -1)


def _resolve_regions(config: PipelineConfig, denoiser, lh: int, lw: int) -> tuple[int, int]:
    size = config.region_size or getattr(denoiser, "native_region_size", None) or min(lh, lw)
    if size > min(lh, lw):
        log.info("region size %d exceeds latent canvas %dx%d; clamping", size, lh, lw)
        size = min(lh, lw)
    overlap = config.overlap if config.overlap is not None else size // 2
    if overlap >= size:
        raise ConfigurationError(f"overlap {overlap} must be smaller than region size {size}")
    return size, overlap


def _check_site_alignment(denoiser, lh, lw, size, overlap, rap: bool) -> None:
    if not rap:
        return
    factors = [s.downsample_factor for s in denoiser.site_registry()]
    if not factors:
        return
    f = max(factors)
    bad = [n for n, v in (("canvas height", lh), ("canvas width", lw), ("region size", size), ("overlap", overlap)) if v % f]
    if bad:
        raise ConfigurationError(
            f"{', '.join(bad)} must be multiples of the coarsest attention factor {f} (latent units)"
        )


def plan_run(config: PipelineConfig, denoiser, latent_height: int, latent_width: int) -> tuple[Partition, list[tuple[int, int]]]:
    """Region partition and (t, t_prev) step list for a latent canvas."""
    size, overlap = _resolve_regions(config, denoiser, latent_height, latent_width)
    _check_site_alignment(denoiser, latent_height, latent_width, size, overlap, config.enable_rap)
    part = partition(latent_height, latent_width, size, overlap)
    steps = active_steps(config.default_steps, config.noise_fraction, denoiser.schedule.total_steps)
    return part, steps


class _Dumper:
    def __init__(self, root: Optional[str]):
        self.root = root
        self.records: list[dict] = []
        if root:
            os.makedirs(root, exist_ok=True)

    def step(self, index: int, t: int, latent: np.ndarray, loss: float) -> None:
        if not self.root:
            return
        name = f"step_{index:03d}.bin"
        data = np.ascontiguousarray(latent, dtype="<f4")
        data.tofile(os.path.join(self.root, name))
        self.records.append({"step": index, "timestep": t, "file": name, "shape": list(data.shape),
                             "dtype": "float32-le", "gsp_loss": loss})

    def close(self) -> None:
        if self.root:
            with open(os.path.join(self.root, "manifest.json"), "w", encoding="utf-8") as fh:
                json.dump({"steps": self.records}, fh, indent=2)


def upscale(low_image: np.ndarray, global_prompt: str, config: PipelineConfig, backends: Backends) -> RunArtifacts:
    config.validate()
    if not global_prompt:
        raise ConfigurationError("global prompt must be non-empty")
    H, W = config.target_height, config.target_width
    if low_image.shape[0] > H or low_image.shape[1] > W:
        raise ConfigurationError(f"input {low_image.shape[1]}x{low_image.shape[0]} is larger than target {W}x{H}")
    den, codec, text = backends.denoiser, backends.codec, backends.text_encoder
    sched = den.schedule
    timings = {"encode": 0.0, "caption": 0.0, "attention": 0.0, "denoise": 0.0, "guidance": 0.0, "decode": 0.0}

    tic = time.perf_counter()
    resized = resize_image(low_image, H, W)
    z_base = codec.encode(resized)
    z0_low = codec.encode(_to_multiple(low_image, LATENT_SCALE))
    lh, lw = z_base.shape[-2:]
    target_ll = structure_target(z0_low, lh, lw, config.wavelet_levels)
    timings["encode"] = time.perf_counter() - tic

    part, steps = plan_run(config, den, lh, lw)

    tic = time.perf_counter()
    if config.enable_rsp and backends.captioner is not None:
        prompts = caption_all(
            backends.captioner, resized, part, global_prompt, backends.cache,
            max_workers=config.caption_workers, max_tokens=text.max_tokens, count_tokens=text.count_tokens,
        )
    else:
        if config.enable_rsp:
            log.warning("no captioner configured; regional prompts fall back to the global prompt")
        prompts = [RegionalPrompt(spec.index, global_prompt, "fallback") for spec in part.regions]
    timings["caption"] = time.perf_counter() - tic

    global_cond = text.encode(global_prompt)
    encoded: dict[str, TextCondition] = {global_prompt: global_cond}
    region_conds = []
    for p in prompts:
        if p.text not in encoded:
            encoded[p.text] = text.encode(p.text)
        region_conds.append(encoded[p.text])

    log.info("%d regions of %d latent cells (overlap %d), %d denoising steps from t=%d",
             len(part), part.region_size, part.overlap, len(steps), steps[0][0])

    eps = np.random.default_rng(config.seed).standard_normal(z_base.shape)
    z = add_noise(z_base, steps[0][0], eps, sched)
    low_rng = np.random.default_rng([config.seed, 1])

    pool = None
    if config.max_workers > 1 and getattr(den, "concurrent_safe", False):
        pool = ThreadPoolExecutor(max_workers=config.max_workers)
    dumper = _Dumper(config.dump_dir)
    trace: list[float] = []
    calls = captures = 0
    try:
        for i, (t, t_prev) in enumerate(steps):
            tic = time.perf_counter()
            prior = None
            if config.enable_rap:
                z_low_t = add_noise(z0_low, t, low_rng.standard_normal(z0_low.shape), sched)
                captured = den.capture_attention(z_low_t, t, global_cond)
                captures += 1
                if captured.maps:
                    prior = upsample_priors(captured, lh, lw)
            timings["attention"] += time.perf_counter() - tic

            tic = time.perf_counter()

            def denoise(spec, z=z, t=t, t_prev=t_prev, prior=prior):
                zr = crop(z, spec)
                control = None
                if prior is not None:
                    control = AttentionControl(regional_priors(prior, spec), global_cond)
                e = den.predict_noise(zr, t, region_conds[spec.index], region=spec,
                                      attention=control, guidance_scale=config.guidance_scale)
                return ddim_step(zr, e, t, t_prev, sched), predict_z0(zr, e, t, sched)

            results = list(pool.map(denoise, part.regions)) if pool else [denoise(s) for s in part.regions]
            calls += len(results)
            z = merge([r[0] for r in results], part.regions, lh, lw)
            z0_hat = merge([r[1] for r in results], part.regions, lh, lw)
            timings["denoise"] += time.perf_counter() - tic

            tic = time.perf_counter()
            loss = float(np.sum(np.square(ll_residual(target_ll, z0_hat, config.wavelet_levels))))
            trace.append(loss)
            if config.enable_gsp:
                z = gsp_apply(z, z0_hat, target_ll, t, config, sched)
            timings["guidance"] += time.perf_counter() - tic
            dumper.step(i, t_prev, z, loss)
            log.debug("step %d (t=%d -> %d): gsp loss %.6g", i, t, t_prev, loss)
    finally:
        if pool:
            pool.shutdown()
        dumper.close()

    final_loss = float(np.sum(np.square(ll_residual(target_ll, z, config.wavelet_levels))))
    tic = time.perf_counter()
    image = codec.decode(z)
    timings["decode"] = time.perf_counter() - tic
    return RunArtifacts(
        image=image, latent=z, gsp_loss_trace=trace, final_gsp_loss=final_loss, prompts=prompts,
        partition=part, timesteps=steps, timings=timings, denoiser_calls=calls, capture_calls=captures,
    )


__all__ = ["PipelineConfig", "Backends", "RunArtifacts", "upscale", "gsp_apply", "plan_run", "resize_image"]
