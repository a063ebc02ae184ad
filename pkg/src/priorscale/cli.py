"""Command-line entry point.

Settings resolve from, in increasing precedence: built-in defaults, a flat
JSON config file (``--config`` or ``PRIORSCALE_CONFIG``), environment
variables ``PRIORSCALE_<KEY>``, and command-line flags. Config keys are the
field names of :class:`CliInvocation`.

Exit codes: 0 success, 1 configuration or input error, 2 backend failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import dataclass, fields
from typing import Mapping, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import BackendError, ConfigurationError
from .pipeline import Backends, PipelineConfig, upscale
from .regional_prompts import PromptCache
from .scheduler import GSP_KINDS, GSPSchedule

log = logging.getLogger("priorscale")

ENV_PREFIX = "PRIORSCALE_"
SCALES = (2, 3, 4, 8)
BACKENDS = ("mock", "diffusion-service")


class CliError(ConfigurationError):
    pass


@dataclass
class CliInvocation:
    input: Optional[str] = None
    output: Optional[str] = None
    prompt: Optional[str] = None
    scale: Optional[int] = None
    width: Optional[int] = None
    height: Optional[int] = None
    backend: str = "mock"
    noise_fraction: float = 0.45
    default_steps: int = 50
    gsp_step_size: float = 0.2
    gsp_schedule: str = "cosine"
    wavelet_levels: int = 1
    region_size: Optional[int] = None
    overlap: Optional[int] = None
    guidance_scale: float = 7.5
    seed: int = 0
    enable_gsp: bool = True
    enable_rap: bool = True
    enable_rsp: bool = True
    max_workers: int = 1
    cache_path: Optional[str] = None
    dump_dir: Optional[str] = None
    denoiser_url: Optional[str] = None
    captioner_url: Optional[str] = None
    captioner_model: str = "llava-v1.6"
    timeout: float = 60.0
    verbosity: int = 0

    def pipeline_config(self, target_height: int, target_width: int) -> PipelineConfig:
        return PipelineConfig(
            target_height=target_height,
            target_width=target_width,
            noise_fraction=self.noise_fraction,
            default_steps=self.default_steps,
            gsp=GSPSchedule(self.gsp_step_size, self.gsp_schedule),
            wavelet_levels=self.wavelet_levels,
            region_size=self.region_size,
            overlap=self.overlap,
            guidance_scale=self.guidance_scale,
            seed=self.seed,
            enable_gsp=self.enable_gsp,
            enable_rap=self.enable_rap,
            enable_rsp=self.enable_rsp,
            max_workers=self.max_workers,
            dump_dir=self.dump_dir,
        )


_FIELDS = {f.name: f for f in fields(CliInvocation)}
_TYPES = {
    "scale": int, "width": int, "height": int, "default_steps": int, "wavelet_levels": int,
    "region_size": int, "overlap": int, "seed": int, "max_workers": int, "verbosity": int,
    "noise_fraction": float, "gsp_step_size": float, "guidance_scale": float, "timeout": float,
    "enable_gsp": bool, "enable_rap": bool, "enable_rsp": bool,
}


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _coerce(key: str, value, source: str):
    kind = _TYPES.get(key, str)
    try:
        if kind is bool:
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind is int and isinstance(value, float) and not value.is_integer():
            raise ValueError(value)
        if kind is int and isinstance(value, bool):
            raise ValueError(value)
        return kind(value)
    except (TypeError, ValueError):
        raise CliError(f"{source}: invalid value {value!r} for {key}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="priorscale", description="Upscale an image with regional diffusion priors.",
                argument_default=argparse.SUPPRESS)
    p.add_argument("--config", help="flat JSON file of settings")
    p.add_argument("--input", "-i", help="low-resolution PNG")
    p.add_argument("--output", "-o", help="output PNG path")
    p.add_argument("--prompt", "-p", help="global text prompt")
    p.add_argument("--scale", type=int, help=f"upscaling factor, one of {SCALES}")
    p.add_argument("--width", type=int, help="explicit output width in pixels")
    p.add_argument("--height", type=int, help="explicit output height in pixels")
    p.add_argument("--backend", help=f"one of {BACKENDS}")
    p.add_argument("--noise-fraction", type=float)
    p.add_argument("--default-steps", type=int, help="base model's default sampler steps")
    p.add_argument("--gsp-step-size", "--gsp-step", type=float, dest="gsp_step_size")
    p.add_argument("--gsp-schedule", choices=GSP_KINDS)
    p.add_argument("--wavelet-levels", type=int)
    p.add_argument("--region-size", type=int, help="latent units")
    p.add_argument("--overlap", type=int, help="latent units")
    p.add_argument("--guidance-scale", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--gsp", dest="enable_gsp", action=argparse.BooleanOptionalAction)
    p.add_argument("--rap", dest="enable_rap", action=argparse.BooleanOptionalAction)
    p.add_argument("--rsp", dest="enable_rsp", action=argparse.BooleanOptionalAction)
    p.add_argument("--max-workers", type=int)
    p.add_argument("--cache", dest="cache_path", help="caption cache file (JSON lines)")
    p.add_argument("--dump-dir", help="write per-step latents and a manifest here")
    p.add_argument("--denoiser-url")
    p.add_argument("--captioner-url")
    p.add_argument("--captioner-model")
    p.add_argument("--timeout", type=float)
    p.add_argument("--verbose", "-v", dest="verbosity", action="count")
    return p


def _check_layer(layer: Mapping[str, object], source: str, names: Mapping[str, str]) -> None:
    if layer.get("scale") is not None:
        for other in ("width", "height"):
            if layer.get(other) is not None:
                raise CliError(f"{source}: {names['scale']} and {names[other]} are mutually exclusive")


def resolve(flags: Mapping[str, object], config: Mapping[str, object], environ: Mapping[str, str]) -> CliInvocation:
    """Merge the three setting layers; a pure function of its inputs."""
    env_layer = {}
    for key in _FIELDS:
        raw = environ.get(ENV_PREFIX + key.upper())
        if raw is not None:
            env_layer[key] = _coerce(key, raw, f"environment {ENV_PREFIX + key.upper()}")
    conf_layer = {}
    for key, value in config.items():
        if key not in _FIELDS:
            raise CliError(f"config file: unknown key {key!r}")
        conf_layer[key] = None if value is None else _coerce(key, value, "config file")

    _check_layer(conf_layer, "config file", {k: k for k in _FIELDS})
    _check_layer(env_layer, "environment", {k: ENV_PREFIX + k.upper() for k in _FIELDS})
    _check_layer(flags, "arguments", {k: _flag(k) for k in _FIELDS})

    merged: dict[str, object] = {}
    for layer in (conf_layer, env_layer, dict(flags)):
        if layer.get("scale") is not None:
            merged.pop("width", None)
            merged.pop("height", None)
        if layer.get("width") is not None or layer.get("height") is not None:
            merged.pop("scale", None)
        merged.update(layer)
    inv = CliInvocation(**merged)
    validate(inv)
    return inv


def validate(inv: CliInvocation) -> None:
    if not inv.input:
        raise CliError("missing --input")
    if not inv.output:
        raise CliError("missing --output")
    if not inv.prompt:
        raise CliError("missing --prompt")
    if inv.backend not in BACKENDS:
        raise CliError(f"--backend: unknown backend {inv.backend!r}; expected one of {BACKENDS}")
    dims = (inv.width, inv.height)
    if inv.scale is None and dims == (None, None):
        raise CliError("give either --scale or both --width and --height")
    if inv.scale is not None and inv.scale not in SCALES:
        raise CliError(f"--scale must be one of {SCALES}, got {inv.scale}")
    if inv.scale is None and None in dims:
        raise CliError("--width and --height must be given together")
    if inv.gsp_schedule not in GSP_KINDS:
        raise CliError(f"--gsp-schedule must be one of {GSP_KINDS}")
    if inv.backend == "diffusion-service" and not inv.denoiser_url:
        raise CliError(f"--denoiser-url (or {ENV_PREFIX}DENOISER_URL) is required for the diffusion-service backend")


def parse_args(argv: Optional[Sequence[str]] = None, environ: Optional[Mapping[str, str]] = None) -> CliInvocation:
    environ = os.environ if environ is None else environ
    ns = vars(build_parser().parse_args(argv))
    config_path = ns.pop("config", None) or environ.get(ENV_PREFIX + "CONFIG")
    config = {}
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as fh:
                config = json.load(fh)
        except (OSError, ValueError) as exc:
            raise CliError(f"--config: cannot read {config_path}: {exc}") from exc
        if not isinstance(config, dict):
            raise CliError(f"--config: {config_path} must hold a flat JSON object")
    return resolve(ns, config, environ)


def read_image(path: str) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_png_atomic(image: np.ndarray, path: str) -> None:
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".priorscale-", suffix=".png", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            Image.fromarray(arr).save(fh, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def make_backends(inv: CliInvocation) -> Backends:
    cache = PromptCache(inv.cache_path)
    if inv.backend == "mock":
        from .backends.mock import MockCaptioner, MockCodec, MockDenoiser, MockTextConditioner

        return Backends(MockDenoiser(), MockCodec(), MockTextConditioner(), MockCaptioner(), cache)
    from .backends.service import DiffusionServiceDenoiser, HttpCaptioner, ServiceCodec, ServiceTextConditioner

    captioner = None
    if inv.captioner_url:
        captioner = HttpCaptioner(inv.captioner_url, inv.captioner_model, inv.timeout)
    return Backends(
        DiffusionServiceDenoiser(inv.denoiser_url, inv.timeout),
        ServiceCodec(inv.denoiser_url, inv.timeout),
        ServiceTextConditioner(),
        captioner,
        cache,
    )


def run(inv: CliInvocation) -> int:
    try:
        low = read_image(inv.input)
    except (OSError, ValueError) as exc:
        log.error("cannot read input %s: %s", inv.input, exc)
        return 1
    if inv.scale is not None:
        height, width = low.shape[0] * inv.scale, low.shape[1] * inv.scale
    else:
        height, width = inv.height, inv.width
    try:
        config = inv.pipeline_config(height, width)
        backends = make_backends(inv)
        tic = time.perf_counter()
        result = upscale(low, inv.prompt, config, backends)
        elapsed = time.perf_counter() - tic
        write_png_atomic(result.image, inv.output)
    except ConfigurationError as exc:
        log.error("configuration error: %s", exc)
        return 1
    except BackendError as exc:
        log.error("backend failure: %s", exc)
        return 2
    except OSError as exc:
        log.error("cannot write %s: %s", inv.output, exc)
        return 1
    log.info("wrote %s (%dx%d): %d regions x %d steps, %d denoiser calls, %.2fs",
             inv.output, width, height, len(result.partition), len(result.timesteps),
             result.denoiser_calls, elapsed)
    log.info("timings: %s", ", ".join(f"{k} {v:.2f}s" for k, v in result.timings.items()))
    fallbacks = sum(p.source == "fallback" for p in result.prompts)
    if fallbacks and inv.enable_rsp:
        log.warning("%d of %d regions used the global prompt", fallbacks, len(result.prompts))
    if inv.verbosity:
        for i, loss in enumerate(result.gsp_loss_trace):
            print(f"step {i:3d}  t={result.timesteps[i][0]:4d}  gsp_loss={loss:.6g}")
        print(f"final gsp_loss={result.final_gsp_loss:.6g}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        inv = parse_args(argv)
    except CliError as exc:
        logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
        log.error("%s", exc)
        return 1
    level = logging.DEBUG if inv.verbosity >= 1 else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return run(inv)


if __name__ == "__main__":
    sys.exit(main())
