"""Deterministic stand-ins for the neural components.

None of these model images; they exist so the whole pipeline runs, and can
be checked exactly, without a GPU or network access.
"""

from __future__ import annotations

import hashlib
import math
import re
import threading
from typing import Callable, Optional

import numpy as np

from ..attention import AttentionControl, AttentionMap, AttentionPriorSet, attention_scores
from ..scheduler import NoiseSchedule, build_schedule
from ..tiling import RegionSpec
from .base import SiteInfo, TextCondition, classifier_free_guidance

_WORD = re.compile(r"[\w']+|[^\w\s]")


class MockTextConditioner:
    """Hash-seeded token embeddings with a fixed token budget (BOS/EOS included)."""

    def __init__(self, dim: int = 16, max_tokens: int = 77):
        self.dim = dim
        self.max_tokens = max_tokens

    def tokenize(self, text: str) -> list[str]:
        return _WORD.findall(text.lower())

    def count_tokens(self, text: str) -> int:
        return len(self.tokenize(text)) + 2

    def _embed(self, token: str) -> np.ndarray:
        seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")
        return np.random.default_rng(seed).standard_normal(self.dim)

    def encode(self, text: str) -> TextCondition:
        words = ["<bos>"] + self.tokenize(text)[: self.max_tokens - 2] + ["<eos>"]
        return TextCondition(text, np.stack([self._embed(w) for w in words]))


def _pool(z: np.ndarray, f: int) -> np.ndarray:
    if f == 1:
        return z
    h, w = z.shape[-2:]
    ph, pw = -h % f, -w % f
    if ph or pw:
        z = np.pad(z, [(0, 0)] * (z.ndim - 2) + [(0, ph), (0, pw)], mode="edge")
    c, H, W = z.shape
    return z.reshape(c, H // f, f, W // f, f).mean(axis=(2, 4))


def _box_blur(z: np.ndarray) -> np.ndarray:
    p = np.pad(z, [(0, 0), (1, 1), (1, 1)], mode="edge")
    h, w = z.shape[-2:]
    acc = np.zeros_like(z)
    for dy in range(3):
        for dx in range(3):
            acc += p[:, dy:dy + h, dx:dx + w]
    return acc / 9.0


class MockDenoiser:
    """Tiny closed-form 'network' with real cross-attention sites.

    The clean-latent estimate is the Gaussian posterior mean of a blurred
    input plus a small text-dependent term produced by per-site, per-head
    cross-attention over the prompt tokens. Regional attention control
    replaces the attended features at every site exactly as a real backend
    would.
    """

    concurrent_safe = True

    def __init__(
        self,
        seed: int = 0,
        channels: int = 4,
        key_dim: int = 8,
        sites: tuple[tuple[str, int, int], ...] = (("down", 1, 2), ("mid", 2, 1)),
        text_strength: float = 0.02,
        prior_mean: float = 0.5,
        prior_std: float = 0.3,
        native_region_size: int = 32,
        text_encoder: Optional[MockTextConditioner] = None,
        schedule: Optional[NoiseSchedule] = None,
    ):
        self.schedule = schedule or build_schedule()
        self.native_region_size = native_region_size
        self.text_encoder = text_encoder or MockTextConditioner()
        self.text_strength = text_strength
        self.prior_mean = prior_mean
        self.prior_std = prior_std
        self.channels = channels
        self._sites = [SiteInfo(s, f, h) for s, f, h in sites]
        rng = np.random.default_rng(seed)
        dim = self.text_encoder.dim
        self._weights = {}
        for site in self._sites:
            for key in site.keys():
                self._weights[key] = (
                    rng.standard_normal((channels, key_dim)),
                    rng.standard_normal((dim, key_dim)) / math.sqrt(dim),
                    rng.standard_normal((dim, channels)) / math.sqrt(dim),
                )
        self._uncond = self.text_encoder.encode("")

    def site_registry(self) -> list[SiteInfo]:
        return list(self._sites)

    def _queries(self, z: np.ndarray, site: SiteInfo) -> tuple[np.ndarray, int, int]:
        pooled = _pool(z, site.downsample_factor)
        h, w = pooled.shape[-2:]
        return pooled.reshape(self.channels, h * w).T, h, w

    def _x0(self, z: np.ndarray, t: int, text: TextCondition, attention: Optional[AttentionControl]) -> np.ndarray:
        ab = self.schedule.alpha_bar(t)
        # posterior mean under an i.i.d. N(prior_mean, prior_std^2) latent prior
        var = self.prior_std**2
        gain = var * math.sqrt(ab) / (var * ab + 1.0 - ab)
        base = self.prior_mean + gain * (_box_blur(z) - math.sqrt(ab) * self.prior_mean)
        feature = np.zeros_like(z)
        n_heads = 0
        for site in self._sites:
            tokens, h, w = self._queries(z, site)
            f = site.downsample_factor
            for key in site.keys():
                wq, wk, wv = self._weights[key]
                q = tokens @ wq
                k_sem, v_sem = text.tokens @ wk, text.tokens @ wv
                if attention is not None and key in attention.priors:
                    v_glob = attention.global_text.tokens @ wv
                    out = attention.compose(q, k_sem, v_sem, attention.priors[key], v_glob)
                else:
                    out = attention_scores(q, k_sem) @ v_sem
                grid = out.T.reshape(self.channels, h, w)
                up = np.repeat(np.repeat(grid, f, axis=1), f, axis=2)
                feature += up[:, : z.shape[1], : z.shape[2]]
                n_heads += 1
        return base + self.text_strength * np.tanh(feature / max(n_heads, 1))

    def _eps(self, z, t, text, attention) -> np.ndarray:
        if t < 1:
            raise ValueError("predict_noise needs t >= 1")
        ab = self.schedule.alpha_bar(t)
        return (z - math.sqrt(ab) * self._x0(z, t, text, attention)) / math.sqrt(1.0 - ab)

    def predict_noise(
        self,
        z: np.ndarray,
        t: int,
        text: TextCondition,
        *,
        region: Optional[RegionSpec] = None,
        attention: Optional[AttentionControl] = None,
        guidance_scale: float = 1.0,
    ) -> np.ndarray:
        cond = self._eps(z, t, text, attention)
        if guidance_scale <= 1.0:
            return cond
        return classifier_free_guidance(self._eps(z, t, self._uncond, None), cond, guidance_scale)

    def capture_attention(self, z: np.ndarray, t: int, text: TextCondition) -> AttentionPriorSet:
        maps = {}
        for site in self._sites:
            tokens, h, w = self._queries(z, site)
            for key in site.keys():
                wq, wk, _ = self._weights[key]
                scores = attention_scores(tokens @ wq, text.tokens @ wk)
                maps[key] = AttentionMap(scores, h, w, key, site.downsample_factor)
        return AttentionPriorSet(maps, t)


class OracleDenoiser:
    """Predicts the noise that makes the clean estimate equal ``target``.

    With ``spread > 0`` the clean estimate is instead the exact posterior
    mean for data distributed as N(target, spread^2 I), which keeps part of
    whatever the current latent carries beyond the target.
    """

    concurrent_safe = True
    native_region_size = None

    def __init__(self, target: np.ndarray, schedule: Optional[NoiseSchedule] = None, spread: float = 0.0):
        self.target = np.asarray(target, dtype=np.float64)
        self.schedule = schedule or build_schedule()
        self.spread = spread
        self.calls = 0
        self.capture_calls = 0
        self._lock = threading.Lock()

    def site_registry(self) -> list[SiteInfo]:
        return []

    def predict_noise(
        self,
        z: np.ndarray,
        t: int,
        text: Optional[TextCondition] = None,
        *,
        region: Optional[RegionSpec] = None,
        attention: Optional[AttentionControl] = None,
        guidance_scale: float = 1.0,
    ) -> np.ndarray:
        if t < 1:
            raise ValueError("oracle denoiser needs t >= 1")
        with self._lock:
            self.calls += 1
        target = self.target
        if region is not None:
            target = target[..., region.top:region.bottom, region.left:region.right]
        if target.shape != z.shape:
            raise ValueError(f"latent shape {z.shape} does not match oracle target {target.shape}")
        ab = self.schedule.alpha_bar(t)
        if self.spread:
            var = self.spread**2
            gain = var * math.sqrt(ab) / (var * ab + 1.0 - ab)
            target = target + gain * (z - math.sqrt(ab) * target)
        return (z - math.sqrt(ab) * target) / math.sqrt(1.0 - ab)

    def capture_attention(self, z: np.ndarray, t: int, text: TextCondition) -> AttentionPriorSet:
        with self._lock:
            self.capture_calls += 1
        return AttentionPriorSet({}, t)


class MockCodec:
    """8x8 average-pool encoder and nearest-neighbour decoder on grey levels.

    Images are float arrays (H, W, 3); latents are (4, H/8, W/8). Exact only
    on grey images that are constant over 8x8 blocks.
    """

    channels = 4
    scale = 8

    def encode(self, image: np.ndarray) -> np.ndarray:
        h, w = image.shape[:2]
        if h % 8 or w % 8:
            raise ValueError(f"image dims {h}x{w} not divisible by 8")
        grey = image if image.ndim == 3 else image[..., None]
        # extended-precision mean keeps constant blocks exact
        blocks = grey.astype(np.longdouble).reshape(h // 8, 8, w // 8, 8, -1)
        pooled = blocks.mean(axis=(1, 3, 4)).astype(np.float64)
        return np.repeat(pooled[None], self.channels, axis=0)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        grey = np.repeat(np.repeat(latent[0], 8, axis=0), 8, axis=1)
        return np.repeat(grey[..., None], 3, axis=2)


class MockCaptioner:
    """Describes a crop by its tone; ``fn`` overrides the text entirely."""

    def __init__(self, model_id: str = "mock-captioner", fn: Optional[Callable[[np.ndarray, str], str]] = None):
        self.model_id = model_id
        self.fn = fn
        self.calls = 0
        self._lock = threading.Lock()

    def describe(self, image: np.ndarray, instruction: str) -> str:
        with self._lock:
            self.calls += 1
        if self.fn is not None:
            return self.fn(image, instruction)
        m = re.search(r"full image (.*), describe the following", instruction, re.S)
        subject = m.group(1) if m else "the scene"
        level = float(np.mean(image))
        tone = "dark" if level < 0.33 else "bright" if level > 0.66 else "mid-tone"
        return f"a detailed {tone} close-up, part of {subject}"
