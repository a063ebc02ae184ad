"""Per-region descriptive prompts from a multimodal captioner, with a
persistent write-through cache."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from .tiling import Partition

log = logging.getLogger(__name__)

IMAGE_SLOT = "<regional image>"
MAX_PROMPT_TOKENS = 77


@dataclass(frozen=True)
class RegionalPrompt:
    region_index: int
    text: str
    source: str  # "mllm", "cache" or "fallback"


def build_instruction(global_prompt: str, image_slot: str = IMAGE_SLOT) -> str:
    if not global_prompt:
        raise ValueError("global prompt must be non-empty")
    return (
        "Given the description of a full image " + global_prompt
        + ", describe the following image " + image_slot
        + ", which is part of the full image."
    )


def cache_key(region_image: np.ndarray, global_prompt: str, model_id: str) -> str:
    a = np.ascontiguousarray(region_image, dtype=np.float64)
    h = hashlib.sha256()
    h.update(repr(a.shape).encode())
    h.update(a.tobytes())
    h.update(b"\0" + global_prompt.encode("utf-8"))
    h.update(b"\0" + model_id.encode("utf-8"))
    return h.hexdigest()


class PromptCache:
    """Caption store; with a ``path`` every new entry is appended as one JSON line.

    Lines look like ``{"key": ..., "model": ..., "text": ..., "created_at": ...}``.
    Unreadable lines are skipped with a warning.
    """

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self._entries: dict[str, str] = {}
        self._lock = threading.Lock()
        if path and os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    try:
                        rec = json.loads(line)
                        self._entries[rec["key"]] = rec["text"]
                    except (ValueError, KeyError, TypeError):
                        log.warning("skipping malformed cache line %d in %s", lineno, path)

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: str) -> Optional[str]:
        with self._lock:
            return self._entries.get(key)

    def put(self, key: str, text: str, model_id: str) -> None:
        with self._lock:
            self._entries[key] = text
            if self.path:
                rec = {"key": key, "model": model_id, "text": text, "created_at": time.time()}
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


_SENTENCE_END = re.compile(r"[.!?](?=\s|$)")


def truncate_prompt(text: str, max_tokens: int = MAX_PROMPT_TOKENS, count: Optional[Callable[[str], int]] = None) -> str:
    """Trim ``text`` to fit the conditioner's token budget.

    Prefers cutting after the last complete sentence that fits; falls back
    to a word cut.
    """
    count = count or (lambda s: len(s.split()) + 2)
    text = text.strip()
    if count(text) <= max_tokens:
        return text
    words = text.split()
    lo, hi = 0, len(words)
    while lo < hi:  # longest word prefix that fits
        mid = (lo + hi + 1) // 2
        if count(" ".join(words[:mid])) <= max_tokens:
            lo = mid
        else:
            hi = mid - 1
    cut = " ".join(words[:lo])
    ends = [m.end() for m in _SENTENCE_END.finditer(cut)]
    if ends:
        return cut[: ends[-1]]
    return cut


def caption_region(
    captioner,
    region_image: np.ndarray,
    global_prompt: str,
    region_index: int = 0,
    cache: Optional[PromptCache] = None,
    *,
    retries: int = 3,
    backoff: float = 0.5,
    max_tokens: int = MAX_PROMPT_TOKENS,
    count_tokens: Optional[Callable[[str], int]] = None,
) -> RegionalPrompt:
    """Describe one region; degrade to the global prompt if the captioner keeps failing."""
    if min(region_image.shape[:2]) < 8:
        raise ValueError(f"region image {region_image.shape[:2]} is smaller than 8 pixels")
    key = cache_key(region_image, global_prompt, captioner.model_id)
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            return RegionalPrompt(region_index, hit, "cache")
    instruction = build_instruction(global_prompt)
    for attempt in range(retries):
        try:
            text = truncate_prompt(captioner.describe(region_image, instruction), max_tokens, count_tokens)
        except Exception as exc:  # any captioner fault counts against the retry budget
            log.debug("captioner attempt %d for region %d failed: %s", attempt + 1, region_index, exc)
            if attempt + 1 < retries and backoff > 0:
                time.sleep(backoff * 2**attempt)
            continue
        if text:
            if cache is not None:
                cache.put(key, text, captioner.model_id)
            return RegionalPrompt(region_index, text, "mllm")
    log.warning("captioner failed %d times on region %d; using the global prompt", retries, region_index)
    return RegionalPrompt(region_index, global_prompt, "fallback")


def caption_all(
    captioner,
    image: np.ndarray,
    partition: Partition,
    global_prompt: str,
    cache: Optional[PromptCache] = None,
    *,
    pixel_scale: int = 8,
    max_workers: int = 4,
    **kwargs,
) -> list[RegionalPrompt]:
    """Caption every region of ``partition`` (latent units) on the target-size ``image``."""
    def one(spec):
        s = pixel_scale
        crop = image[spec.top * s:spec.bottom * s, spec.left * s:spec.right * s]
        return caption_region(captioner, crop, global_prompt, spec.index, cache, **kwargs)

    if max_workers <= 1:
        return [one(spec) for spec in partition.regions]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(one, partition.regions))


def prompt_records(prompts: list[RegionalPrompt]) -> list[dict]:
    return [asdict(p) for p in prompts]
