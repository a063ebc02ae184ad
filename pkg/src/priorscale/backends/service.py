"""HTTP clients for a remote diffusion backend and captioner, plus a small
reference server that exposes any in-process backend over the same wire.

Wire format: JSON bodies; arrays travel as ``{"shape", "dtype", "data"}``
with base64 little-endian bytes in ``data``.

Diffusion service endpoints::

    GET  /info     -> {"model", "native_region_size", "sites": [...], "alpha_bars": [...]}
    POST /predict  {"latent", "timestep", "prompt", "region"?, "attention"?} -> {"eps"}
    POST /capture  {"latent", "timestep", "prompt"} -> {"maps": [...]}
    POST /encode   {"image"} -> {"latent"}
    POST /decode   {"latent"} -> {"image"}

``attention`` is ``{"global_prompt", "priors": {site_key: array}}``; the
service averages regional-prompt and prior-score attended features at each
listed site. ``/predict`` always returns the raw conditional branch;
classifier-free guidance is applied client side.

Captioner endpoint: ``POST <url> {"model", "instruction", "image"}`` where
``image`` is a base64 PNG; the response is ``{"text"}``.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Optional

import httpx
import numpy as np
from PIL import Image

from ..attention import AttentionControl, AttentionMap, AttentionPriorSet
from ..errors import BackendError, CaptionerError
from ..scheduler import NoiseSchedule
from ..tiling import RegionSpec
from .base import SiteInfo, TextCondition, classifier_free_guidance

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 60.0


def pack_array(a: np.ndarray) -> dict[str, Any]:
    a = np.ascontiguousarray(a)
    return {
        "shape": list(a.shape),
        "dtype": a.dtype.newbyteorder("<").str,
        "data": base64.b64encode(a.astype(a.dtype.newbyteorder("<")).tobytes()).decode("ascii"),
    }


def unpack_array(d: dict[str, Any]) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=np.dtype(d["dtype"])).reshape(d["shape"]).astype(np.float64)


def image_to_png_b64(image: np.ndarray) -> str:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class _Client:
    def __init__(self, endpoint: str, timeout: float):
        self.endpoint = endpoint.rstrip("/")
        self._http = httpx.Client(timeout=timeout)

    def call(self, method: str, path: str, body: Optional[dict] = None) -> dict:
        try:
            r = self._http.request(method, self.endpoint + path, json=body)
            r.raise_for_status()
            return r.json()
        except (httpx.HTTPError, ValueError) as exc:
            raise BackendError(f"{method} {self.endpoint}{path} failed: {exc}") from exc

    def close(self) -> None:
        self._http.close()


class ServiceTextConditioner:
    """Remote services encode prompts themselves; only the text is carried."""

    def __init__(self, max_tokens: int = 77):
        self.max_tokens = max_tokens

    def count_tokens(self, text: str) -> int:
        return len(text.split()) + 2

    def encode(self, text: str) -> TextCondition:
        return TextCondition(text)


class DiffusionServiceDenoiser:
    """Denoiser backed by a remote latent-diffusion service.

    Classifier-free guidance runs here: the conditional request carries any
    attention control, the unconditional one uses the empty prompt and no
    control.
    """

    concurrent_safe = True

    def __init__(self, endpoint: str, timeout: float = DEFAULT_TIMEOUT):
        self._client = _Client(endpoint, timeout)
        try:
            info = self._client.call("GET", "/info")
        except BackendError as exc:
            raise BackendError(f"diffusion service at {endpoint} is unreachable: {exc}") from exc
        try:
            self.model = info.get("model", "unknown")
            self.native_region_size = info.get("native_region_size")
            self._sites = [SiteInfo(s["site_id"], int(s["downsample_factor"]), int(s["head_count"])) for s in info["sites"]]
            self.schedule = NoiseSchedule.from_alpha_bars(info["alpha_bars"])
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendError(f"diffusion service at {endpoint} returned an incompatible /info: {exc}") from exc

    def site_registry(self) -> list[SiteInfo]:
        return list(self._sites)

    def _predict(self, z, t, prompt, region, attention) -> np.ndarray:
        body: dict[str, Any] = {"latent": pack_array(z), "timestep": int(t), "prompt": prompt}
        if region is not None:
            body["region"] = [region.top, region.left, region.height, region.width]
        if attention is not None:
            body["attention"] = {
                "global_prompt": attention.global_text.text,
                "priors": {k: pack_array(v) for k, v in attention.priors.items()},
            }
        return unpack_array(self._client.call("POST", "/predict", body)["eps"])

    def predict_noise(
        self,
        z: np.ndarray,
        t: int,
        text: TextCondition,
        *,
        region: Optional[RegionSpec] = None,
        attention: Optional[AttentionControl] = None,
        guidance_scale: float = 7.5,
    ) -> np.ndarray:
        cond = self._predict(z, t, text.text, region, attention)
        if guidance_scale <= 1.0:
            return cond
        uncond = self._predict(z, t, "", region, None)
        return classifier_free_guidance(uncond, cond, guidance_scale)

    def capture_attention(self, z: np.ndarray, t: int, text: TextCondition) -> AttentionPriorSet:
        reply = self._client.call("POST", "/capture", {"latent": pack_array(z), "timestep": int(t), "prompt": text.text})
        maps = {}
        for m in reply["maps"]:
            maps[m["key"]] = AttentionMap(
                unpack_array(m["scores"]), int(m["spatial_height"]), int(m["spatial_width"]),
                m["key"], int(m["downsample_factor"]),
            )
        return AttentionPriorSet(maps, t)


class ServiceCodec:
    def __init__(self, endpoint: str, timeout: float = DEFAULT_TIMEOUT):
        self._client = _Client(endpoint, timeout)

    def encode(self, image: np.ndarray) -> np.ndarray:
        return unpack_array(self._client.call("POST", "/encode", {"image": pack_array(image)})["latent"])

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return unpack_array(self._client.call("POST", "/decode", {"latent": pack_array(latent)})["image"])


class HttpCaptioner:
    """Single-shot client; retries and fallback live in :mod:`regional_prompts`."""

    def __init__(self, url: str, model_id: str = "llava-v1.6", timeout: float = DEFAULT_TIMEOUT):
        self.url = url
        self.model_id = model_id
        self._http = httpx.Client(timeout=timeout)

    def describe(self, image: np.ndarray, instruction: str) -> str:
        body = {"model": self.model_id, "instruction": instruction, "image": image_to_png_b64(image)}
        try:
            r = self._http.post(self.url, json=body)
            r.raise_for_status()
            text = r.json()["text"]
        except (httpx.HTTPError, ValueError, KeyError, TypeError) as exc:
            raise CaptionerError(f"captioner at {self.url} failed: {exc}") from exc
        if not isinstance(text, str) or not text.strip():
            raise CaptionerError("captioner returned empty text")
        return text


def make_handler(denoiser, codec, text_encoder, model: str = "reference"):
    """Request handler class serving ``denoiser``/``codec`` over the wire format."""

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):
            log.debug(fmt, *args)

        def _reply(self, status: int, payload: dict) -> None:
            data = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            if self.path != "/info":
                return self._reply(404, {"error": f"unknown path {self.path}"})
            self._reply(200, {
                "model": model,
                "native_region_size": denoiser.native_region_size,
                "sites": [vars(s) for s in denoiser.site_registry()],
                "alpha_bars": denoiser.schedule.alpha_bars[1:].tolist(),
            })

        def do_POST(self):
            try:
                body = json.loads(self.rfile.read(int(self.headers.get("Content-Length", 0))))
                self._reply(200, self._dispatch(body))
            except Exception as exc:  # the service reports every failure to the client
                self._reply(500, {"error": str(exc)})

        def _dispatch(self, body: dict) -> dict:
            if self.path == "/predict":
                region = RegionSpec(0, *body["region"]) if body.get("region") else None
                attention = None
                if body.get("attention"):
                    a = body["attention"]
                    attention = AttentionControl(
                        {k: unpack_array(v) for k, v in a["priors"].items()},
                        text_encoder.encode(a["global_prompt"]),
                    )
                eps = denoiser.predict_noise(
                    unpack_array(body["latent"]), body["timestep"], text_encoder.encode(body["prompt"]),
                    region=region, attention=attention, guidance_scale=1.0,
                )
                return {"eps": pack_array(eps)}
            if self.path == "/capture":
                prior = denoiser.capture_attention(
                    unpack_array(body["latent"]), body["timestep"], text_encoder.encode(body["prompt"])
                )
                return {"maps": [
                    {"key": k, "scores": pack_array(m.scores), "spatial_height": m.spatial_height,
                     "spatial_width": m.spatial_width, "downsample_factor": m.downsample_factor}
                    for k, m in prior.maps.items()
                ]}
            if self.path == "/encode":
                return {"latent": pack_array(codec.encode(unpack_array(body["image"])))}
            if self.path == "/decode":
                return {"image": pack_array(codec.decode(unpack_array(body["latent"])))}
            raise ValueError(f"unknown path {self.path}")

    return Handler


def serve_backend(denoiser, codec, text_encoder, host: str = "127.0.0.1", port: int = 0, model: str = "reference"):
    """Start a threaded server in the background; returns ``(server, base_url)``."""
    server = ThreadingHTTPServer((host, port), make_handler(denoiser, codec, text_encoder, model))
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server, f"http://{server.server_address[0]}:{server.server_address[1]}"
