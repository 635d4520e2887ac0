"""Image reconstruction from a decoded prompt and optional sketch.

Backends synthesize an image at their native resolution; the result is resized
to the dimensions recorded in the container.  Remote backends speak a small
JSON-over-HTTP protocol::

    POST <endpoint>
    {"text": str, "seed": int, "steps": int, "guidance": float,
     "width": int, "height": int, "sketch": <base64 PNG, optional>}
    -> 200, body = PNG image

Any service implementing that request can host a real text-to-image or
sketch-conditioned model; :func:`serve_backend` exposes an in-process backend
the same way.
"""
from __future__ import annotations

import base64
import io
import json
import logging
import os
import socket
import threading
import time
import urllib.error
import urllib.request
import zlib
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .core import Image, SketchMap
from .errors import BackendError, BackendTimeoutError, CapabilityError, ConfigError

log = logging.getLogger(__name__)

ENDPOINT_ENV = "PROMPTCODEC_BACKEND_URL"
DEFAULT_STEPS = 50
DEFAULT_GUIDANCE = 9.0


def resize_array(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bicubic resize of an H x W or H x W x C float array (values clipped to [0, 1])."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape[:2] == (height, width):
        return arr.copy()
    chans = [arr] if arr.ndim == 2 else [arr[..., c] for c in range(arr.shape[2])]
    out = [
        np.asarray(PILImage.fromarray(c.astype(np.float32), mode="F").resize((width, height), PILImage.BICUBIC))
        for c in chans
    ]
    res = out[0] if arr.ndim == 2 else np.stack(out, axis=-1)
    return np.clip(res.astype(np.float64), 0.0, 1.0)


def png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    PILImage.fromarray(np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def png_array(data: bytes) -> np.ndarray:
    with PILImage.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


class Backend:
    """Text-to-image generator.  ``generate`` returns an H x W x 3 array in [0, 1]."""

    kind = "text"
    accepts_sketch = False
    deterministic = True
    steps = DEFAULT_STEPS
    guidance = DEFAULT_GUIDANCE

    def generate(self, text: str, seed: int, width: int, height: int,
                 sketch: Optional[SketchMap] = None) -> np.ndarray:
        raise NotImplementedError


class MockBackend(Backend):
    """Deterministic stand-in for a diffusion model.

    Luminance is ``0.7 * sketch + 0.3 * noise`` when a sketch is supplied and
    plain value noise otherwise; the noise field and a colour tint are seeded
    by ``(seed, crc32(text))``.  With ``resolution`` set, it renders at that
    square size and the caller resizes, like a fixed-resolution model.
    """

    kind = "mock"
    accepts_sketch = True

    def __init__(self, resolution: Optional[int] = None, noise_grid: int = 8):
        self.resolution = resolution
        self.noise_grid = noise_grid

    def generate(self, text, seed, width, height, sketch=None):
        h = w = self.resolution
        if self.resolution is None:
            h, w = height, width
        rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(text.encode("utf-8"))])
        tint = rng.uniform(0.6, 1.0, 3)
        coarse = rng.uniform(0.0, 1.0, (self.noise_grid, self.noise_grid))
        noise = np.clip(ndimage.zoom(coarse, (h / self.noise_grid, w / self.noise_grid), order=1, mode="nearest", grid_mode=True), 0, 1)
        if sketch is None:
            lum = noise
        else:
            lum = 0.7 * resize_array(sketch.data, h, w) + 0.3 * noise
        return np.clip(lum[..., None] * tint[None, None], 0.0, 1.0)


class HttpBackend(Backend):
    """Client for a model served over the JSON/PNG protocol."""

    def __init__(self, endpoint: Optional[str] = None, accepts_sketch: bool = False, timeout: float = 600.0,
                 retries: int = 2, backoff: float = 0.5, max_in_flight: int = 4,
                 steps: int = DEFAULT_STEPS, guidance: float = DEFAULT_GUIDANCE):
        endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        if not endpoint:
            raise ConfigError(f"no backend endpoint given and ${ENDPOINT_ENV} is unset")
        self.endpoint = endpoint
        self.accepts_sketch = accepts_sketch
        self.kind = "text+sketch" if accepts_sketch else "text"
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.steps = steps
        self.guidance = guidance
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def _post(self, body: bytes) -> bytes:
        req = urllib.request.Request(self.endpoint, data=body, headers={"Content-Type": "application/json"})
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return resp.read()

    def generate(self, text, seed, width, height, sketch=None):
        payload = {"text": text, "seed": int(seed), "steps": self.steps, "guidance": self.guidance,
                   "width": width, "height": height}
        if sketch is not None:
            payload["sketch"] = base64.b64encode(png_bytes(sketch.data)).decode("ascii")
        body = json.dumps(payload).encode()
        last: Exception | None = None
        with self._slots:
            for attempt in range(self.retries + 1):
                try:
                    return png_array(self._post(body))
                except (socket.timeout, TimeoutError) as exc:
                    raise BackendTimeoutError(f"backend at {self.endpoint} timed out after {self.timeout}s") from exc
                except urllib.error.HTTPError as exc:
                    if exc.code < 500:
                        raise BackendError(f"backend rejected request: HTTP {exc.code}") from exc
                    last = exc
                except (urllib.error.URLError, ConnectionError, OSError) as exc:
                    if isinstance(getattr(exc, "reason", None), (socket.timeout, TimeoutError)):
                        raise BackendTimeoutError(f"backend at {self.endpoint} timed out") from exc
                    last = exc
                except (ValueError, PILImage.UnidentifiedImageError) as exc:
                    raise BackendError(f"backend returned an unreadable image: {exc}") from exc
                if attempt < self.retries:
                    time.sleep(self.backoff * 2**attempt)
        raise BackendError(f"backend at {self.endpoint} unreachable after {self.retries + 1} attempts: {last}")


def make_backend(name: str, endpoint: Optional[str] = None, **kwargs) -> Backend:
    name = name.lower()
    if name == "mock":
        return MockBackend(**kwargs)
    if name == "text":
        return HttpBackend(endpoint, accepts_sketch=False, **kwargs)
    if name in ("text+sketch", "text-sketch", "sketch"):
        return HttpBackend(endpoint, accepts_sketch=True, **kwargs)
    raise ConfigError(f"unknown backend {name!r}; expected mock, text or text+sketch")


def _finish(arr: np.ndarray, width: int, height: int) -> Image:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3 or not np.all(np.isfinite(arr)):
        raise BackendError(f"backend produced an invalid image of shape {arr.shape}")
    return Image(resize_array(np.clip(arr, 0, 1), height, width))


def reconstruct_pic(text: str, seed: int, backend: Backend, width: int, height: int) -> Image:
    return _finish(backend.generate(text, seed, width, height), width, height)


def reconstruct_pics(text: str, sketch: SketchMap, seed: int, backend: Backend, width: int, height: int) -> Image:
    if not backend.accepts_sketch:
        raise CapabilityError(f"backend {backend.kind!r} cannot condition on a sketch")
    return _finish(backend.generate(text, seed, width, height, sketch=sketch), width, height)


def sketch_correlation(image: Image, sketch: SketchMap) -> float:
    """Pearson correlation between the image luminance and the sketch (resized to match)."""
    lum = image.luminance().ravel()
    sk = resize_array(sketch.data, image.height, image.width).ravel()
    if lum.std() == 0 or sk.std() == 0:
        return 0.0
    return float(np.corrcoef(lum, sk)[0, 1])


class _Handler(BaseHTTPRequestHandler):
    backend: Backend

    def do_POST(self):  # noqa: N802
        try:
            req = json.loads(self.rfile.read(int(self.headers.get("Content-Length", 0))))
            sketch = None
            if req.get("sketch"):
                with PILImage.open(io.BytesIO(base64.b64decode(req["sketch"]))) as im:
                    sketch = SketchMap(np.asarray(im.convert("L"), dtype=np.float64) / 255.0)
            arr = self.backend.generate(req.get("text", ""), int(req.get("seed", 0)),
                                        int(req["width"]), int(req["height"]), sketch=sketch)
            body = png_bytes(arr)
        except Exception as exc:  # noqa: BLE001
            log.exception("backend request failed")
            self.send_error(500, str(exc))
            return
        self.send_response(200)
        self.send_header("Content-Type", "image/png")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, fmt, *args):
        log.debug(fmt, *args)


def serve_backend(backend: Backend, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Start serving ``backend`` on a daemon thread; returns the server (``.server_address`` has the port)."""
    handler = type("BackendHandler", (_Handler,), {"backend": backend})
    server = ThreadingHTTPServer((host, port), handler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server
