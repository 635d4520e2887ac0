import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from promptcodec.core import SketchMap
from promptcodec.decoder import (
    ENDPOINT_ENV,
    Backend,
    HttpBackend,
    MockBackend,
    make_backend,
    png_array,
    png_bytes,
    reconstruct_pic,
    reconstruct_pics,
    resize_array,
    serve_backend,
    sketch_correlation,
)
from promptcodec.errors import BackendError, BackendTimeoutError, CapabilityError, ConfigError
from promptcodec.sketch.synthetic import synthetic_sketches


def test_mock_deterministic_and_text_sensitive():
    b = MockBackend()
    a1 = reconstruct_pic("desert brick dwelling", 3, b, 40, 30)
    a2 = reconstruct_pic("desert brick dwelling", 3, b, 40, 30)
    assert np.array_equal(a1.data, a2.data)
    assert a1.data.shape == (30, 40, 3)
    assert not np.array_equal(a1.data, reconstruct_pic("villa", 3, b, 40, 30).data)
    assert not np.array_equal(a1.data, reconstruct_pic("desert brick dwelling", 4, b, 40, 30).data)


def test_empty_text_is_fine():
    img = reconstruct_pic("", 0, MockBackend(), 16, 16)
    assert img.data.shape == (16, 16, 3)


def test_zero_sketch_gives_scaled_noise_field():
    b = MockBackend()
    pic = b.generate("abc", 1, 32, 24)
    pics = b.generate("abc", 1, 32, 24, sketch=SketchMap(np.zeros((24, 32))))
    assert np.allclose(pics, 0.3 * pic)


def test_sketch_correlation_over_many_sketches(rng):
    b = MockBackend()
    sketches = synthetic_sketches(50, 48, 64, seed=9) + [SketchMap(rng.uniform(0, 1, (48, 64))) for _ in range(50)]
    for i, s in enumerate(sketches):
        img = reconstruct_pics(f"p{i}", s, i, b, 64, 48)
        assert sketch_correlation(img, s) > 0.5


def test_fixed_resolution_backend_is_resized():
    b = MockBackend(resolution=32)
    img = reconstruct_pics("x", SketchMap(np.eye(20)), 0, b, 100, 70)
    assert img.data.shape == (70, 100, 3)


def test_capability_error_for_text_only_backend():
    class TextOnly(Backend):
        def generate(self, text, seed, width, height, sketch=None):
            return np.zeros((height, width, 3))

    with pytest.raises(CapabilityError):
        reconstruct_pics("x", SketchMap(np.zeros((8, 8))), 0, TextOnly(), 8, 8)


def test_invalid_backend_output_is_backend_error():
    class Bad(Backend):
        def generate(self, text, seed, width, height, sketch=None):
            return np.full((height, width, 3), np.nan)

    with pytest.raises(BackendError):
        reconstruct_pic("x", 0, Bad(), 8, 8)


def test_resize_and_png_helpers(rng):
    arr = rng.uniform(0, 1, (10, 12, 3))
    assert resize_array(arr, 10, 12) is not arr
    out = resize_array(arr, 20, 7)
    assert out.shape == (20, 7, 3) and out.min() >= 0 and out.max() <= 1
    back = png_array(png_bytes(arr))
    assert np.abs(back - arr).max() <= 0.5 / 255 + 1e-12


def test_make_backend(monkeypatch):
    assert isinstance(make_backend("mock"), MockBackend)
    monkeypatch.delenv(ENDPOINT_ENV, raising=False)
    with pytest.raises(ConfigError):
        make_backend("text")
    monkeypatch.setenv(ENDPOINT_ENV, "http://127.0.0.1:1/")
    b = make_backend("text+sketch")
    assert b.accepts_sketch and b.endpoint == "http://127.0.0.1:1/"
    with pytest.raises(ConfigError):
        make_backend("dall-e")


@pytest.fixture
def mock_server():
    server = serve_backend(MockBackend())
    yield f"http://127.0.0.1:{server.server_address[1]}/"
    server.shutdown()


def test_http_roundtrip_matches_in_process(mock_server):
    remote = HttpBackend(mock_server, accepts_sketch=True)
    sketch = SketchMap(synthetic_sketches(1, 24, 32, seed=0)[0].data)
    got = reconstruct_pics("hello", sketch, 5, remote, 32, 24).data
    # the sketch and the result each pass through 8-bit PNG on the wire
    quantized = SketchMap(png_array(png_bytes(sketch.data))[..., 0])
    want = png_array(png_bytes(MockBackend().generate("hello", 5, 32, 24, sketch=quantized)))
    assert np.array_equal(got, want)
    assert reconstruct_pic("hello", 5, HttpBackend(mock_server), 32, 24).data.shape == (24, 32, 3)


def _serve(handler_cls):
    server = ThreadingHTTPServer(("127.0.0.1", 0), handler_cls)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server, f"http://127.0.0.1:{server.server_address[1]}/"


def test_http_retries_then_fails_on_5xx():
    calls = []

    class H(BaseHTTPRequestHandler):
        def do_POST(self):
            calls.append(1)
            self.rfile.read(int(self.headers["Content-Length"]))
            self.send_error(503)

        def log_message(self, *a):
            pass

    server, url = _serve(H)
    try:
        with pytest.raises(BackendError):
            HttpBackend(url, retries=2, backoff=0.01).generate("x", 0, 8, 8)
        assert len(calls) == 3
    finally:
        server.shutdown()


def test_http_4xx_is_not_retried():
    calls = []

    class H(BaseHTTPRequestHandler):
        def do_POST(self):
            calls.append(1)
            self.rfile.read(int(self.headers["Content-Length"]))
            self.send_error(400)

        def log_message(self, *a):
            pass

    server, url = _serve(H)
    try:
        with pytest.raises(BackendError):
            HttpBackend(url, retries=3, backoff=0.01).generate("x", 0, 8, 8)
        assert len(calls) == 1
    finally:
        server.shutdown()


def test_http_timeout():
    class H(BaseHTTPRequestHandler):
        def do_POST(self):
            time.sleep(1.0)

        def log_message(self, *a):
            pass

    server, url = _serve(H)
    try:
        with pytest.raises(BackendTimeoutError):
            HttpBackend(url, timeout=0.2, retries=0).generate("x", 0, 8, 8)
    finally:
        server.shutdown()


def test_http_unreachable():
    with pytest.raises(BackendError):
        HttpBackend("http://127.0.0.1:9/", retries=1, backoff=0.01, timeout=2).generate("x", 0, 8, 8)


def test_in_flight_limit_respected():
    active, peak = [0], [0]
    lock = threading.Lock()

    class Slow(MockBackend):
        def generate(self, *a, **k):
            with lock:
                active[0] += 1
                peak[0] = max(peak[0], active[0])
            time.sleep(0.05)
            with lock:
                active[0] -= 1
            return super().generate(*a, **k)

    server = serve_backend(Slow())
    url = f"http://127.0.0.1:{server.server_address[1]}/"
    client = HttpBackend(url, max_in_flight=2)
    try:
        threads = [threading.Thread(target=client.generate, args=("t", i, 8, 8)) for i in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert 1 <= peak[0] <= 2
    finally:
        server.shutdown()
