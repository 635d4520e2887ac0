import numpy as np
import pytest

from promptcodec.core import Image
from promptcodec.pipeline import CodecSettings
from promptcodec.prompt_inversion import PiConfig
from promptcodec.sketch.ntc import NtcTrainConfig, train_ntc
from promptcodec.sketch.synthetic import synthetic_images, synthetic_sketches

SMALL_MODEL_SKETCHES = 48
_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion, then assert it."""
    lines = request.config.stash[_ACCEPTANCE]

    def record(name: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


@pytest.fixture(scope="session")
def small_model():
    """A sketch codec trained in a few seconds; it keeps enough edge structure for end-to-end checks."""
    sketches = synthetic_sketches(SMALL_MODEL_SKETCHES, 64, 64, seed=11)
    cfg = NtcTrainConfig(lambdas=[4.0], epochs=30, batch_size=8, seed=0, hidden=16, crop_size=64)
    return train_ntc(cfg, sketches)


@pytest.fixture(scope="session")
def fast_settings(small_model):
    """Offline codec settings with a short inversion schedule."""
    return CodecSettings.toy(pi=PiConfig(step_count=15, restart_count=2), sketch_model=small_model)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def scenes():
    return synthetic_images(4, 64, 96, seed=5)


def random_image(rng, h=16, w=16) -> Image:
    return Image(rng.uniform(0, 1, (h, w, 3)))
