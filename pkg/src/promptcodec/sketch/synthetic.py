"""Seeded synthetic scenes (flat-shaded shapes) and their edge sketches."""
from __future__ import annotations

import numpy as np

from ..core import Image, SketchMap
from .edges import GradientEdgeDetector


def random_scene(rng: np.random.Generator, height: int = 128, width: int = 128, shapes: tuple[int, int] = (2, 6)) -> Image:
    yy, xx = np.mgrid[0:height, 0:width]
    base = rng.uniform(0.1, 0.9, 3)
    tilt = rng.uniform(-0.15, 0.15, 3)
    img = base[None, None] + tilt[None, None] * (yy / height)[..., None]
    for _ in range(int(rng.integers(shapes[0], shapes[1] + 1))):
        color = rng.uniform(0, 1, 3)
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        ry = rng.uniform(0.08, 0.35) * height
        rx = rng.uniform(0.08, 0.35) * width
        kind = rng.integers(3)
        if kind == 0:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        elif kind == 1:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            # half-plane stripe
            angle = rng.uniform(0, np.pi)
            d = (yy - cy) * np.cos(angle) + (xx - cx) * np.sin(angle)
            mask = np.abs(d) <= ry / 3
        img[mask] = color
    return Image(np.clip(img, 0.0, 1.0))


def synthetic_images(n: int, height: int = 128, width: int = 128, seed: int = 0) -> list[Image]:
    rng = np.random.default_rng(seed)
    return [random_scene(rng, height, width) for _ in range(n)]


def synthetic_sketches(n: int, height: int = 128, width: int = 128, seed: int = 0) -> list[SketchMap]:
    detector = GradientEdgeDetector()
    return [detector(img) for img in synthetic_images(n, height, width, seed)]
