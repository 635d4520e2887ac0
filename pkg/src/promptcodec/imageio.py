"""PNG/JPEG reading and writing through Pillow."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .core import Image

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}


def load_image(path: str | Path) -> Image:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return Image(arr)


def load_gray(path: str | Path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def to_uint8(data: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(data) * 255.0), 0, 255).astype(np.uint8)


def save_image(image: Image | np.ndarray, path: str | Path) -> None:
    data = image.data if isinstance(image, Image) else np.asarray(image)
    PILImage.fromarray(to_uint8(data)).save(path)


def save_gray(data: np.ndarray, path: str | Path) -> None:
    PILImage.fromarray(to_uint8(data), mode="L").save(path)


def list_images(directory: str | Path) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
