"""Differentiable multi-scale structural similarity.

Gaussian window 11 / sigma 1.5 applied with 'valid' support, constants
K1 = 0.01, K2 = 0.03, dyadic 2x2-mean downsampling (the last row/column is
replicated for odd sizes) and the standard five per-scale exponents.
Inputs too small for five scales use fewer; the exponents of the scales in use
are renormalised to sum to one.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ShapeError

WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WIN_SIZE = 11
WIN_SIGMA = 1.5
K1, K2 = 0.01, 0.03
_FLOOR = 1e-8


def scale_count(height: int, width: int, win_size: int = WIN_SIZE, max_scales: int = len(WEIGHTS)) -> int:
    """Largest number of scales whose coarsest level still fits the window."""
    n = 0
    side = min(height, width)
    while n < max_scales and side >= win_size:
        n += 1
        side = (side + 1) // 2
    return max(n, 1)


def _gauss_window(size: int, sigma: float, dtype) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - size // 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    x = F.conv2d(x, win.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    return F.conv2d(x, win.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)


def _ssim_cs(x, y, win, data_range):
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_x, mu_y = _filter(x, win), _filter(y, win)
    sxx = _filter(x * x, win) - mu_x**2
    syy = _filter(y * y, win) - mu_y**2
    sxy = _filter(x * y, win) - mu_x * mu_y
    cs_map = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)
    return (lum * cs_map).flatten(1).mean(1), cs_map.flatten(1).mean(1)


def _downsample(x: torch.Tensor) -> torch.Tensor:
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        x = F.pad(x, (0, w % 2, 0, h % 2), mode="replicate")
    return F.avg_pool2d(x, 2)


def ms_ssim_torch(x: torch.Tensor, y: torch.Tensor, data_range: float = 1.0, scales: int | None = None) -> torch.Tensor:
    """Per-sample MS-SSIM of two ``(B, C, H, W)`` batches; returns shape ``(B,)``."""
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.ndim != 4:
        raise ShapeError("expected (B, C, H, W) tensors")
    h, w = x.shape[-2:]
    win_size = WIN_SIZE
    if min(h, w) < WIN_SIZE:
        win_size = min(h, w) if min(h, w) % 2 else min(h, w) - 1
    levels = scales or scale_count(h, w, win_size)
    weights = torch.tensor(WEIGHTS[:levels], dtype=x.dtype)
    weights = weights / weights.sum()
    win = _gauss_window(win_size, WIN_SIGMA, x.dtype)

    factors = []
    for i in range(levels):
        ssim, cs = _ssim_cs(x, y, win, data_range)
        if i < levels - 1:
            factors.append(cs.clamp_min(_FLOOR))
            x, y = _downsample(x), _downsample(y)
    factors.append(ssim.clamp_min(_FLOOR))
    stacked = torch.stack(factors, dim=0)
    return torch.prod(stacked ** weights[:, None], dim=0)


def ms_ssim(a, b, data_range: float = 1.0) -> float:
    """MS-SSIM of two maps (H x W) or images (H x W x C) given as arrays."""
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")

    def to_t(arr):
        t = torch.from_numpy(arr)
        return t[None, None] if t.ndim == 2 else t.permute(2, 0, 1)[None]

    return float(ms_ssim_torch(to_t(a), to_t(b), data_range)[0])
