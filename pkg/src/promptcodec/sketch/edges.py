"""Edge-map sketches: a Sobel fallback and a Holistically-nested Edge Detector."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from ..core import Image, SketchMap
from ..errors import BackendError

log = logging.getLogger(__name__)


def gradient_magnitude(lum: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude scaled so a unit step edge reaches 1.

    Borders replicate the nearest pixel, so constant regions (including the
    image border) respond with exactly zero.
    """
    gx = ndimage.sobel(lum, axis=1, mode="nearest")
    gy = ndimage.sobel(lum, axis=0, mode="nearest")
    # the unnormalised Sobel kernel responds with 4 to a unit step
    return np.clip(np.hypot(gx, gy) / 4.0, 0.0, 1.0)


class EdgeDetector:
    name = "base"

    def __call__(self, image: Image) -> SketchMap:
        raise NotImplementedError


class GradientEdgeDetector(EdgeDetector):
    """Fixed 3x3 Sobel magnitude on luminance, rescaled so the strongest edge is 1.

    The per-image rescale makes the map contrast-invariant like a learned edge
    probability map; a constant image stays all zero.
    """

    name = "fallback-gradient"

    def __call__(self, image: Image) -> SketchMap:
        g = gradient_magnitude(image.luminance())
        peak = g.max()
        return SketchMap(g / peak if peak > 0 else g)


def _vgg_block(cin: int, cout: int, n: int, pool: bool) -> nn.Sequential:
    layers: list[nn.Module] = [nn.MaxPool2d(2, 2)] if pool else []
    for i in range(n):
        layers += [nn.Conv2d(cin if i == 0 else cout, cout, 3, padding=1), nn.ReLU(inplace=False)]
    return nn.Sequential(*layers)


class HedNetwork(nn.Module):
    """VGG-16 trunk with five sigmoid side outputs fused by a 1x1 convolution.

    Attribute names follow the widely distributed BSDS500 port so that its
    state dict loads directly (``moduleX`` keys are renamed to ``netX``).
    """

    def __init__(self):
        super().__init__()
        self.netVggOne = _vgg_block(3, 64, 2, pool=False)
        self.netVggTwo = _vgg_block(64, 128, 2, pool=True)
        self.netVggThr = _vgg_block(128, 256, 3, pool=True)
        self.netVggFou = _vgg_block(256, 512, 3, pool=True)
        self.netVggFiv = _vgg_block(512, 512, 3, pool=True)
        self.netScoreOne = nn.Conv2d(64, 1, 1)
        self.netScoreTwo = nn.Conv2d(128, 1, 1)
        self.netScoreThr = nn.Conv2d(256, 1, 1)
        self.netScoreFou = nn.Conv2d(512, 1, 1)
        self.netScoreFiv = nn.Conv2d(512, 1, 1)
        self.netCombine = nn.Sequential(nn.Conv2d(5, 1, 1), nn.Sigmoid())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, 3, H, W) in [0, 1]; the BSDS weights expect mean-subtracted BGR in [0, 255]
        bgr = x.flip(1) * 255.0 - torch.tensor([104.00698793, 116.66876762, 122.67891434], dtype=x.dtype).view(1, 3, 1, 1)
        h, w = x.shape[-2:]
        feats = []
        out = bgr
        for vgg, score in (
            (self.netVggOne, self.netScoreOne),
            (self.netVggTwo, self.netScoreTwo),
            (self.netVggThr, self.netScoreThr),
            (self.netVggFou, self.netScoreFou),
            (self.netVggFiv, self.netScoreFiv),
        ):
            out = vgg(out)
            feats.append(F.interpolate(score(out), size=(h, w), mode="bilinear", align_corners=False))
        return self.netCombine(torch.cat(feats, 1))


class HedDetector(EdgeDetector):
    name = "HED"

    def __init__(self, weights: Optional[str | Path] = None, network: Optional[HedNetwork] = None):
        if network is None:
            if weights is None:
                raise BackendError("HED detector needs a weights file")
            network = HedNetwork()
            try:
                state = torch.load(str(weights), map_location="cpu", weights_only=True)
            except Exception as exc:  # noqa: BLE001
                raise BackendError(f"cannot read HED weights {weights}: {exc}") from exc
            state = {k.replace("module", "net"): v for k, v in state.items()}
            try:
                network.load_state_dict(state)
            except RuntimeError as exc:
                raise BackendError(f"HED weights do not match the network: {exc}") from exc
        self.network = network.eval()

    @torch.no_grad()
    def __call__(self, image: Image) -> SketchMap:
        x = torch.from_numpy(image.data).permute(2, 0, 1)[None].float()
        edges = self.network(x)[0, 0].double().clamp(0, 1).numpy()
        return SketchMap(edges)


def extract_sketch(image: Image, detector: Optional[EdgeDetector] = None) -> SketchMap:
    """Edge map of ``image`` at its native resolution (Sobel fallback by default)."""
    detector = detector or GradientEdgeDetector()
    try:
        return detector(image)
    except BackendError:
        raise
    except Exception as exc:  # noqa: BLE001
        raise BackendError(f"edge detector {detector.name} failed: {exc}") from exc
