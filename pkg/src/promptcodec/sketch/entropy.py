"""Factorized entropy model for integer latents and its coding tables."""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import DecodeError
from .rangecoder import ArithmeticDecoder, ArithmeticEncoder

TABLE_PRECISION = 16
MAX_RADIUS = 64
SUPPORT_THRESHOLD = 1e-7
_MAX_GAMMA_BITS = 40
LIKELIHOOD_FLOOR = 1e-9


class FactorizedDensity(nn.Module):
    """Per-channel univariate density learned as a monotone CDF network.

    The cumulative is a small per-channel composition of positive linear maps
    with tanh-gated residuals; the likelihood of a value ``v`` is the CDF mass
    of ``[v - 1/2, v + 1/2]``, which makes it a density for ``y + U(-1/2, 1/2)``
    during training and an exact pmf over integers at inference.
    """

    def __init__(self, channels: int, filters: tuple[int, ...] = (3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        dims = (1, *filters, 1)
        scale = init_scale ** (1.0 / (len(dims) - 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(dims) - 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.rand(channels, dims[i + 1], 1) - 0.5))
            if i < len(dims) - 2:
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def logits_cdf(self, v: torch.Tensor) -> torch.Tensor:
        """``v``: ``(C, 1, N)`` -> logits of the CDF, same shape."""
        logits = v
        for i, (m, b) in enumerate(zip(self.matrices, self.biases)):
            logits = torch.matmul(F.softplus(m), logits) + b
            if i < len(self.factors):
                logits = logits + torch.tanh(self.factors[i]) * torch.tanh(logits)
        return logits

    def likelihood(self, y: torch.Tensor) -> torch.Tensor:
        """Mass of each unit bin centred on ``y`` (``(B, C, H, W)``)."""
        b, c, h, w = y.shape
        v = y.permute(1, 0, 2, 3).reshape(c, 1, -1)
        lower = self.logits_cdf(v - 0.5)
        upper = self.logits_cdf(v + 0.5)
        # evaluate in the tail where the sigmoid is least saturated
        sign = -torch.sign(lower + upper).detach()
        lik = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        lik = lik.clamp_min(LIKELIHOOD_FLOOR)
        return lik.reshape(c, b, h, w).permute(1, 0, 2, 3)

    @torch.no_grad()
    def integer_pmf(self, radius: int = MAX_RADIUS) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(pmf, cdf_edges)`` on integers ``-radius..radius`` per channel (float64)."""
        grid = torch.arange(-radius, radius + 2, dtype=torch.float32) - 0.5
        logits = self.logits_cdf(grid.view(1, 1, -1).expand(self.channels, 1, -1).contiguous())
        cdf = torch.sigmoid(logits[:, 0].double()).numpy()
        cdf = np.maximum.accumulate(cdf, axis=1)
        return np.diff(cdf, axis=1), cdf


def quantize_pmf(probs: np.ndarray, precision: int = TABLE_PRECISION) -> np.ndarray:
    """Integer frequencies summing to ``2**precision`` with every entry >= 1."""
    total = 1 << precision
    if len(probs) > total:
        raise ValueError("alphabet larger than the table precision allows")
    p = np.clip(np.asarray(probs, dtype=np.float64), 0.0, None)
    p = p / p.sum() if p.sum() > 0 else np.full(len(p), 1.0 / len(p))
    freq = np.maximum(1, np.floor(p * total + 0.5)).astype(np.int64)
    diff = total - int(freq.sum())
    order = np.argsort(-freq, kind="stable")
    k = 0
    while diff != 0:
        i = order[k % len(order)]
        if diff > 0:
            freq[i] += diff
            diff = 0
        else:
            take = min(-diff, int(freq[i]) - 1)
            freq[i] -= take
            diff += take
            k += 1
    return freq


@dataclass
class EntropyTables:
    """Per-channel integer frequency tables over ``offset .. offset+n-1`` plus escape.

    ``freqs[c]`` has ``n_c + 1`` entries; the last one is the escape symbol for
    values outside the support.  Probabilities are ``freq / 2**precision``.
    """

    offsets: list[int]
    freqs: list[np.ndarray]
    precision: int = TABLE_PRECISION

    def __post_init__(self):
        self._cum = []
        for f in self.freqs:
            cum = [0]
            for v in np.asarray(f, dtype=np.int64).tolist():
                cum.append(cum[-1] + v)
            self._cum.append(cum)
        self._total = 1 << self.precision

    @property
    def channels(self) -> int:
        return len(self.freqs)

    def probabilities(self, channel: int) -> np.ndarray:
        return np.asarray(self.freqs[channel], dtype=np.float64) / self._total

    @classmethod
    def from_density(cls, density: FactorizedDensity, precision: int = TABLE_PRECISION,
                     radius: int = MAX_RADIUS, threshold: float = SUPPORT_THRESHOLD) -> "EntropyTables":
        pmf, _ = density.integer_pmf(radius)
        offsets, freqs = [], []
        for c in range(pmf.shape[0]):
            p = pmf[c]
            keep = np.flatnonzero(p >= threshold)
            lo = min(int(keep[0]) if keep.size else radius, radius)
            hi = max(int(keep[-1]) if keep.size else radius, radius)  # index ``radius`` is value 0
            support = p[lo:hi + 1]
            escape = max(0.0, 1.0 - float(support.sum()))
            freqs.append(quantize_pmf(np.append(support, escape), precision))
            offsets.append(lo - radius)
        return cls(offsets, freqs, precision)

    def symbol_cost_bits(self, channel: int, value: int) -> float:
        """Ideal code length of one latent, including escape payload bits."""
        f = self.freqs[channel]
        n = len(f) - 1
        k = value - self.offsets[channel]
        if 0 <= k < n:
            return math.log2(self._total / int(f[k]))
        dist = (self.offsets[channel] - value) if k < 0 else (k - n + 1)
        return math.log2(self._total / int(f[n])) + 1 + 2 * int(math.floor(math.log2(dist))) + 1

    def estimate_bits(self, latents: np.ndarray) -> float:
        """Sum of ideal code lengths of a ``(C, H, W)`` integer latent array."""
        total = 0.0
        for c in range(latents.shape[0]):
            vals, counts = np.unique(latents[c], return_counts=True)
            total += sum(self.symbol_cost_bits(c, int(v)) * int(n) for v, n in zip(vals, counts))
        return total

    # Escape payload: a side bit (0 above the support, 1 below) then the distance
    # to the support edge (>= 1) as an Elias-gamma code of equiprobable bits.
    def encode(self, latents: np.ndarray, enc: ArithmeticEncoder) -> None:
        total = self._total
        for c in range(latents.shape[0]):
            cum = self._cum[c]
            n = len(cum) - 2
            off = self.offsets[c]
            for v in latents[c].ravel().tolist():
                k = v - off
                if 0 <= k < n:
                    enc.encode(cum[k], cum[k + 1], total)
                    continue
                enc.encode(cum[n], cum[n + 1], total)
                below = k < 0
                dist = -k if below else k - n + 1
                enc.encode_bit(int(below))
                nbits = dist.bit_length()
                for _ in range(nbits - 1):
                    enc.encode_bit(0)
                for i in range(nbits - 1, -1, -1):
                    enc.encode_bit((dist >> i) & 1)

    def decode(self, shape: tuple[int, int, int], dec: ArithmeticDecoder) -> np.ndarray:
        channels, h, w = shape
        if channels != self.channels:
            raise DecodeError(f"latent has {channels} channels, tables have {self.channels}")
        total = self._total
        out = np.empty((channels, h * w), dtype=np.int64)
        for c in range(channels):
            cum = self._cum[c]
            n = len(cum) - 2
            off = self.offsets[c]
            row = out[c]
            for j in range(h * w):
                t = dec.target(total)
                k = bisect.bisect_right(cum, t) - 1
                dec.consume(cum[k], cum[k + 1], total)
                if k < n:
                    row[j] = off + k
                    continue
                below = dec.decode_bit()
                zeros = 0
                while dec.decode_bit() == 0:
                    zeros += 1
                    if zeros > _MAX_GAMMA_BITS:
                        raise DecodeError("escape code too long")
                dist = 1
                for _ in range(zeros):
                    dist = (dist << 1) | dec.decode_bit()
                row[j] = off - dist if below else off + n - 1 + dist
        return out.reshape(channels, h, w)
