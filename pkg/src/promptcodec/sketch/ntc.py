"""Nonlinear transform codec for edge sketches.

Four stride-2 convolution stages with GDN map a sketch to a 1/16-resolution
latent grid; integer latents are entropy coded under a factorized per-channel
model.  Training minimises ``bpp + lambda * (1 - MS-SSIM)`` with additive
uniform noise standing in for rounding.

Sketch payload::

    varint height, varint width      (sketch size in pixels)
    arithmetic-coded latents         (channel-major, raster order)
"""
from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core import SketchMap
from ..errors import DataError, DecodeError, FormatError, NumericalError, VersionError
from .entropy import EntropyTables, FactorizedDensity
from .msssim import ms_ssim_torch
from .rangecoder import ArithmeticDecoder, ArithmeticEncoder

log = logging.getLogger(__name__)

ARCH_ID = "ntc-gdn-4s"
MODEL_MAGIC = b"TXNM"
MODEL_VERSION = 1
STRIDE = 16


class GDN(nn.Module):
    """Generalized divisive normalization (inverse=True gives IGDN)."""

    def __init__(self, channels: int, inverse: bool = False):
        super().__init__()
        self.inverse = inverse
        self.beta = nn.Parameter(torch.ones(channels))
        self.gamma = nn.Parameter(math.sqrt(0.1) * torch.eye(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        beta = self.beta**2 + 1e-6
        gamma = self.gamma**2
        norm = F.conv2d(x * x, gamma[:, :, None, None], beta)
        norm = torch.sqrt(norm)
        return x * norm if self.inverse else x / norm


class SketchNTC(nn.Module):
    def __init__(self, hidden: int = 32, latent: int = 64, kernel: int = 5):
        super().__init__()
        self.hidden, self.latent, self.kernel = hidden, latent, kernel
        p = kernel // 2

        def conv(i, o):
            return nn.Conv2d(i, o, kernel, stride=2, padding=p)

        def deconv(i, o):
            return nn.ConvTranspose2d(i, o, kernel, stride=2, padding=p, output_padding=1)

        n, m = hidden, latent
        self.g_a = nn.Sequential(conv(1, n), GDN(n), conv(n, n), GDN(n), conv(n, n), GDN(n), conv(n, m))
        self.g_s = nn.Sequential(
            deconv(m, n), GDN(n, True), deconv(n, n), GDN(n, True), deconv(n, n), GDN(n, True), deconv(n, 1)
        )
        with torch.no_grad():
            self.g_s[-1].bias.fill_(-3.0)  # sketches are mostly background
        self.density = FactorizedDensity(m)

    def synthesize(self, y_hat: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.g_s(y_hat))

    def forward(self, x: torch.Tensor, generator: Optional[torch.Generator] = None):
        y = self.g_a(x)
        noise = torch.rand(y.shape, generator=generator, dtype=y.dtype) - 0.5
        y_tilde = y + noise
        return self.synthesize(y_tilde), self.density.likelihood(y_tilde)


def _pad16(x: torch.Tensor) -> torch.Tensor:
    h, w = x.shape[-2:]
    return F.pad(x, (0, -w % STRIDE, 0, -h % STRIDE))


def _varint(n: int) -> bytes:
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        out.append(b | (0x80 if n else 0))
        if not n:
            return bytes(out)


def _read_varint(data: bytes, pos: int) -> tuple[int, int]:
    n = shift = 0
    while True:
        if pos >= len(data):
            raise DecodeError("sketch header truncated")
        b = data[pos]
        pos += 1
        n |= (b & 0x7F) << shift
        if not b & 0x80:
            return n, pos
        shift += 7
        if shift > 28:
            raise DecodeError("sketch header varint too long")


@dataclass
class NtcTrainConfig:
    lambdas: Sequence[float] = tuple(2.0**k for k in range(-4, 5))
    epochs: int = 20
    batch_size: int = 8
    distortion: str = "ms-ssim"
    target_bpp: float = 0.01
    dataset: Optional[str] = None
    seed: int = 0
    hidden: int = 32
    latent: int = 64
    kernel: int = 5
    crop_size: int = 64
    learning_rate: float = 1e-3
    density_lr_scale: float = 10.0
    val_fraction: float = 0.2
    warm_start: bool = True
    finetune_epochs: Optional[int] = None

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)
        if not self.lambdas or any(not v > 0 for v in self.lambdas):
            raise DataError("lambda grid must be non-empty with positive values")
        if not self.target_bpp > 0:
            raise DataError("target_bpp must be positive")
        if self.distortion != "ms-ssim":
            raise DataError("only ms-ssim distortion is supported")
        if self.epochs < 1 or self.batch_size < 1:
            raise DataError("epochs and batch_size must be >= 1")


@dataclass
class LambdaResult:
    lmbda: float
    val_bpp: float
    val_estimate_bpp: float
    val_ms_ssim: float
    train_loss: float


class NtcModel:
    """Trained sketch codec: transforms, entropy tables and training metadata."""

    def __init__(self, network: SketchNTC, lmbda: float, metadata: Optional[dict] = None,
                 tables: Optional[EntropyTables] = None):
        self.network = network.eval()
        self.lmbda = float(lmbda)
        self.metadata = dict(metadata or {})
        self.tables = tables if tables is not None else EntropyTables.from_density(network.density)

    # -- coding -------------------------------------------------------------
    @torch.no_grad()
    def latents(self, sketch: SketchMap) -> np.ndarray:
        x = torch.from_numpy(sketch.data).float()[None, None]
        y = self.network.g_a(_pad16(x))
        return torch.round(y)[0].to(torch.int64).numpy()

    def estimate_bits(self, sketch: SketchMap) -> float:
        return self.tables.estimate_bits(self.latents(sketch))

    def encode(self, sketch: SketchMap) -> bytes:
        y = self.latents(sketch)
        enc = ArithmeticEncoder()
        self.tables.encode(y, enc)
        return _varint(sketch.height) + _varint(sketch.width) + enc.finish()

    @torch.no_grad()
    def decode(self, data: bytes) -> SketchMap:
        if not data:
            raise DecodeError("empty sketch payload")
        h, pos = _read_varint(data, 0)
        w, pos = _read_varint(data, pos)
        if h < 1 or w < 1 or h > 0xFFFF or w > 0xFFFF:
            raise DecodeError(f"invalid sketch size {w}x{h}")
        shape = (self.tables.channels, -(-h // STRIDE), -(-w // STRIDE))
        dec = ArithmeticDecoder(data[pos:])
        y = self.tables.decode(shape, dec)
        dec.check_end()
        x_hat = self.network.synthesize(torch.from_numpy(y).float()[None])
        out = x_hat[0, 0, :h, :w].double().clamp(0.0, 1.0).numpy()
        return SketchMap(out)

    # -- serialization ------------------------------------------------------
    def to_bytes(self) -> bytes:
        net = self.network
        state = net.state_dict()
        params = [[k, list(v.shape)] for k, v in state.items()]
        header = {
            "arch": ARCH_ID,
            "hidden": net.hidden,
            "latent": net.latent,
            "kernel": net.kernel,
            "lambda": self.lmbda,
            "metadata": self.metadata,
            "params": params,
            "tables": {
                "precision": self.tables.precision,
                "offsets": list(self.tables.offsets),
                "lengths": [len(f) for f in self.tables.freqs],
            },
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        buf = io.BytesIO()
        buf.write(MODEL_MAGIC + struct.pack(">BI", MODEL_VERSION, len(head)) + head)
        for k, _ in params:
            buf.write(state[k].detach().cpu().numpy().astype("<f4").tobytes())
        for f in self.tables.freqs:
            buf.write(np.asarray(f, dtype="<i4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "NtcModel":
        if data[:4] != MODEL_MAGIC:
            raise FormatError("not a sketch codec model file")
        if len(data) < 9:
            raise FormatError("model file truncated")
        version, hlen = struct.unpack(">BI", data[4:9])
        if version != MODEL_VERSION:
            raise VersionError(f"unsupported model version {version}")
        try:
            return cls._from_parts(data, hlen)
        except FormatError:
            raise
        except (ValueError, KeyError, TypeError, RuntimeError) as exc:
            raise FormatError(f"malformed model file: {exc}") from exc

    @classmethod
    def _from_parts(cls, data: bytes, hlen: int) -> "NtcModel":
        header = json.loads(data[9:9 + hlen])
        if header.get("arch") != ARCH_ID:
            raise FormatError(f"unknown architecture {header.get('arch')!r}")
        net = SketchNTC(header["hidden"], header["latent"], header["kernel"])
        pos = 9 + hlen
        state = {}
        for name, shape in header["params"]:
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape)
            state[name] = torch.from_numpy(arr.copy())
            pos += 4 * n
        net.load_state_dict(state)
        t = header["tables"]
        freqs = []
        for n in t["lengths"]:
            freqs.append(np.frombuffer(data, dtype="<i4", count=n, offset=pos).astype(np.int64))
            pos += 4 * n
        if pos != len(data):
            raise FormatError("model file has trailing bytes")
        tables = EntropyTables(list(t["offsets"]), freqs, t["precision"])
        return cls(net, header["lambda"], header["metadata"], tables)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "NtcModel":
        return cls.from_bytes(Path(path).read_bytes())


def encode_sketch(sketch: SketchMap, model: NtcModel) -> bytes:
    return model.encode(sketch)


def decode_sketch(data: bytes, model: NtcModel) -> SketchMap:
    """Reconstruct a sketch from its payload.

    Structural damage (empty or truncated header, exhausted or overlong
    stream) raises :class:`DecodeError`.  A payload produced by a different
    model decodes to an arbitrary map or raises; it never crashes the process.
    """
    return model.decode(data)


# -- training -----------------------------------------------------------------

def _stack(sketches: Sequence[SketchMap]) -> torch.Tensor:
    shapes = {s.data.shape for s in sketches}
    if len(shapes) != 1:
        raise DataError(f"training sketches must share one size, got {sorted(shapes)}")
    return torch.from_numpy(np.stack([s.data for s in sketches])).float()[:, None]


def _crops(batch: torch.Tensor, size: int, gen: torch.Generator) -> torch.Tensor:
    h, w = batch.shape[-2:]
    if size >= h and size >= w:
        return batch
    ch, cw = min(size, h), min(size, w)
    out = []
    for x in batch:
        top = int(torch.randint(h - ch + 1, (1,), generator=gen))
        left = int(torch.randint(w - cw + 1, (1,), generator=gen))
        out.append(x[:, top:top + ch, left:left + cw])
    return torch.stack(out)


def _train_one(net: SketchNTC, data: torch.Tensor, lmbda: float, cfg: NtcTrainConfig, gen: torch.Generator,
               epochs: int) -> float:
    density = list(net.density.parameters())
    skip = {id(p) for p in density}
    opt = torch.optim.Adam([
        {"params": [p for p in net.parameters() if id(p) not in skip], "lr": cfg.learning_rate},
        {"params": density, "lr": cfg.learning_rate * cfg.density_lr_scale},
    ])
    net.train()
    n = data.shape[0]
    last = float("nan")
    step = 0
    for _ in range(epochs):
        order = torch.randperm(n, generator=gen)
        running, batches = 0.0, 0
        for i in range(0, n, cfg.batch_size):
            x = _pad16(_crops(data[order[i:i + cfg.batch_size]], cfg.crop_size, gen))
            x_hat, lik = net(x, generator=gen)
            bpp = -torch.log2(lik).sum() / (x.shape[0] * x.shape[-2] * x.shape[-1])
            dist = 1.0 - ms_ssim_torch(x_hat, x).mean()
            loss = bpp + lmbda * dist
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite training loss at lambda={lmbda}", step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            nn.utils.clip_grad_norm_(net.parameters(), 1.0)
            opt.step()
            running += float(loss.detach())
            batches += 1
            step += 1
        last = running / batches
    net.eval()
    return last


def evaluate(model: NtcModel, sketches: Sequence[SketchMap]) -> tuple[float, float, float]:
    """Coded bpp, entropy-estimate bpp and MS-SSIM averaged over ``sketches``."""
    bits = est = pixels = 0.0
    quality = []
    for s in sketches:
        y = model.latents(s)
        payload = model.encode(s)
        bits += 8 * len(payload)
        est += model.tables.estimate_bits(y)
        pixels += s.height * s.width
        rec = model.decode(payload)
        x = torch.from_numpy(s.data)[None, None]
        quality.append(float(ms_ssim_torch(torch.from_numpy(rec.data)[None, None], x)[0]))
    return bits / pixels, est / pixels, float(np.mean(quality))


def load_sketch_dir(path: str | Path) -> list[SketchMap]:
    from ..imageio import load_gray

    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"})
    return [SketchMap(load_gray(p)) for p in files]


def train_ntc(config: NtcTrainConfig, sketches: Optional[Sequence[SketchMap]] = None) -> NtcModel:
    """Train one codec per lambda and return the one whose validation bpp is nearest the target.

    Validation bpp is measured on actual payloads of the held-out sketches.
    The per-lambda table is stored in ``model.metadata["lambda_table"]``.
    """
    if sketches is None:
        if config.dataset is None:
            raise DataError("no training sketches and no dataset path")
        sketches = load_sketch_dir(config.dataset)
    sketches = list(sketches)
    if not sketches:
        raise DataError("empty sketch dataset")

    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    order = torch.randperm(len(sketches), generator=gen).tolist()
    n_val = int(round(config.val_fraction * len(sketches)))
    n_val = min(max(n_val, 1), len(sketches))
    val = [sketches[i] for i in order[:n_val]]
    train = [sketches[i] for i in order[n_val:]] or val  # tiny sets train on their validation data
    data = _stack(train)

    results: list[LambdaResult] = []
    models: list[NtcModel] = []
    prev_state = None
    # high-rate models first; lower-rate ones are fine-tuned from their neighbour
    for lmbda in sorted(config.lambdas, reverse=True):
        torch.manual_seed(config.seed)
        net = SketchNTC(config.hidden, config.latent, config.kernel)
        epochs = config.epochs
        if config.warm_start and prev_state is not None:
            net.load_state_dict(prev_state)
            epochs = config.finetune_epochs or config.epochs
        loss = _train_one(net, data, lmbda, config, gen, epochs)
        prev_state = {k: v.clone() for k, v in net.state_dict().items()}
        model = NtcModel(net, lmbda)
        bpp, est, q = evaluate(model, val)
        results.append(LambdaResult(lmbda, bpp, est, q, loss))
        models.append(model)
        log.info("lambda=%g  val_bpp=%.5f  est_bpp=%.5f  ms_ssim=%.4f  loss=%.5f", lmbda, bpp, est, q, loss)

    results.reverse()
    models.reverse()
    best = min(range(len(results)), key=lambda i: (abs(results[i].val_bpp - config.target_bpp), i))
    chosen = results[best]
    if len(results) == 1 or not 0.5 * config.target_bpp <= chosen.val_bpp <= 2.0 * config.target_bpp:
        log.warning("selected lambda=%g has validation bpp %.5f against target %.5f",
                    chosen.lmbda, chosen.val_bpp, config.target_bpp)
    model = models[best]
    model.metadata = {
        "target_bpp": config.target_bpp,
        "distortion": config.distortion,
        "seed": config.seed,
        "epochs": config.epochs,
        "train_count": len(train),
        "val_count": len(val),
        "val_indices": sorted(order[:n_val]),
        "val_bpp": chosen.val_bpp,
        "val_ms_ssim": chosen.val_ms_ssim,
        "lambda_table": [asdict(r) for r in results],
    }
    return model
