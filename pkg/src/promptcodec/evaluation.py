"""Semantic, perceptual and realism metrics plus the rate-quality benchmark."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import Image, Mode, RateReport, cosine_similarity, rate_report_for
from .decoder import Backend, resize_array, sketch_correlation
from .errors import BackendError, DataError, NumericalError, ShapeError, PromptCodecError
from .prompt_inversion import Embedder, invert_prompt
from .sketch.msssim import ms_ssim

log = logging.getLogger(__name__)

CSV_COLUMNS = ("image_id", "mode", "total_bits", "bpp", "d_clip", "ms_ssim", "psnr")
METRICS = ("d_clip", "ms_ssim", "psnr")
EIG_TOLERANCE = 1e-6


# -- per-image metrics ----------------------------------------------------------

def d_clip(x: Image, xhat: Image, embedder: Embedder) -> float:
    """One minus the cosine similarity of the two image embeddings, in [0, 2]."""
    ex = embedder.encode_image(x).detach().cpu().numpy()
    ey = embedder.encode_image(xhat).detach().cpu().numpy()
    return d_clip_from_embeddings(ex, ey)


def d_clip_from_embeddings(ex, ey) -> float:
    return float(np.clip(1.0 - cosine_similarity(ex, ey), 0.0, 2.0))


def psnr(x: Image, xhat: Image) -> float:
    if x.data.shape != xhat.data.shape:
        raise ShapeError(f"shape mismatch {x.data.shape} vs {xhat.data.shape}")
    mse = float(np.mean((x.data - xhat.data) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


# -- distribution metrics ---------------------------------------------------------

def _as_features(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be an (n, d) array")
    if arr.shape[0] < 2:
        raise DataError(f"{name} needs at least 2 samples, got {arr.shape[0]}")
    return arr


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    sym = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(sym)
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -EIG_TOLERANCE * scale:
        raise NumericalError(f"matrix is not positive semi-definite (eigenvalue {vals.min():.3g})")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def fid(features_a, features_b) -> float:
    """Frechet distance between Gaussians fitted to two feature sets.

    ``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`` with (n-1)
    covariances.  The trace of the matrix square root is taken from the
    symmetric form ``S_a^(1/2) S_b S_a^(1/2)``, which has the same eigenvalues.
    """
    a = _as_features(features_a, "features_a")
    b = _as_features(features_b, "features_b")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False, ddof=1))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False, ddof=1))
    root_a = _psd_sqrt(cov_a)
    inner = _psd_sqrt(root_a @ cov_b @ root_a)
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(inner))
    return max(value, 0.0)


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def kid(features_a, features_b) -> float:
    """Unbiased squared MMD with the cubic polynomial kernel ``(x.y/d + 1)^3``.

    Equal-size sets use the paired U-statistic, which excludes the ``i = j``
    cross terms and is therefore exactly zero for identical sets; unequal
    sizes use the two-sample unbiased estimator with the full cross term.
    The result can be negative.
    """
    a = _as_features(features_a, "features_a")
    b = _as_features(features_b, "features_b")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    m, n = a.shape[0], b.shape[0]
    kaa = polynomial_kernel(a, a)
    kbb = polynomial_kernel(b, b)
    kab = polynomial_kernel(a, b)
    saa = kaa.sum() - np.trace(kaa)
    sbb = kbb.sum() - np.trace(kbb)
    if m == n:
        sab = kab.sum() - np.trace(kab)
        return float((saa + sbb - 2.0 * sab) / (m * (m - 1)))
    return float(saa / (m * (m - 1)) + sbb / (n * (n - 1)) - 2.0 * kab.sum() / (m * n))


# -- feature extractors -----------------------------------------------------------

class FeatureExtractor:
    name = "features"
    dim: int

    def __call__(self, image: Image) -> np.ndarray:
        raise NotImplementedError

    def batch(self, images: Iterable[Image]) -> np.ndarray:
        return np.stack([self(im) for im in images])


class RandomProjectionFeatures(FeatureExtractor):
    """Fixed Gaussian projection of a 32x32 RGB thumbnail."""

    name = "random-projection"

    def __init__(self, dim: int = 64, thumb: int = 32, seed: int = 0):
        self.dim = dim
        self.thumb = thumb
        rng = np.random.default_rng(seed)
        self.matrix = rng.standard_normal((dim, thumb * thumb * 3)) / math.sqrt(thumb * thumb * 3)

    def __call__(self, image: Image) -> np.ndarray:
        small = resize_array(image.data, self.thumb, self.thumb)
        return self.matrix @ (small.ravel() - 0.5)


class InceptionFeatures(FeatureExtractor):
    """2048-d pool features of torchvision's Inception-v3 (weights must be obtainable)."""

    name = "inception-v3-pool"
    dim = 2048

    def __init__(self):
        try:
            import torch
            from torchvision.models import Inception_V3_Weights, inception_v3

            net = inception_v3(weights=Inception_V3_Weights.IMAGENET1K_V1, aux_logits=True)
        except Exception as exc:  # noqa: BLE001
            raise BackendError(f"Inception-v3 weights unavailable: {exc}") from exc
        net.fc = torch.nn.Identity()
        self.net = net.eval()
        self._torch = torch

    def __call__(self, image: Image) -> np.ndarray:
        torch = self._torch
        x = torch.from_numpy(resize_array(image.data, 299, 299)).permute(2, 0, 1)[None].float()
        mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
        with torch.no_grad():
            return self.net((x - mean) / std)[0].double().numpy()


# -- benchmark --------------------------------------------------------------------

def image_metrics(original: Image, recon: Image, embedder: Optional[Embedder], names: Sequence[str] = METRICS) -> dict[str, float]:
    out: dict[str, float] = {}
    if "d_clip" in names and embedder is not None:
        out["d_clip"] = d_clip(original, recon, embedder)
    if "ms_ssim" in names:
        out["ms_ssim"] = ms_ssim(original, recon)
    if "psnr" in names:
        out["psnr"] = psnr(original, recon)
    return out


@dataclass
class BenchmarkResult:
    reports: list[RateReport]
    summary: dict
    failures: list[dict] = field(default_factory=list)
    csv_path: Optional[Path] = None
    summary_path: Optional[Path] = None
    plot_paths: list[Path] = field(default_factory=list)
    sketch_correlations: dict[str, float] = field(default_factory=dict)


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        if math.isinf(v):
            return "inf"
        return f"{v:.10g}"
    return str(v)


def write_csv(reports: Sequence[RateReport], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in reports:
            writer.writerow([r.image_id, r.mode, _fmt(r.total_bits if r.total_bits >= 0 else None),
                             _fmt(r.bpp), *(_fmt(r.metrics.get(m)) for m in METRICS)])
    return path


def read_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def plot_curves(reports: Sequence[RateReport], summary: dict, out_dir: str | Path) -> list[Path]:
    """One rate-vs-metric scatter per metric, one series per mode."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    paths = []
    modes = sorted({r.mode for r in reports})
    for metric in METRICS:
        pts = {m: [(r.bpp, r.metrics[metric]) for r in reports if r.mode == m and metric in r.metrics
                   and math.isfinite(r.metrics[metric]) and r.bpp == r.bpp] for m in modes}
        if not any(pts.values()):
            continue
        fig, ax = plt.subplots(figsize=(4, 3))
        for m in modes:
            if pts[m]:
                xs, ys = zip(*pts[m])
                ax.scatter(xs, ys, label=m, s=14)
        ax.set_xlabel("bpp")
        ax.set_ylabel(metric)
        ax.legend()
        fig.tight_layout()
        p = out_dir / f"rate_{metric}.png"
        fig.savefig(p, dpi=80, metadata={"Software": None})
        plt.close(fig)
        paths.append(p)
    for metric in ("fid", "kid"):
        pts = [(summary["modes"][m].get("mean_bpp"), summary["modes"][m].get(metric)) for m in modes
               if m in summary.get("modes", {}) and summary["modes"][m].get(metric) is not None]
        if not pts:
            continue
        fig, ax = plt.subplots(figsize=(4, 3))
        for (x, y), m in zip(pts, [m for m in modes if summary["modes"].get(m, {}).get(metric) is not None]):
            ax.scatter([x], [y], label=m)
        ax.set_xlabel("bpp")
        ax.set_ylabel(metric)
        ax.legend()
        fig.tight_layout()
        p = out_dir / f"rate_{metric}.png"
        fig.savefig(p, dpi=80, metadata={"Software": None})
        plt.close(fig)
        paths.append(p)
    return paths


def _realism(originals: Sequence[Image], recons: Sequence[Image], extractor: FeatureExtractor) -> dict:
    out = {"n_original": len(originals), "n_reconstructed": len(recons), "fid": None, "kid": None}
    if len(originals) >= 2 and len(recons) >= 2:
        fa, fb = extractor.batch(originals), extractor.batch(recons)
        out["fid"] = fid(fa, fb)
        out["kid"] = kid(fa, fb)
    return out


def run_benchmark(
    dataset: Sequence[tuple[str, Image]],
    settings,
    backend: Backend,
    modes: Sequence[Mode | str] = (Mode.PIC, Mode.PICS),
    metrics: Sequence[str] = METRICS,
    extractor: Optional[FeatureExtractor] = None,
    seed: int = 0,
    out_dir: Optional[str | Path] = None,
    plots: bool = True,
) -> BenchmarkResult:
    """Compress and reconstruct every image in every mode and score the results.

    Prompt inversion runs once per image and is shared by the modes.  A failing
    image is logged in ``failures`` and skipped.  With ``out_dir`` set, writes
    ``results.csv``, ``summary.json``, ``breakdown.csv`` and rate plots.
    """
    from .pipeline import decompress, pack

    if not dataset:
        raise DataError("empty dataset")
    modes = [Mode.parse(m) for m in modes]
    extractor = extractor or RandomProjectionFeatures()
    reports: list[RateReport] = []
    failures: list[dict] = []
    originals: dict[Mode, list[Image]] = {m: [] for m in modes}
    recons: dict[Mode, list[Image]] = {m: [] for m in modes}
    correlations: dict[str, float] = {}

    for image_id, image in dataset:
        try:
            inversion = invert_prompt(image, settings.embedder, settings.pi)
        except PromptCodecError as exc:
            failures.append({"image_id": image_id, "mode": "*", "error": f"{type(exc).__name__}: {exc}"})
            log.warning("skipping %s: %s", image_id, exc)
            continue
        for mode in modes:
            try:
                comp = pack(image, mode, settings, inversion.tokens)
                dec = decompress(comp.blob, settings, backend, seed)
            except PromptCodecError as exc:
                failures.append({"image_id": image_id, "mode": mode.name, "error": f"{type(exc).__name__}: {exc}"})
                log.warning("skipping %s/%s: %s", image_id, mode.name, exc)
                continue
            report = rate_report_for(image_id, comp.blob, comp.container, comp.prompt)
            report.metrics = image_metrics(image, dec.image, settings.embedder, metrics)
            reports.append(report)
            originals[mode].append(image)
            recons[mode].append(dec.image)
            if dec.sketch is not None:
                correlations[image_id] = sketch_correlation(dec.image, dec.sketch)

    summary = {
        "embedder": getattr(settings.embedder, "name", type(settings.embedder).__name__),
        "feature_extractor": extractor.name,
        "backend": backend.kind,
        "steps": backend.steps,
        "guidance": backend.guidance,
        "seed": seed,
        "prompt_length": settings.pi.prompt_length,
        "token_coding": settings.token_coding.name,
        "images": len(dataset),
        "rows": len(reports),
        "failures": failures,
        "modes": {},
    }
    for mode in modes:
        rows = [r for r in reports if r.mode == mode.name]
        entry = _realism(originals[mode], recons[mode], extractor)
        entry["mean_bpp"] = float(np.mean([r.bpp for r in rows])) if rows else None
        for m in metrics:
            vals = [r.metrics[m] for r in rows if m in r.metrics and math.isfinite(r.metrics[m])]
            entry[f"mean_{m}"] = float(np.mean(vals)) if vals else None
        summary["modes"][mode.name] = entry

    result = BenchmarkResult(reports, summary, failures, sketch_correlations=correlations)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.csv_path = write_csv(reports, out / "results.csv")
        result.summary_path = out / "summary.json"
        result.summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        with (out / "breakdown.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_id", "mode", "header_bits", "token_bits", "sketch_bits", "prompt"])
            for r in reports:
                w.writerow([r.image_id, r.mode, r.total_bits - r.token_bits - r.sketch_bits,
                            r.token_bits, r.sketch_bits, r.prompt])
        if plots:
            result.plot_paths = plot_curves(reports, summary, out)
    return result


def evaluate_pairs(
    pairs: Sequence[tuple[str, Image, Image]],
    embedder: Optional[Embedder],
    metrics: Sequence[str] = METRICS,
    extractor: Optional[FeatureExtractor] = None,
    bits: Optional[dict[str, int]] = None,
    mode: str = "given",
    out_dir: Optional[str | Path] = None,
    plots: bool = True,
) -> BenchmarkResult:
    """Score existing reconstructions against their originals (no coding involved)."""
    if not pairs:
        raise DataError("no image pairs to evaluate")
    extractor = extractor or RandomProjectionFeatures()
    bits = bits or {}
    reports = []
    for image_id, orig, rec in pairs:
        if rec.data.shape != orig.data.shape:
            rec = Image(resize_array(rec.data, orig.height, orig.width))
        total = bits.get(image_id, -1)
        bpp = total / (orig.width * orig.height) if total >= 0 else float("nan")
        r = RateReport(image_id, mode, total, bpp, orig.width, orig.height)
        r.metrics = image_metrics(orig, rec, embedder, metrics)
        reports.append(r)
    entry = _realism([p[1] for p in pairs], [p[2] for p in pairs], extractor)
    summary = {"embedder": getattr(embedder, "name", None), "feature_extractor": extractor.name,
               "images": len(pairs), "rows": len(reports), "failures": [], "modes": {mode: entry}}
    result = BenchmarkResult(reports, summary)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.csv_path = write_csv(reports, out / "results.csv")
        result.summary_path = out / "summary.json"
        result.summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        if plots:
            result.plot_paths = plot_curves(reports, summary, out)
    return result
