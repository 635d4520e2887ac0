"""Command-line interface: ``promptcodec compress | decompress | train-sketch-codec | eval``.

Exit codes: 0 success, 1 unexpected library error, 2 bad configuration or
arguments, 3 unreadable/unwritable file, 4 corrupt or truncated container,
5 backend failure (including a backend that cannot take a sketch),
6 bad dataset, 7 numerical failure.

A YAML (or JSON) file given with ``--config`` supplies option defaults.
Top-level keys apply to every command that has the option; a section named
after a command (``compress:``, ``train-sketch-codec:`` ...) overrides them.
Flags on the command line override both.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import click
import yaml

from .core import CONTAINER_SUFFIX, Mode, TokenCoding, compute_bpp, rate_report_for, read_container
from .decoder import ENDPOINT_ENV, make_backend
from .errors import ConfigError, DataError, InputError, PromptCodecError
from .evaluation import METRICS, InceptionFeatures, RandomProjectionFeatures, evaluate_pairs, run_benchmark
from .imageio import list_images, load_image, save_gray, save_image
from .pipeline import CodecSettings, compress, decompress
from .prompt_inversion import ClipEmbedder, PiConfig, ToyEmbedder
from .sketch.edges import GradientEdgeDetector, HedDetector, extract_sketch
from .sketch.ntc import NtcModel, NtcTrainConfig, load_sketch_dir, train_ntc
from .tokenizer import ClipTokenizer, SyllableTokenizer

log = logging.getLogger("promptcodec")

EXIT_IO = 3


# -- helpers -----------------------------------------------------------------------

def atomic_write(path: str | Path, data: bytes) -> None:
    """Write ``data`` via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _atomic_via(path: Path, writer) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=path.suffix, dir=path.parent)
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def parse_float_list(text: str) -> list[float]:
    try:
        values = [float(v) for v in str(text).replace(" ", "").split(",") if v]
    except ValueError as exc:
        raise ConfigError(f"cannot parse number list {text!r}") from exc
    if not values:
        raise ConfigError("empty number list")
    return values


def build_settings(embedder: str, tokens: int, token_coding: str, sketch_model: Optional[str],
                   steps: int, restarts: int, learning_rate: float, pi_seed: int,
                   detector: str = "gradient") -> CodecSettings:
    """Codec settings shared by encoder and decoder (both sides must agree on them)."""
    if embedder == "toy":
        emb, tok = ToyEmbedder(), SyllableTokenizer()
    elif embedder == "clip" or embedder.startswith("clip:"):
        name = embedder.partition(":")[2] or "openai/clip-vit-large-patch14"
        emb, tok = ClipEmbedder.from_pretrained(name), ClipTokenizer.from_pretrained(name)
    else:
        raise ConfigError(f"unknown embedder {embedder!r}; expected toy, clip or clip:<model>")
    model = None
    if sketch_model:
        if not Path(sketch_model).is_file():
            raise ConfigError(f"sketch model {sketch_model} does not exist")
        model = NtcModel.load(sketch_model)
    pi = PiConfig(prompt_length=tokens, step_count=steps, learning_rate=learning_rate,
                  restart_count=restarts, random_seed=pi_seed)
    return CodecSettings(emb, tok, pi, TokenCoding.parse(token_coding), model, make_detector(detector))


def make_detector(spec: str):
    if spec == "gradient":
        return GradientEdgeDetector()
    if spec == "hed" or spec.startswith("hed:"):
        return HedDetector(spec.partition(":")[2] or None)
    raise ConfigError(f"unknown detector {spec!r}; expected gradient or hed:<weights>")


def load_config(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text) if path.endswith(".json") else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"config {path} is not valid: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping of option names to values")
    return data


def _default_map(group: click.Group, data: dict) -> dict:
    norm = lambda k: str(k).replace("-", "_")  # noqa: E731
    params = {name: {p.name for p in cmd.params} for name, cmd in group.commands.items()}
    top = {norm(k): v for k, v in data.items() if k not in params}
    known = set().union(*params.values())
    unknown = sorted(set(top) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    out = {}
    for name, names in params.items():
        section = data.get(name) or {}
        if not isinstance(section, dict):
            raise ConfigError(f"config section {name!r} must be a mapping")
        section = {norm(k): v for k, v in section.items()}
        bad = sorted(set(section) - names)
        if bad:
            raise ConfigError(f"unknown keys in config section {name!r}: {', '.join(bad)}")
        out[name] = {**{k: v for k, v in top.items() if k in names}, **section}
    return out


class _Group(click.Group):
    """Maps library exceptions to documented exit codes."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except PromptCodecError as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(exc.exit_code)
        except OSError as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(EXIT_IO)


def _codec_options(f):
    options = [
        click.option("--tokens", "tokens", type=int, default=16, show_default=True, help="Prompt length in tokens."),
        click.option("--token-coding", type=click.Choice(["fixed", "text"]), default="fixed", show_default=True),
        click.option("--sketch-model", type=str, default=None, help="Trained sketch codec (.ntc)."),
        click.option("--embedder", default="toy", show_default=True, help="toy | clip | clip:<model name>"),
        click.option("--steps", type=int, default=1000, show_default=True, help="Prompt-inversion steps."),
        click.option("--restarts", type=int, default=3, show_default=True),
        click.option("--lr", "learning_rate", type=float, default=0.1, show_default=True),
        click.option("--pi-seed", type=int, default=0, show_default=True, help="Prompt-inversion seed."),
        click.option("--detector", default="gradient", show_default=True, help="gradient | hed | hed:<weights>"),
    ]
    for opt in reversed(options):
        f = opt(f)
    return f


def _backend_options(f):
    f = click.option("--seed", type=int, default=0, show_default=True, help="Generation seed.")(f)
    f = click.option("--endpoint", default=None, help=f"Backend URL (default ${ENDPOINT_ENV}).")(f)
    f = click.option("--backend", type=click.Choice(["mock", "text", "text+sketch"]), default="mock",
                     show_default=True)(f)
    return f


def _backend(name: str, endpoint: Optional[str]):
    return make_backend(name, endpoint)


def _settings_from(kw: dict) -> CodecSettings:
    return build_settings(kw["embedder"], kw["tokens"], kw["token_coding"], kw["sketch_model"],
                          kw["steps"], kw["restarts"], kw["learning_rate"], kw["pi_seed"], kw["detector"])


def _inputs(path: Path) -> list[Path]:
    if path.is_dir():
        files = list_images(path)
        if not files:
            raise DataError(f"no images in {path}")
        return files
    if not path.exists():
        raise InputError(f"{path} does not exist")
    return [path]


# -- commands ----------------------------------------------------------------------

@click.group(cls=_Group)
@click.option("--config", "config_path", type=str, default=None, help="YAML/JSON file of option defaults.")
@click.option("-v", "--verbose", count=True)
@click.pass_context
def cli(ctx, config_path, verbose):
    """Text-plus-sketch image compression."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if config_path:
        try:
            ctx.default_map = _default_map(cli, load_config(config_path))
        except PromptCodecError as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(exc.exit_code)


@cli.command("compress")
@click.argument("input_path", type=click.Path(path_type=Path))
@click.option("--out", type=click.Path(path_type=Path), default=None,
              help="Output container (single image) or directory (batch).")
@click.option("--mode", type=click.Choice(["pic", "pics"], case_sensitive=False), default="pic", show_default=True)
@_codec_options
@click.option("--workers", type=int, default=1, show_default=True, help="Parallel images in batch mode.")
def compress_cmd(input_path: Path, out: Optional[Path], mode: str, workers: int, **kw):
    """Encode an image (or every image in a directory) to .tsk containers."""
    mode_ = Mode.parse(mode)
    if mode_ is Mode.PICS and not kw["sketch_model"]:
        raise ConfigError("--mode pics requires --sketch-model")
    settings = _settings_from(kw)
    files = _inputs(input_path)
    batch = input_path.is_dir()
    if batch:
        out_dir = out or input_path / "compressed"
        targets = [out_dir / (f.stem + CONTAINER_SUFFIX) for f in files]
    else:
        targets = [out or input_path.with_suffix(CONTAINER_SUFFIX)]

    def one(pair):
        src, dst = pair
        image = load_image(src)
        comp = compress(image, mode_, settings)
        atomic_write(dst, comp.blob)
        return rate_report_for(src.stem, comp.blob, comp.container, comp.prompt)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        reports = list(pool.map(one, zip(files, targets)))
    for r, dst in zip(reports, targets):
        click.echo(f"{dst}: {r.total_bits} bits, {r.bpp:.6f} bpp "
                   f"(text {r.token_bits} bits, sketch {r.sketch_bits} bits)")
    if batch:
        def write_summary(tmp):
            with open(tmp, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["image_id", "mode", "total_bits", "bpp", "token_bits", "sketch_bits", "prompt"])
                for r in reports:
                    w.writerow([r.image_id, r.mode, r.total_bits, f"{r.bpp:.10g}", r.token_bits, r.sketch_bits, r.prompt])
        _atomic_via(out_dir / "summary.csv", write_summary)


@cli.command("decompress")
@click.argument("input_path", type=click.Path(path_type=Path))
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Output PNG (default: beside input).")
@_codec_options
@_backend_options
@click.option("--save-sketch", type=click.Path(path_type=Path), default=None, help="Also write the decoded sketch.")
def decompress_cmd(input_path: Path, out: Optional[Path], backend: str, endpoint: Optional[str], seed: int,
                   save_sketch: Optional[Path], **kw):
    """Reconstruct an image from a .tsk container."""
    try:
        blob = input_path.read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read {input_path}: {exc}") from exc
    container = read_container(blob)
    if container.mode is Mode.PICS and not kw["sketch_model"]:
        raise ConfigError("this PICS container needs --sketch-model")
    settings = _settings_from(kw)
    result = decompress(blob, settings, _backend(backend, endpoint), seed)
    out = out or input_path.with_suffix(".png")
    _atomic_via(out, lambda tmp: save_image(result.image, tmp))
    pixels = container.width * container.height
    click.echo(f"prompt: {result.prompt}")
    click.echo(f"{container.mode.name} {container.width}x{container.height}: {8 * len(blob)} bits, "
               f"{compute_bpp(8 * len(blob), container.width, container.height):.6f} bpp "
               f"(text {8 * len(container.token_payload) / pixels:.6f} bpp, "
               f"sketch {8 * len(container.sketch_payload or b'') / pixels:.6f} bpp)")
    if save_sketch is not None and result.sketch is not None:
        _atomic_via(save_sketch, lambda tmp: save_gray(result.sketch.data, tmp))
    click.echo(f"wrote {out}")


@cli.command("train-sketch-codec")
@click.argument("dataset", type=click.Path(path_type=Path))
@click.option("--out", type=click.Path(path_type=Path), required=True, help="Model file to write (.ntc).")
@click.option("--lambda-grid", default="0.0625,0.125,0.25,0.5,1,2,4,8,16", show_default=True)
@click.option("--target-bpp", type=float, default=0.01, show_default=True)
@click.option("--epochs", type=int, default=20, show_default=True)
@click.option("--finetune-epochs", type=int, default=None, help="Epochs per warm-started lambda.")
@click.option("--batch-size", type=int, default=8, show_default=True)
@click.option("--crop-size", type=int, default=64, show_default=True)
@click.option("--val-fraction", type=float, default=0.2, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--extract/--no-extract", default=False, help="Dataset holds raw images; extract sketches first.")
@click.option("--detector", default="gradient", show_default=True)
def train_cmd(dataset: Path, out: Path, lambda_grid: str, target_bpp: float, epochs: int,
              finetune_epochs: Optional[int], batch_size: int, crop_size: int, val_fraction: float,
              seed: int, extract: bool, detector: str):
    """Train the sketch codec over a lambda grid and keep the model nearest the target rate."""
    if not dataset.is_dir():
        raise InputError(f"{dataset} is not a directory")
    if extract:
        det = make_detector(detector)
        sketches = [extract_sketch(load_image(p), det) for p in list_images(dataset)]
    else:
        sketches = load_sketch_dir(dataset)
    if not sketches:
        raise DataError(f"no images in {dataset}")
    config = NtcTrainConfig(lambdas=parse_float_list(lambda_grid), epochs=epochs, batch_size=batch_size,
                            target_bpp=target_bpp, dataset=str(dataset), seed=seed, crop_size=crop_size,
                            val_fraction=val_fraction, finetune_epochs=finetune_epochs)
    model = train_ntc(config, sketches)
    atomic_write(out, model.to_bytes())
    table = model.metadata["lambda_table"]

    def write_table(tmp):
        with open(tmp, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(table[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(table)
    _atomic_via(out.with_suffix(".lambdas.csv"), write_table)
    for row in table:
        mark = "*" if row["lmbda"] == model.lmbda else " "
        click.echo(f"{mark} lambda={row['lmbda']:<8g} bpp={row['val_bpp']:.5f} "
                   f"est={row['val_estimate_bpp']:.5f} ms_ssim={row['val_ms_ssim']:.4f}")
    click.echo(f"wrote {out} (lambda={model.lmbda:g}, validation bpp {model.metadata['val_bpp']:.5f})")


@cli.command("eval")
@click.argument("originals", type=click.Path(path_type=Path))
@click.argument("reconstructions", type=click.Path(path_type=Path), required=False)
@click.option("--end-to-end", is_flag=True, help="Compress and reconstruct the originals instead.")
@click.option("--out", type=click.Path(path_type=Path), required=True, help="Output directory.")
@click.option("--metrics", "metric_list", default=",".join(METRICS), show_default=True)
@click.option("--features", type=click.Choice(["random", "inception"]), default="random", show_default=True)
@click.option("--containers", type=click.Path(path_type=Path), default=None,
              help="Directory of .tsk files giving the rate of each reconstruction.")
@click.option("--modes", default="pic,pics", show_default=True, help="Modes for --end-to-end.")
@_codec_options
@_backend_options
@click.option("--no-plots", is_flag=True)
def eval_cmd(originals: Path, reconstructions: Optional[Path], end_to_end: bool, out: Path, metric_list: str,
             features: str, containers: Optional[Path], modes: str, backend: str, endpoint: Optional[str],
             seed: int, no_plots: bool, **kw):
    """Score reconstructions (or a full encode/decode run) and write CSV, summary and plots."""
    metrics = [m.strip() for m in metric_list.split(",") if m.strip()]
    bad = sorted(set(metrics) - set(METRICS))
    if bad:
        raise ConfigError(f"unknown metrics: {', '.join(bad)}")
    extractor = InceptionFeatures() if features == "inception" else RandomProjectionFeatures()
    orig_files = _inputs(originals)
    if end_to_end:
        mode_list = [Mode.parse(m.strip()) for m in modes.split(",") if m.strip()]
        if Mode.PICS in mode_list and not kw["sketch_model"]:
            raise ConfigError("PICS evaluation requires --sketch-model")
        settings = _settings_from(kw)
        dataset = [(p.stem, load_image(p)) for p in orig_files]
        result = run_benchmark(dataset, settings, _backend(backend, endpoint), mode_list, metrics,
                               extractor, seed, out, plots=not no_plots)
    else:
        if reconstructions is None:
            raise ConfigError("give a reconstructions directory or --end-to-end")
        rec_files = {p.stem: p for p in _inputs(reconstructions)}
        orig_map = {p.stem: p for p in orig_files}
        missing = sorted(set(orig_map) ^ set(rec_files))
        if missing:
            raise DataError(f"original/reconstruction sets differ; unmatched ids: {', '.join(missing)}")
        embedder = ToyEmbedder() if kw["embedder"] == "toy" else _settings_from(kw).embedder
        bits = {}
        if containers is not None:
            for stem in orig_map:
                f = containers / (stem + CONTAINER_SUFFIX)
                if f.is_file():
                    bits[stem] = 8 * len(f.read_bytes())
        pairs = [(s, load_image(orig_map[s]), load_image(rec_files[s])) for s in sorted(orig_map)]
        result = evaluate_pairs(pairs, embedder, metrics, extractor, bits, out_dir=out, plots=not no_plots)
    for name, entry in result.summary["modes"].items():
        fid_s = "n/a" if entry["fid"] is None else f"{entry['fid']:.6g}"
        kid_s = "n/a" if entry["kid"] is None else f"{entry['kid']:.6g}"
        click.echo(f"{name}: fid={fid_s} kid={kid_s} n={entry['n_reconstructed']}")
    if result.failures:
        click.echo(f"{len(result.failures)} failures recorded in {result.summary_path}", err=True)
    click.echo(f"wrote {result.csv_path}")


def main() -> None:  # pragma: no cover - console entry point
    cli(prog_name="promptcodec")


__all__ = ["cli", "main", "atomic_write", "build_settings", "load_config", "parse_float_list"]
