"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are repeated in the terminal summary under "acceptance criteria".
Set PROMPTCODEC_UPDATE_GOLDEN=1 to regenerate the golden benchmark files.
"""
import csv
import itertools
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from PIL import Image as PILImage

from promptcodec.core import (
    Container,
    Image,
    Mode,
    TokenCoding,
    TokenSequence,
    compute_bpp,
    read_container,
    write_container,
)
from promptcodec.decoder import MockBackend, sketch_correlation
from promptcodec.errors import CorruptionError
from promptcodec.evaluation import CSV_COLUMNS, d_clip_from_embeddings, fid, kid, run_benchmark
from promptcodec.pipeline import CodecSettings, decompress, pack
from promptcodec.prompt_inversion import PiConfig, ToyEmbedder, invert_prompt
from promptcodec.sketch.ntc import NtcTrainConfig, _varint, train_ntc
from promptcodec.sketch.synthetic import synthetic_images, synthetic_sketches
from promptcodec.token_codec import decode_tokens, encode_tokens
from promptcodec.tokenizer import SyllableTokenizer

GOLDEN = Path(__file__).parent / "golden"


# -- 1. PIC rate bound ------------------------------------------------------------------

def test_pic_rate_bound(criterion):
    t0 = time.perf_counter()
    tokens = TokenSequence(tuple(range(49392, 49408)), 49408)
    payload = encode_tokens(tokens, TokenCoding.FIXED)
    blob = write_container(Mode.PIC, 512, 768, payload.coding, payload.data)
    bits = 8 * len(blob)
    bpp = compute_bpp(bits, 512, 768)
    elapsed = time.perf_counter() - t0
    ok = payload.bit_count == 16 * 16 and bits == 8 * (11 + 4 + 32 + 4) and bpp <= 0.003 and elapsed < 1.0
    criterion("PIC rate bound", ok, f"{bits} bits on 512x768 = {bpp:.6f} bpp (<= 0.003) in {elapsed:.3f}s")


# -- 2. prompt-inversion oracle ------------------------------------------------------------

def _exhaustive_optimum(codebook, target, length):
    best = -np.inf
    for ids in itertools.product(range(len(codebook)), repeat=length):
        m = codebook[list(ids)].mean(0)
        best = max(best, m @ target / (np.linalg.norm(m) * np.linalg.norm(target)))
    return best


def test_prompt_inversion_oracle(criterion):
    blank = Image(np.zeros((8, 8, 3)))
    t0 = time.perf_counter()
    hits, above = 0, 0
    for k in range(100):
        rng = np.random.default_rng(10_000 + k)
        vocab, length = int(rng.integers(2, 9)), int(rng.integers(1, 3))
        codebook, target = rng.standard_normal((vocab, 4)), rng.standard_normal(4)
        emb = ToyEmbedder(codebook=codebook, image_encoder=lambda im, t=target: t)
        res = invert_prompt(blank, emb, PiConfig(prompt_length=length, step_count=200, restart_count=8, random_seed=k))
        optimum = _exhaustive_optimum(codebook, target, length)
        hits += abs(res.objective - optimum) <= 1e-6
        above += res.objective > optimum + 1e-9
    elapsed = time.perf_counter() - t0
    ok = hits >= 95 and above == 0 and elapsed < 300
    criterion("prompt-inversion oracle", ok, f"{hits}/100 instances at the exhaustive optimum (>= 95) in {elapsed:.1f}s")


# -- 3. lossless guarantees --------------------------------------------------------------

def test_lossless_roundtrips(criterion):
    rng = np.random.default_rng(2024)
    tokenizers = {v: SyllableTokenizer(v) for v in (2, 50, 1000, 49408)}
    failures = {"fixed": 0, "text": 0, "container": 0}
    for _ in range(1000):
        vocab = int(rng.integers(1, 49409))
        seq = TokenSequence(tuple(rng.integers(0, vocab, int(rng.integers(1, 65))).tolist()), vocab)
        p = encode_tokens(seq, TokenCoding.FIXED)
        failures["fixed"] += decode_tokens(p.data, p.coding, len(seq), vocab) != seq

        tv = int(rng.choice(list(tokenizers)))
        seq = TokenSequence(tuple(rng.integers(0, tv, int(rng.integers(1, 65))).tolist()), tv)
        p = encode_tokens(seq, TokenCoding.TEXT, tokenizers[tv])
        failures["text"] += decode_tokens(p.data, p.coding, len(seq), tv, tokenizers[tv]) != seq

        mode = Mode.PICS if rng.random() < 0.5 else Mode.PIC
        args = (mode, int(rng.integers(1, 65536)), int(rng.integers(1, 65536)),
                TokenCoding(int(rng.integers(0, 2))), rng.bytes(int(rng.integers(0, 80))),
                rng.bytes(int(rng.integers(0, 200))) if mode is Mode.PICS else None)
        failures["container"] += read_container(write_container(*args)) != Container(*args)

    reference = write_container(Mode.PICS, 512, 768, TokenCoding.FIXED, bytes(range(32)), rng.bytes(120))
    missed = 0
    for i in range(8 * len(reference)):
        bad = bytearray(reference)
        bad[i // 8] ^= 0x80 >> (i % 8)
        try:
            read_container(bytes(bad))
            missed += 1
        except CorruptionError:
            pass
    ok = not any(failures.values()) and missed == 0
    criterion("lossless guarantees", ok,
              f"1000 cases each, failures {failures}; {8 * len(reference) - missed}/{8 * len(reference)} bit flips detected")


# -- 4. sketch codec target --------------------------------------------------------------

DESK_SKETCHES = 500


@pytest.fixture(scope="module")
def desk_model():
    sketches = synthetic_sketches(DESK_SKETCHES, 128, 128, seed=0)
    config = NtcTrainConfig(lambdas=[2.0**k for k in range(-4, 5)], epochs=15, finetune_epochs=5, target_bpp=0.01)
    t0 = time.perf_counter()
    model = train_ntc(config, sketches)
    return model, sketches, time.perf_counter() - t0


def test_sketch_codec_target(criterion, desk_model):
    model, sketches, train_seconds = desk_model
    table = model.metadata["lambda_table"]
    in_band = [r["lmbda"] for r in table if 0.005 <= r["val_bpp"] <= 0.02]
    worst = -math.inf
    for i in model.metadata["val_indices"]:
        s = sketches[i]
        body_bits = 8 * (len(model.encode(s)) - len(_varint(s.height)) - len(_varint(s.width)))
        est = model.estimate_bits(s)
        worst = max(worst, body_bits - (est + 64 + 0.01 * est))
    n_val = len(model.metadata["val_indices"])
    ok = bool(in_band) and worst <= 0 and train_seconds < 8 * 3600
    criterion("sketch codec target", ok,
              f"lambdas {in_band} give validation bpp in [0.005, 0.02]; selected {model.lmbda:g} at "
              f"{model.metadata['val_bpp']:.4f} bpp; coded <= estimate + 64 + 1% on all {n_val} validation "
              f"sketches (worst margin {worst:.1f} bits); trained in {train_seconds:.0f}s")


# -- 5. metric correctness ---------------------------------------------------------------

def _brute_kid(a, b):
    d = a.shape[1]
    k = lambda x, y: (float(np.dot(x, y)) / d + 1.0) ** 3  # noqa: E731
    m, n = len(a), len(b)
    saa = sum(k(a[i], a[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    sbb = sum(k(b[i], b[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    sab = sum(k(a[i], b[j]) for i in range(m) for j in range(n) if i != j) / (m * (m - 1))
    return saa + sbb - 2 * sab


def test_metric_correctness(criterion):
    dclip = [d_clip_from_embeddings([1, 0], v) for v in ([1, 0], [0, 1], [-1, 0])]
    f1 = fid([[0.0], [2.0]], [[1.0], [3.0]])
    a, b = np.array([[2.0], [0.0]]), np.array([[1.0], [1.0]])
    k1, k1_oracle = kid(a, b), _brute_kid(a, b)
    feats = np.random.default_rng(0).normal(size=(30, 6))
    f0, k0 = fid(feats, feats), kid(feats, feats)
    ok = (dclip == [0.0, 1.0, 2.0] and abs(f1 - 1) <= 1e-9 and abs(k1 + 19) <= 1e-9
          and abs(k1_oracle + 19) <= 1e-9 and abs(f0) <= 1e-9 and abs(k0) <= 1e-9)
    criterion("metric correctness", ok,
              f"d_clip {dclip}; fid {f1:.12g}; kid {k1:.12g} (oracle {k1_oracle:.12g}); identical sets fid {f0:.2g} kid {k0:.2g}")


# -- 6. end-to-end mock pipeline -------------------------------------------------------------

def _end_to_end(images, settings, backend):
    out = []
    for i, img in enumerate(images):
        tokens = invert_prompt(img, settings.embedder, settings.pi).tokens
        for mode in (Mode.PIC, Mode.PICS):
            comp = pack(img, mode, settings, tokens)
            dec = decompress(comp.blob, settings, backend, seed=i)
            out.append((i, mode, comp.blob, dec))
    return out


def test_end_to_end_mock(criterion, desk_model):
    model = desk_model[0]
    settings = CodecSettings.toy(pi=PiConfig(step_count=100, restart_count=3), sketch_model=model)
    images = synthetic_images(10, 128, 128, seed=77)
    t0 = time.perf_counter()
    first = _end_to_end(images, settings, MockBackend())
    elapsed = time.perf_counter() - t0
    second = _end_to_end(images, settings, MockBackend())
    deterministic = all(a[2] == b[2] and np.array_equal(a[3].image.data, b[3].image.data) for a, b in zip(first, second))
    corr = [sketch_correlation(d.image, d.sketch) for _, m, _, d in first if m is Mode.PICS]
    bits = {(i, m): 8 * len(blob) for i, m, blob, _ in first}
    rate_order = all(bits[(i, Mode.PIC)] < bits[(i, Mode.PICS)] for i in range(len(images)))
    ok = deterministic and min(corr) > 0.5 and rate_order and elapsed < 120
    criterion("end-to-end mock pipeline", ok,
              f"deterministic={deterministic}; sketch correlation min {min(corr):.3f} median {np.median(corr):.3f} "
              f"(> 0.5); PIC < PICS bpp on {sum(bits[(i, Mode.PIC)] < bits[(i, Mode.PICS)] for i in range(10))}/10; "
              f"run {elapsed:.1f}s")


# -- 7. benchmark output schema (golden files) ------------------------------------------------

def _key_tree(obj):
    if isinstance(obj, dict):
        return {k: _key_tree(v) for k, v in sorted(obj.items())}
    if isinstance(obj, list):
        return [_key_tree(v) for v in obj[:1]]
    return type(obj).__name__


def _rows(path):
    with Path(path).open(newline="") as fh:
        return list(csv.reader(fh))


def _same_table(got, want):
    if len(got) != len(want) or got[0] != want[0]:
        return False
    for g_row, w_row in zip(got[1:], want[1:]):
        for g, w in zip(g_row, w_row):
            try:
                gf, wf = float(g), float(w)
            except ValueError:
                if g != w:
                    return False
                continue
            if not (gf == wf or math.isclose(gf, wf, rel_tol=1e-6, abs_tol=1e-9)):
                return False
    return True


def test_benchmark_golden(criterion, fast_settings, tmp_path):
    data = [(f"g{i}", im) for i, im in enumerate(synthetic_images(3, 64, 64, seed=31))]
    res = run_benchmark(data, fast_settings, MockBackend(), out_dir=tmp_path)
    summary = json.loads(res.summary_path.read_text())
    plots = {p.name: PILImage.open(p).size for p in sorted(res.plot_paths)}
    schema = {"summary": _key_tree(summary), "plots": plots}
    if os.environ.get("PROMPTCODEC_UPDATE_GOLDEN"):
        GOLDEN.mkdir(exist_ok=True)
        for name in ("results.csv", "breakdown.csv"):
            (GOLDEN / name).write_bytes((tmp_path / name).read_bytes())
        (GOLDEN / "schema.json").write_text(json.dumps(schema, indent=2, sort_keys=True) + "\n")
    want_schema = json.loads((GOLDEN / "schema.json").read_text())
    checks = {
        "results.csv": _same_table(_rows(tmp_path / "results.csv"), _rows(GOLDEN / "results.csv")),
        "breakdown.csv": _same_table(_rows(tmp_path / "breakdown.csv"), _rows(GOLDEN / "breakdown.csv")),
        "columns": tuple(_rows(tmp_path / "results.csv")[0]) == CSV_COLUMNS,
        "summary keys": schema["summary"] == want_schema["summary"],
        "plots": {k: list(v) for k, v in plots.items()} == want_schema["plots"],
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    criterion("benchmark output schema", ok,
              f"golden comparison of results.csv, breakdown.csv, summary keys and {len(plots)} plots"
              + (f"; mismatched: {failed}" if failed else ""))
