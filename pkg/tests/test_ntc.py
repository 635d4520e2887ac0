import logging

import numpy as np
import pytest
import torch

from promptcodec.core import SketchMap
from promptcodec.errors import DataError, DecodeError, FormatError, VersionError
from promptcodec.imageio import save_gray
from promptcodec.sketch.msssim import ms_ssim
from promptcodec.sketch.ntc import (
    NtcModel,
    NtcTrainConfig,
    SketchNTC,
    decode_sketch,
    encode_sketch,
    load_sketch_dir,
    train_ntc,
)
from promptcodec.sketch.synthetic import synthetic_sketches


def _tiny_config(**kw):
    base = dict(lambdas=[0.5, 2.0], epochs=1, batch_size=4, hidden=8, crop_size=32, seed=3)
    base.update(kw)
    return NtcTrainConfig(**base)


def test_training_is_deterministic():
    sk = synthetic_sketches(8, 32, 32, seed=1)
    a = train_ntc(_tiny_config(), sk)
    b = train_ntc(_tiny_config(), sk)
    assert a.to_bytes() == b.to_bytes()
    assert [list(f) for f in a.tables.freqs] == [list(f) for f in b.tables.freqs]


def test_lambda_table_and_selection():
    sk = synthetic_sketches(8, 32, 32, seed=1)
    m = train_ntc(_tiny_config(target_bpp=10.0), sk)
    table = m.metadata["lambda_table"]
    assert [r["lmbda"] for r in table] == [0.5, 2.0]
    nearest = min(table, key=lambda r: abs(r["val_bpp"] - 10.0))
    assert m.lmbda == nearest["lmbda"]
    assert m.metadata["target_bpp"] == 10.0 and m.metadata["distortion"] == "ms-ssim"
    assert len(m.metadata["val_indices"]) == m.metadata["val_count"] == 2


def test_single_lambda_returned_with_warning(caplog):
    sk = synthetic_sketches(4, 32, 32, seed=2)
    with caplog.at_level(logging.WARNING):
        m = train_ntc(_tiny_config(lambdas=[3.0]), sk)
    assert m.lmbda == 3.0
    assert any("selected lambda" in r.message for r in caplog.records)


def test_training_errors(tmp_path):
    with pytest.raises(DataError):
        train_ntc(_tiny_config(), [])
    with pytest.raises(DataError):
        train_ntc(_tiny_config(dataset=str(tmp_path)))
    with pytest.raises(DataError):
        NtcTrainConfig(lambdas=[0.0])
    with pytest.raises(DataError):
        NtcTrainConfig(target_bpp=0)
    with pytest.raises(DataError):
        NtcTrainConfig(distortion="mse")


def test_single_image_overfits():
    sk = synthetic_sketches(1, 64, 64, seed=3)
    cfg = NtcTrainConfig(lambdas=[1024.0], epochs=800, batch_size=1, learning_rate=3e-3, crop_size=64)
    m = train_ntc(cfg, sk)
    assert ms_ssim(sk[0], decode_sketch(encode_sketch(sk[0], m), m)) > 0.99


def test_tables_valid(small_model):
    t = small_model.tables
    assert t.channels == small_model.network.latent
    for c in range(t.channels):
        p = t.probabilities(c)
        assert abs(p.sum() - 1) <= 1e-6 and p.min() > 0


def test_coded_length_tracks_estimate(small_model):
    sketches = synthetic_sketches(100, 48, 56, seed=21)
    for s in sketches:
        body_bits = 8 * len(small_model.encode(s)) - 16  # two one-byte size varints
        est = small_model.estimate_bits(s)
        assert est >= 0
        assert body_bits <= est + 64 + 0.01 * est


def test_roundtrip_deterministic_and_shape(small_model):
    s = synthetic_sketches(1, 50, 70, seed=4)[0]
    a, b = encode_sketch(s, small_model), encode_sketch(s, small_model)
    assert a == b
    r1, r2 = decode_sketch(a, small_model), decode_sketch(a, small_model)
    assert r1.data.shape == (50, 70) and np.array_equal(r1.data, r2.data)
    assert r1.data.min() >= 0 and r1.data.max() <= 1


def test_latents_are_integers(small_model):
    s = synthetic_sketches(1, 32, 32, seed=4)[0]
    y = small_model.latents(s)
    assert y.dtype == np.int64 and y.shape == (small_model.network.latent, 2, 2)


def test_blank_sketch_costs_no_more_than_noise(small_model, rng):
    blank = SketchMap(np.zeros((64, 64)))
    noise = SketchMap(rng.uniform(0, 1, (64, 64)))
    assert len(encode_sketch(blank, small_model)) <= len(encode_sketch(noise, small_model))


def test_quality_close_to_recorded_validation(small_model):
    sk = synthetic_sketches(48, 64, 64, seed=11)  # the small_model training set
    val = [sk[i] for i in small_model.metadata["val_indices"]]
    q = np.mean([ms_ssim(s, decode_sketch(encode_sketch(s, small_model), small_model)) for s in val])
    assert q >= small_model.metadata["val_ms_ssim"] - 0.05


def test_decode_errors(small_model):
    s = synthetic_sketches(1, 40, 40, seed=5)[0]
    data = encode_sketch(s, small_model)
    with pytest.raises(DecodeError):
        decode_sketch(b"", small_model)
    with pytest.raises(DecodeError):
        decode_sketch(data[:3], small_model)
    with pytest.raises(DecodeError):
        decode_sketch(data + bytes(16), small_model)
    with pytest.raises(DecodeError):
        decode_sketch(b"\x00\x05", small_model)


def test_foreign_payload_never_crashes(small_model):
    other = NtcModel(SketchNTC(hidden=8, latent=small_model.network.latent), 1.0)
    s = synthetic_sketches(1, 32, 32, seed=6)[0]
    payload = encode_sketch(s, other)
    try:
        out = decode_sketch(payload, small_model)
    except DecodeError:
        return
    assert out.data.shape == (32, 32)


def test_serialization_roundtrip(small_model, tmp_path):
    path = tmp_path / "m.ntc"
    small_model.save(path)
    loaded = NtcModel.load(path)
    s = synthetic_sketches(1, 48, 48, seed=8)[0]
    assert encode_sketch(s, loaded) == encode_sketch(s, small_model)
    assert loaded.lmbda == small_model.lmbda
    assert loaded.metadata == small_model.metadata
    assert loaded.to_bytes() == small_model.to_bytes()


def test_serialization_errors(small_model):
    blob = small_model.to_bytes()
    with pytest.raises(FormatError):
        NtcModel.from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(VersionError):
        NtcModel.from_bytes(blob[:4] + b"\x09" + blob[5:])
    with pytest.raises(FormatError):
        NtcModel.from_bytes(blob[:-5])
    with pytest.raises(FormatError):
        NtcModel.from_bytes(blob + b"\x00")


def test_load_sketch_dir(tmp_path):
    for i, s in enumerate(synthetic_sketches(3, 16, 16, seed=0)):
        save_gray(s.data, tmp_path / f"s{i}.png")
    (tmp_path / "notes.txt").write_text("skip me")
    loaded = load_sketch_dir(tmp_path)
    assert len(loaded) == 3 and loaded[0].data.shape == (16, 16)


def test_forward_uses_noise_proxy():
    torch.manual_seed(0)
    net = SketchNTC(hidden=8, latent=4)
    x = torch.rand(1, 1, 32, 32)
    a = net(x, torch.Generator().manual_seed(0))
    b = net(x, torch.Generator().manual_seed(1))
    assert a[0].shape == x.shape and torch.all(a[1] > 0)
    assert not torch.equal(a[1], b[1])
