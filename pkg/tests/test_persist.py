import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from sotaseg import persist
from sotaseg.base import BaseSegmentor
from sotaseg.decoder import LoRAConfig
from sotaseg.pipeline import ModelConfig, PipelineBundle, load_base, save_base
from sotaseg.prompt import MorphologyConfig

shapes = hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5)


@given(hnp.arrays(np.float32, shapes, elements=st.floats(width=32, allow_nan=True, allow_infinity=True)))
@settings(max_examples=60, deadline=None)
def test_f32_round_trip_bit_exact(arr):
    back = persist.decode_tensor(persist.encode_tensor(arr))
    assert back.dtype == np.float32 and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


@given(hnp.arrays(np.uint8, shapes))
@settings(max_examples=40, deadline=None)
def test_u8_round_trip_bit_exact(arr):
    back = persist.decode_tensor(persist.encode_tensor(arr))
    assert back.dtype == np.uint8 and back.tobytes() == arr.tobytes()


def test_header_layout():
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    blob = persist.encode_tensor(arr)
    assert blob[:4] == b"SOTA"
    version, tag, rank = struct.unpack_from("<HBB", blob, 4)
    assert (version, tag, rank) == (1, 0, 2)
    assert struct.unpack_from("<2I", blob, 8) == (2, 3)
    assert len(blob) == 8 + 8 + 6 * 4
    assert np.frombuffer(blob[16:], "<f4").tolist() == list(range(6))


def test_big_endian_input_is_stored_little_endian():
    arr = np.arange(4, dtype=">f4")
    with pytest.raises(persist.FormatError):
        persist.encode_tensor(arr)  # only native float32 / uint8 are accepted
    assert persist.encode_tensor(arr.astype(np.float32))[8 + 4:] == np.arange(4, dtype="<f4").tobytes()


@pytest.mark.parametrize("blob", [b"", b"NOPE\x01\x00\x00\x00", b"SOTA\x09\x00\x00\x00"])
def test_corrupt_headers_raise(blob):
    with pytest.raises(persist.FormatError):
        persist.decode_tensor(blob)


def test_truncated_payload_raises():
    blob = persist.encode_tensor(np.zeros((2, 2), np.float32))
    with pytest.raises(persist.FormatError, match="payload"):
        persist.decode_tensor(blob[:-1])


def test_unsupported_dtype():
    with pytest.raises(persist.FormatError):
        persist.encode_tensor(np.zeros(3, np.int64))


def test_config_hash_is_order_independent():
    assert persist.config_hash({"a": 1, "b": [1, 2]}) == persist.config_hash({"b": [1, 2], "a": 1})
    assert persist.config_hash({"a": 1}) != persist.config_hash({"a": 2})


def _tiny_bundle(lora: bool):
    torch.manual_seed(0)
    base = BaseSegmentor(6, (8, 8, 8, 8, 8))
    cfg = ModelConfig(feature_dim=16, morphology=MorphologyConfig(3, 1), decoder_heads=2)
    bundle = PipelineBundle.build(base, cfg, LoRAConfig() if lora else None)
    # give adapters non-zero up weights so they matter
    with torch.no_grad():
        for a in bundle.head.decoder.adapters().values():
            a.lora_up.normal_(0, 0.1)
    return bundle


@pytest.mark.parametrize("lora", [True, False])
def test_checkpoint_round_trip_zero_ulp(tmp_path, lora):
    bundle = _tiny_bundle(lora)
    images = torch.rand(2, 3, 32, 32)
    before, inter_before = bundle.run(images)
    bundle.save(tmp_path / "m.ckpt", step=3, lora=LoRAConfig() if lora else None)
    loaded = PipelineBundle.load(tmp_path / "m.ckpt")
    after, inter_after = loaded.run(images)
    assert torch.equal(before, after)
    for k in inter_before:
        if inter_before[k] is not None:
            assert torch.equal(inter_before[k], inter_after[k]), k


def test_adapters_stored_separately(tmp_path):
    bundle = _tiny_bundle(True)
    bundle.save(tmp_path / "m.ckpt", lora=LoRAConfig())
    weights, adapters, meta = persist.load_checkpoint(tmp_path / "m.ckpt")
    assert adapters and all("lora_" in k for k in adapters)
    assert not any("lora_" in k for k in weights)
    assert meta["adapter_manifest"] == sorted(adapters)
    assert meta["component"] == "pipeline" and "config_hash" in meta


def test_checkpoint_bytes_deterministic(tmp_path):
    bundle = _tiny_bundle(True)
    bundle.save(tmp_path / "a.ckpt")
    bundle.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_base_checkpoint_round_trip(tmp_path):
    torch.manual_seed(1)
    model = BaseSegmentor(6, (8, 8, 8, 8, 8)).eval()
    x = torch.rand(1, 3, 32, 32)
    save_base(tmp_path / "b.ckpt", model)
    back = load_base(tmp_path / "b.ckpt")
    with torch.no_grad():
        assert torch.equal(model(x), back(x))


def test_corrupt_checkpoint(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"not a zip")
    with pytest.raises(persist.FormatError):
        persist.load_checkpoint(tmp_path / "x.ckpt")
    with pytest.raises(FileNotFoundError):
        persist.load_checkpoint(tmp_path / "missing.ckpt")


def test_png_unit_float_exact(tmp_path):
    levels = np.arange(256, dtype=np.uint8).reshape(1, 16, 16).repeat(3, 0)
    img = persist.unit_float(levels)
    persist.save_png(tmp_path / "x.png", img)
    assert persist.load_png(tmp_path / "x.png", rgb=True).tobytes() == img.tobytes()
