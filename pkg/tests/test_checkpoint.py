import struct
import warnings
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from anomem.checkpoint import (
    HASH_BYTES,
    ConfigMismatchWarning,
    ModelState,
    decode_container,
    encode_container,
    load_container,
    load_dataset,
    load_model,
    save_container,
    save_dataset,
    save_model,
)
from anomem.config import ExperimentConfig
from anomem.data import SyntheticSpec, gen_synthetic
from anomem.detect import ScaleHead
from anomem.encoder import encoder_init
from anomem.errors import FormatError, ValidationError
from anomem.train import build_memories

SMALL = {
    "encoder.input_shape": [8, 8, 3],
    "encoder.stages": [{"channels": 4, "blocks": 1, "stride": 2}, {"channels": 6, "blocks": 1, "stride": 2}],
    "encoder.embed_dim": 6,
    "memory.sizes": [3, 2],
}


def _model(seed=0, heads=True):
    cfg = ExperimentConfig().replace(**SMALL)
    enc = encoder_init(cfg.encoder, seed)
    mems = build_memories(cfg, seed)
    rng = np.random.default_rng(seed)
    hs = [ScaleHead.init((4, 4, 4), 2, 3, rng), ScaleHead.init((6,), 1, 3, rng)] if heads else []
    if hs:
        hs[0].standardize_from(rng.normal(size=(5, 16)))
    opt = [rng.normal(size=p.shape) for p in enc.parameters()]
    return ModelState(cfg, enc, mems, hs, opt)


def _arrays():
    rng = np.random.default_rng(0)
    return {
        "a": rng.normal(size=(2, 3)),
        "b": np.arange(5, dtype=np.int64),
        "c": rng.integers(0, 256, size=(2, 2, 2), dtype=np.uint8),
        "scalar": np.array(3.5),
    }


def test_container_round_trip_bit_exact():
    arrays = _arrays()
    h = bytes(range(32))
    out, got_hash = decode_container(encode_container(arrays, h))
    assert got_hash == h and list(out) == list(arrays)
    for k in arrays:
        assert out[k].dtype == arrays[k].dtype
        assert out[k].tobytes() == arrays[k].tobytes()


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4), elements=finite))
def test_float_payloads_round_trip(arr):
    out, _ = decode_container(encode_container({"x": arr}))
    assert out["x"].shape == arr.shape and out["x"].tobytes() == arr.tobytes()


def test_header_layout():
    buf = encode_container({"x": np.ones(2)}, bytes(HASH_BYTES))
    assert buf[:4] == b"ANOM"
    assert struct.unpack("<I", buf[4:8])[0] == 1
    assert struct.unpack("<I", buf[40:44])[0] == 1
    assert struct.unpack("<I", buf[-4:])[0] == zlib.crc32(buf[:-4])


def test_tampered_payload_fails_checksum():
    buf = bytearray(encode_container(_arrays()))
    buf[-10] ^= 0xFF
    with pytest.raises(FormatError, match="checksum") as exc:
        decode_container(bytes(buf))
    assert exc.value.offset == len(buf) - 4


@pytest.mark.parametrize(
    "mutate,offset",
    [
        (lambda b: b"XXXX" + b[4:], 0),
        (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], 4),
        (lambda b: b[:30], 8),  # start of the cut-off hash field
    ],
)
def test_corrupt_header_reports_offset(mutate, offset):
    buf = encode_container(_arrays())
    with pytest.raises(FormatError) as exc:
        decode_container(mutate(buf))
    assert exc.value.offset == offset


def test_truncated_payload():
    buf = encode_container(_arrays())
    with pytest.raises(FormatError):
        decode_container(buf[:-20])


def test_non_finite_rejected():
    with pytest.raises(ValidationError):
        encode_container({"x": np.array([np.nan])})


def test_hash_mismatch_warns_but_loads(tmp_path):
    path = tmp_path / "c.bin"
    save_container(path, {"x": np.ones(1)}, bytes(32))
    with pytest.warns(ConfigMismatchWarning):
        arrays, _ = load_container(path, bytes([1] * 32))
    assert arrays["x"][0] == 1.0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        load_container(path, bytes(32))


def test_model_save_load_save_identical(tmp_path):
    state = _model()
    save_model(tmp_path / "a.ckpt", state)
    loaded = load_model(tmp_path / "a.ckpt")
    save_model(tmp_path / "b.ckpt", loaded)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert loaded.config == state.config
    for p, q in zip(state.encoder.parameters(), loaded.encoder.parameters()):
        assert p.data.tobytes() == q.data.tobytes()
    for m, n in zip(state.memories, loaded.memories):
        assert m.weights.data.tobytes() == n.weights.data.tobytes()
        assert (m.beta, m.max_iters, m.tol) == (n.beta, n.max_iters, n.tol)
    assert [h.grid for h in loaded.heads] == [2, 1]
    np.testing.assert_array_equal(loaded.heads[0].shift, state.heads[0].shift)
    np.testing.assert_array_equal(loaded.heads[0].scale, state.heads[0].scale)
    assert loaded.heads[1].shift is None
    for v, w in zip(state.optimizer, loaded.optimizer):
        assert v.tobytes() == w.tobytes()


def test_model_without_heads(tmp_path):
    save_model(tmp_path / "m.ckpt", _model(heads=False))
    assert load_model(tmp_path / "m.ckpt").heads == []


def test_model_config_mismatch_warns(tmp_path):
    save_model(tmp_path / "m.ckpt", _model())
    other = ExperimentConfig().replace(**SMALL, seed=5)
    with pytest.warns(ConfigMismatchWarning):
        load_model(tmp_path / "m.ckpt", other)


def test_model_missing_entry(tmp_path):
    save_container(tmp_path / "m.ckpt", {"x": np.ones(1)})
    with pytest.raises(FormatError):
        load_model(tmp_path / "m.ckpt")


def test_dataset_round_trip(tmp_path):
    data = gen_synthetic(SyntheticSpec(per_class=5, image_size=8), 0)
    save_dataset(tmp_path / "d.bin", data)
    back = load_dataset(tmp_path / "d.bin")
    assert back.images.tobytes() == data.images.tobytes()
    np.testing.assert_array_equal(back.labels, data.labels)
    np.testing.assert_array_equal(back.class_ids, data.class_ids)
