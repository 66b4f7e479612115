import io
import struct

import numpy as np
import pytest

from gridkie.model import (
    CHECKPOINT_MAGIC,
    CheckpointError,
    NetConfig,
    TokenGridNet,
    load_checkpoint,
    save_checkpoint,
)
from gridkie.nn.optim import Adam
from gridkie.nn.serialize import TensorFormatError, read_tensor, write_tensor

SMALL = dict(vocab_size=120, embedding_dim=6, trunk_channels=8,
             shortcut_channels=4, num_classes=4, aspp_rates=(2,))


# --- tensor records ---------------------------------------------------------

def test_tensor_round_trip_dtypes():
    buf = io.BytesIO()
    arrays = {
        "f32": np.arange(6, dtype=np.float32).reshape(2, 3),
        "f64": np.linspace(0, 1, 5),
        "i64": np.array([[-(2**40)], [7]], dtype=np.int64),
        "scalar": np.float32(3.5).reshape(()),
    }
    for name, arr in arrays.items():
        write_tensor(buf, name, np.asarray(arr))
    buf.seek(0)
    for name, arr in arrays.items():
        got_name, got = read_tensor(buf)
        assert got_name == name
        assert got.dtype == np.asarray(arr).dtype
        np.testing.assert_array_equal(got, arr)


def test_tensor_golden_bytes():
    # pin the on-disk layout: <u4 name len, utf-8 name, u1 dtype code,
    # <i8 rank, <i8 extents, raw little-endian values
    buf = io.BytesIO()
    write_tensor(buf, "t", np.array([1.0, 2.0], dtype=np.float32))
    want = (
        struct.pack("<I", 1) + b"t" + struct.pack("<B", 0)
        + struct.pack("<q", 1) + struct.pack("<q", 2)
        + struct.pack("<2f", 1.0, 2.0)
    )
    assert buf.getvalue() == want


def test_tensor_truncation_detected():
    buf = io.BytesIO()
    write_tensor(buf, "w", np.ones(4, dtype=np.float64))
    data = buf.getvalue()
    with pytest.raises(TensorFormatError, match="truncated"):
        read_tensor(io.BytesIO(data[:-3]))


def test_tensor_bad_dtype_code():
    buf = io.BytesIO()
    write_tensor(buf, "w", np.ones(2, dtype=np.float32))
    data = bytearray(buf.getvalue())
    data[4 + 1] = 9  # dtype code byte sits right after the name
    with pytest.raises(TensorFormatError, match="dtype"):
        read_tensor(io.BytesIO(bytes(data)))


def test_tensor_rejects_unsupported_input():
    with pytest.raises(TensorFormatError):
        write_tensor(io.BytesIO(), "c", np.ones(2, dtype=np.complex128))
    with pytest.raises(TensorFormatError):
        write_tensor(io.BytesIO(), "", np.ones(2, dtype=np.float32))


# --- checkpoint round trips -------------------------------------------------

def test_checkpoint_round_trip_is_bitwise(tmp_path):
    model = TokenGridNet(NetConfig(**SMALL), seed=4)
    ids = np.random.default_rng(0).integers(0, 120, size=(1, 8, 8))
    before = model.forward(ids)
    p = tmp_path / "m.ckpt"
    save_checkpoint(str(p), model)
    loaded, classes, opt_state = load_checkpoint(str(p))
    assert classes is None and opt_state is None
    assert loaded.config == model.config
    np.testing.assert_array_equal(loaded.forward(ids), before)


def test_checkpoint_rewrite_is_byte_stable(tmp_path):
    model = TokenGridNet(NetConfig(**SMALL), seed=4)
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(str(a), model)
    loaded, _, _ = load_checkpoint(str(a))
    save_checkpoint(str(b), loaded)
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_carries_classes_and_optimizer(tmp_path):
    model = TokenGridNet(NetConfig(**SMALL), seed=4)
    opt = Adam(model.params())
    for p in model.params():
        p.grad[...] = 0.01
    opt.step(1e-3)
    classes = ["Bg", "A", "B", "C"]
    path = tmp_path / "m.ckpt"
    save_checkpoint(str(path), model, classes=classes, optimizer_state=opt.state_dict())
    _, got_classes, got_state = load_checkpoint(str(path))
    assert got_classes == classes
    assert got_state["t"] == 1
    for name, arr in opt.state_dict()["m"].items():
        np.testing.assert_array_equal(got_state["m"][name], arr)
    # restored state drives an identical continued run
    fresh = Adam(TokenGridNet(NetConfig(**SMALL), seed=4).params())
    fresh.load_state_dict(got_state)


def test_checkpoint_class_count_must_match(tmp_path):
    model = TokenGridNet(NetConfig(**SMALL), seed=0)
    with pytest.raises(CheckpointError):
        save_checkpoint(str(tmp_path / "m.ckpt"), model, classes=["Bg", "A"])
    # a doctored header with the wrong class count is rejected at load
    p = tmp_path / "ok.ckpt"
    save_checkpoint(str(p), model, classes=["Bg", "A", "B", "C"])
    data = p.read_bytes()
    bad = data.replace(b'["Bg", "A", "B", "C"]', b'["Bg", "A", "B"]')
    assert bad != data
    p.write_bytes(bad)
    with pytest.raises(CheckpointError):
        load_checkpoint(str(p))


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "m.ckpt"
    model = TokenGridNet(NetConfig(**SMALL), seed=0)
    save_checkpoint(str(p), model)
    data = bytearray(p.read_bytes())
    data[:4] = b"NOPE"
    p.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(str(p))


def test_checkpoint_bad_version(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(str(p), TokenGridNet(NetConfig(**SMALL), seed=0))
    data = bytearray(p.read_bytes())
    struct.pack_into("<I", data, 4, 99)
    p.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(str(p))


def test_checkpoint_truncation(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(str(p), TokenGridNet(NetConfig(**SMALL), seed=0))
    p.write_bytes(p.read_bytes()[:-20])
    with pytest.raises(CheckpointError):
        load_checkpoint(str(p))


def test_checkpoint_trailing_bytes(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(str(p), TokenGridNet(NetConfig(**SMALL), seed=0))
    p.write_bytes(p.read_bytes() + b"xx")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(str(p))


def test_checkpoint_missing_file():
    with pytest.raises(CheckpointError):
        load_checkpoint("/nonexistent/path.ckpt")


def test_checkpoint_size_tracks_param_count(tmp_path):
    # float32 storage: file size is within a few KB of 4 bytes per parameter
    model = TokenGridNet(NetConfig(**SMALL), seed=0)
    p = tmp_path / "m.ckpt"
    save_checkpoint(str(p), model)
    payload = 4 * model.param_count()
    assert payload < p.stat().st_size < payload + 16384


def test_default_checkpoint_is_about_53mb(tmp_path):
    model = TokenGridNet(NetConfig(), seed=0)
    p = tmp_path / "big.ckpt"
    save_checkpoint(str(p), model)
    size = p.stat().st_size
    assert 4 * 13_252_617 < size < 4 * 13_252_617 * 1.01
