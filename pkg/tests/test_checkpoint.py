import struct
import zlib

import numpy as np
import pytest

from burnseg.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from burnseg.errors import CheckpointFormatError
from burnseg.tensor import Rng
from burnseg.training import Split, TrainConfig, TrainState, fit
from burnseg.unet import UNetConfig, build


def tiny_split(seed, n=6, hw=16):
    gen = np.random.default_rng(seed)
    x = gen.random((n, 4, hw, hw)).astype(np.float32)
    y = (x[:, 3:4] < 0.4).astype(np.float32)
    return Split(x, y)


def tiny_setup(seed=0, epochs=4):
    cfg = TrainConfig(lr=1e-3, epochs=epochs, batch_train=4, batch_val=4, seed=seed)
    model = build(UNetConfig(depth=1, base_width=4, dropout_p=0.2), Rng(seed))
    return model, cfg, tiny_split(seed), tiny_split(seed + 100, n=3)


def metrics(history):
    return [(r.epoch, r.train_loss, r.val_loss, r.train_pixel_acc, r.val_pixel_acc, r.lr_in_effect)
            for r in history.records]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    model, cfg, train, val = tiny_setup(epochs=2)
    state = fit(model, train, val, cfg, out_dir=out)
    return out, model, state


def test_files_written(trained):
    out, _, state = trained
    assert (out / "best.amzs").exists() and (out / "last.amzs").exists()
    assert (out / "history.csv").read_text().splitlines()[0] == "epoch,train_loss,val_loss,train_acc,val_acc,lr"
    assert len(state.history) == 2


def test_save_load_save_byte_identical(trained, tmp_path):
    out, _, _ = trained
    model, state, history = load_checkpoint(out / "last.amzs")
    save_checkpoint(tmp_path / "again.amzs", model, state)
    assert (tmp_path / "again.amzs").read_bytes() == (out / "last.amzs").read_bytes()
    assert len(history) == 2


def test_round_trip_restores_state(trained):
    out, model, state = trained
    loaded, lstate, _ = load_checkpoint(out / "last.amzs")
    ref = model.state_arrays()
    for k, v in loaded.state_arrays().items():
        assert v.tobytes() == ref[k].tobytes(), k
    assert lstate.adam.t == state.adam.t
    assert lstate.lr == state.lr
    assert lstate.config == state.config
    assert lstate.shuffle_rng.get_state() == state.shuffle_rng.get_state()
    assert loaded.dropout_rng.get_state() == model.dropout_rng.get_state()


def test_resume_matches_uninterrupted(tmp_path):
    model, cfg, train, val = tiny_setup(epochs=4)
    full = fit(model, train, val, cfg)

    model, cfg, train, val = tiny_setup(epochs=4)
    fit(model, train, val, cfg, out_dir=tmp_path, epochs=2)
    model2, state2, _ = load_checkpoint(tmp_path / "last.amzs")
    resumed = fit(model2, train, val, cfg, state=state2, out_dir=tmp_path, epochs=1)
    assert metrics(resumed.history) == metrics(full.history)[:3]


def test_identical_runs_identical_csv(tmp_path):
    for name in ("a", "b"):
        model, cfg, train, val = tiny_setup(seed=3, epochs=3)
        fit(model, train, val, cfg, out_dir=tmp_path / name)
    assert (tmp_path / "a/history.csv").read_bytes() == (tmp_path / "b/history.csv").read_bytes()


def _corrupted(src, dst, edit):
    buf = bytearray(src.read_bytes())
    edit(buf)
    dst.write_bytes(bytes(buf))
    return dst


def test_flipped_magic_rejected(trained, tmp_path):
    out, _, _ = trained

    def flip(buf):
        buf[0] ^= 0xFF

    path = _corrupted(out / "last.amzs", tmp_path / "bad.amzs", flip)
    with pytest.raises(CheckpointFormatError, match="offset 0"):
        load_checkpoint(path)


def test_bad_version_rejected(trained, tmp_path):
    out, _, _ = trained

    def bump(buf):
        buf[4:6] = struct.pack("<H", 99)

    with pytest.raises(CheckpointFormatError, match="version 99 at offset 4"):
        load_checkpoint(_corrupted(out / "last.amzs", tmp_path / "bad.amzs", bump))


@pytest.mark.parametrize("keep", [3, 12, 200, -9])
def test_truncation_rejected_with_offset(trained, tmp_path, keep):
    out, _, _ = trained
    raw = (out / "last.amzs").read_bytes()
    (tmp_path / "cut.amzs").write_bytes(raw[:keep])
    with pytest.raises(CheckpointFormatError, match="offset"):
        load_checkpoint(tmp_path / "cut.amzs")


def test_payload_bit_flip_fails_crc(trained, tmp_path):
    out, _, _ = trained

    def flip(buf):
        buf[-40] ^= 0x01  # inside the last tensor payload

    with pytest.raises(CheckpointFormatError, match="CRC mismatch"):
        load_checkpoint(_corrupted(out / "last.amzs", tmp_path / "bad.amzs", flip))


def test_header_layout(trained):
    raw = (trained[0] / "last.amzs").read_bytes()
    assert raw[:4] == MAGIC
    assert struct.unpack("<H", raw[4:6]) == (1,)
    assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[:-4])
    (n_names,) = struct.unpack("<I", raw[6:10])
    (first_len,) = struct.unpack("<H", raw[10:12])
    assert raw[12:12 + first_len].decode() == "enc0.conv1.weight"
    assert n_names > 20


def test_save_is_atomic_on_failure(trained, tmp_path, monkeypatch):
    _, model, state = trained
    target = tmp_path / "ck.amzs"
    target.write_bytes(b"previous")

    def boom(*_):
        raise OSError("disk full")

    monkeypatch.setattr("burnseg.checkpoint.os.replace", boom)
    with pytest.raises(OSError):
        save_checkpoint(target, model, state)
    assert target.read_bytes() == b"previous"
    assert [p.name for p in tmp_path.iterdir()] == ["ck.amzs"]


def test_fresh_state_round_trips(tmp_path):
    model = build(UNetConfig(depth=1, base_width=2), Rng(1))
    state = TrainState.fresh(TrainConfig())
    save_checkpoint(tmp_path / "f.amzs", model, state)
    _, loaded, history = load_checkpoint(tmp_path / "f.amzs")
    assert len(history) == 0 and loaded.adam.t == 0 and loaded.lr == 1e-4
