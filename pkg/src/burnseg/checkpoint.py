"""Binary checkpoint files (``.amzs``).

Layout, all integers little-endian::

    b"AMZS"  u16 version
    u32 n_names, then per name: u16 byte length + UTF-8 bytes
    u32 meta length + UTF-8 JSON (configs, history, Adam step, lr, RNG cursors)
    u32 n_tensors, then per tensor: u32 name index, u8 rank, rank x u32 extents,
        raw float32 payload
    u32 CRC32 of every preceding byte

Writing is deterministic, so save -> load -> save yields identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError
from .tensor import Rng
from .training import AdamState, TrainConfig, TrainHistory, TrainState
from .unet import UNetConfig, UNetModel

MAGIC = b"AMZS"
VERSION = 1


def _encode(model: UNetModel, state: TrainState) -> bytes:
    tensors = {}
    for name, arr in model.state_arrays().items():
        tensors[name] = arr
    for name in sorted(state.adam.m):
        tensors[f"adam.m/{name}"] = state.adam.m[name]
        tensors[f"adam.v/{name}"] = state.adam.v[name]
    meta = {
        "unet": model.config.to_dict(),
        "train": vars(state.config).copy(),
        "history": state.history.to_list(),
        "adam_t": state.adam.t,
        "lr": state.lr,
        "rng": {
            "shuffle_seed": [state.shuffle_rng.seed, list(state.shuffle_rng._key)],
            "shuffle": state.shuffle_rng.get_state(),
            "dropout_seed": [model.dropout_rng.seed, list(model.dropout_rng._key)],
            "dropout": model.dropout_rng.get_state(),
        },
    }
    names = list(tensors)
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(names))]
    for name in names:
        raw = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw]
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts += [struct.pack("<I", len(meta_raw)), meta_raw, struct.pack("<I", len(names))]
    for i, name in enumerate(names):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        parts.append(struct.pack("<IB", i, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, model: UNetModel, state: TrainState) -> None:
    """Atomically write ``model`` and ``state`` to ``path`` (temp file + rename)."""
    path = Path(path)
    data = _encode(model, state)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o644)  # mkstemp creates 0600
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


model_checkpoint = save_checkpoint


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"truncated checkpoint: {what} needs {n} bytes at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _decode(buf: bytes):
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic at offset 0: not a checkpoint file")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version} at offset 4")
    if len(buf) < 10:
        raise CheckpointFormatError(f"truncated checkpoint at offset {len(buf)}")
    crc_at = len(buf) - 4
    (stored_crc,) = struct.unpack("<I", buf[crc_at:])
    (n_names,) = r.unpack("<I", "name count")
    names = []
    for _ in range(n_names):
        (ln,) = r.unpack("<H", "name length")
        at = r.pos
        try:
            names.append(r.take(ln, "name").decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"invalid UTF-8 name at offset {at}") from exc
    (meta_len,) = r.unpack("<I", "metadata length")
    at = r.pos
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt metadata at offset {at}") from exc
    (n_tensors,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(n_tensors):
        at = r.pos
        idx, rank = r.unpack("<IB", "tensor header")
        if idx >= len(names) or not 1 <= rank <= 4:
            raise CheckpointFormatError(f"corrupt tensor header at offset {at}")
        shape = r.unpack(f"<{rank}I", "tensor extents")
        count = int(np.prod(shape))
        payload = r.take(4 * count, f"tensor {names[idx]}")
        tensors[names[idx]] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != crc_at:
        raise CheckpointFormatError(f"unexpected trailing data at offset {r.pos}")
    if zlib.crc32(buf[:crc_at]) != stored_crc:
        raise CheckpointFormatError(f"CRC mismatch at offset {crc_at}")
    return meta, tensors


def load_checkpoint(path):
    """Return (model, state, history) restored from ``path``."""
    path = Path(path)
    meta, tensors = _decode(path.read_bytes())
    model = UNetModel(UNetConfig(**meta["unet"]))
    model.load_state_arrays(tensors)
    seed, key = meta["rng"]["dropout_seed"]
    model.dropout_rng = Rng(seed, tuple(key))
    model.dropout_rng.set_state(meta["rng"]["dropout"])

    adam = AdamState(t=meta["adam_t"])
    for name in tensors:
        if name.startswith("adam.m/"):
            pname = name[len("adam.m/"):]
            adam.m[pname] = tensors[name]
            adam.v[pname] = tensors[f"adam.v/{pname}"]
    seed, key = meta["rng"]["shuffle_seed"]
    shuffle = Rng(seed, tuple(key))
    shuffle.set_state(meta["rng"]["shuffle"])
    history = TrainHistory.from_list(meta["history"])
    state = TrainState(TrainConfig(**meta["train"]), adam, history, meta["lr"], shuffle)
    return model, state, history
