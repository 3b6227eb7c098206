"""Dense float tensors with reverse-mode differentiation over a recorded tape."""

from __future__ import annotations

import threading
import zlib
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, EmptyTapeError, NumericError, ShapeError

_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def default_dtype():
    return getattr(_local, "dtype", np.float32)


@contextmanager
def shadow64():
    """Build new tensors in float64 inside the block (gradient checking only)."""
    prev = default_dtype()
    _local.dtype = np.float64
    try:
        yield
    finally:
        _local.dtype = prev


@contextmanager
def record_patterns():
    """Collect the discrete choices (relu masks, pooling argmax) made by ops
    run inside the block.  Used by ``grad_check`` to spot kink crossings."""
    prev = getattr(_local, "patterns", None)
    _local.patterns = patterns = []
    try:
        yield patterns
    finally:
        _local.patterns = prev


def note_pattern(arr) -> None:
    patterns = getattr(_local, "patterns", None)
    if patterns is not None:
        patterns.append(np.packbits(arr) if arr.dtype == bool else arr.copy())


def _check_shape(shape) -> tuple:
    shape = tuple(int(s) for s in shape)
    if not 1 <= len(shape) <= 4:
        raise ShapeError(f"tensor rank must be 1..4, got shape {shape}")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got shape {shape}")
    return shape


class Tensor:
    """N-d float array (rank 1-4) with an optional gradient slot.

    Conv tensors use [batch, channel, height, width].  Forward ops never
    write into their inputs; only optimizers touch ``data`` in place.
    """

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(1)
        _check_shape(arr.shape)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}, requires_grad={self.requires_grad})"


@dataclass
class Record:
    name: str
    inputs: tuple
    output: Tensor
    backward: Callable


class Tape:
    """Ordered log of executed ops.  Use as a context manager while recording.

    Records are appended in execution order, which is already a topological
    order of the graph.
    """

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _check_finite(arr: np.ndarray, name: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {name}")


def make_output(arr: np.ndarray, inputs: Sequence[Tensor], backward_fn, name: str) -> Tensor:
    """Wrap an op result and log it on the active tape when any input needs grads."""
    _check_finite(arr, name)
    out = Tensor._wrap(arr)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(Record(name, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Intermediate results are not given a ``.grad``; leaves accumulate (+=)
    so call ``zero_grad`` between steps.
    """
    if loss.shape != (1,):
        raise ContractError(f"backward needs a scalar loss of shape [1], got {list(loss.shape)}")
    if not any(rec.output is loss for rec in tape.records):
        raise EmptyTapeError("loss was not produced on this tape (detached or empty tape)")

    pending = {id(loss): (loss, np.ones_like(loss.data))}
    for rec in reversed(tape.records):
        entry = pending.pop(id(rec.output), None)
        if entry is None:
            continue
        in_grads = rec.backward(entry[1])
        for t, g in zip(rec.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in pending:
                pending[key] = (t, pending[key][1] + g)
            else:
                pending[key] = (t, g)
    for t, g in pending.values():
        t.grad = g.astype(t.data.dtype, copy=False) if t.grad is None else t.grad + g


# ----------------------------------------------------------------- random

class Rng:
    """Seeded PCG64 generator with labelled, independent purpose streams."""

    algorithm = "PCG64"

    def __init__(self, seed: int, _key: tuple = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._key = _key
        ss = np.random.SeedSequence(self.seed, spawn_key=_key)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def split(self, label: str) -> "Rng":
        return Rng(self.seed, self._key + (zlib.crc32(label.encode("utf-8")),))

    def get_state(self) -> dict:
        return self.generator.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.generator.bit_generator.state = state


def zeros(shape) -> Tensor:
    return Tensor._wrap(np.zeros(_check_shape(shape), dtype=default_dtype()))


def ones(shape) -> Tensor:
    return Tensor._wrap(np.ones(_check_shape(shape), dtype=default_dtype()))


def randn(shape, rng: Rng, mean: float = 0.0, std: float = 1.0) -> Tensor:
    shape = _check_shape(shape)
    draws = rng.generator.standard_normal(shape)
    return Tensor._wrap((mean + std * draws).astype(default_dtype()))


# ----------------------------------------------------------------- ops

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_output(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_output(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    note_pattern(mask)
    return make_output(np.maximum(x.data, 0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return make_output(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the numpy name
    shape = x.shape
    out = np.array([x.data.sum()], dtype=x.dtype)
    return make_output(out, (x,), lambda g: (np.full(shape, g[0], dtype=g.dtype),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    out = np.array([x.data.mean()], dtype=x.dtype)
    return make_output(out, (x,), lambda g: (np.full(shape, g[0] / n, dtype=g.dtype),), "mean")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    for p in parts:
        if len(p.shape) != 4:
            raise ShapeError(f"concat_channels needs rank-4 parts, got {list(p.shape)}")
    n, _, h, w = parts[0].shape
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: {list(p.shape)} does not match batch/height/width of {list(parts[0].shape)}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def back(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return make_output(np.concatenate([p.data for p in parts], axis=1), tuple(parts), back, "concat_channels")


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if len(x.shape) != 4 or int(np.sum(sizes)) != x.shape[1]:
        raise ShapeError(f"cannot split {list(x.shape)} into channel groups {list(sizes)}")
    outs = []
    start = 0
    for size in sizes:
        lo, hi = start, start + size

        def back(g, lo=lo, hi=hi):
            full = np.zeros_like(x.data)
            full[:, lo:hi] = g
            return (full,)

        outs.append(make_output(x.data[:, lo:hi].copy(), (x,), back, "split_channels"))
        start = hi
    return outs


# ----------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    excluded: list = field(default_factory=list)
    valid: bool = True
    reason: str = ""

    def passed(self, tol: float) -> bool:
        return self.valid and self.max_rel_error < tol


def _same_patterns(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-3, tol: float = 1e-5,
               exclude=None, indices=None, atol: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` at ``x`` with central differences.

    Relative error per element is ``|a - n| / max(|a|, |n|, atol)``.
    Elements whose +-step evaluations flip a relu mask or a pooling argmax
    sit within one step of a kink; they are skipped and listed in
    ``excluded``, as are elements masked by ``exclude``.  ``indices``
    restricts the check to given flat positions.  ``x.data`` is perturbed in
    place and restored.
    """
    x.requires_grad = True
    x.grad = None
    with Tape() as tape, record_patterns() as base:
        y0 = f(x)
    if y0.shape != (1,):
        raise ContractError("grad_check needs a scalar-valued function")
    backward(y0, tape)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    # two plain evaluations must agree, otherwise the check means nothing
    if f(x).data[0] != f(x).data[0]:
        return GradCheckReport(float("inf"), 0, valid=False, reason="function is not deterministic")

    flat = x.data.reshape(-1)
    candidates = range(flat.size) if indices is None else indices
    skip = np.zeros(flat.size, bool) if exclude is None else np.asarray(exclude, bool).reshape(-1)
    worst, checked, excluded = 0.0, 0, []
    for i in candidates:
        if skip[i]:
            excluded.append(int(i))
            continue
        orig = flat[i]
        flat[i] = orig + step
        with record_patterns() as pat_up:
            up = float(f(x).data[0])
        flat[i] = orig - step
        with record_patterns() as pat_down:
            down = float(f(x).data[0])
        flat[i] = orig
        if not (_same_patterns(base, pat_up) and _same_patterns(base, pat_down)):
            excluded.append(int(i))
            continue
        num = (up - down) / (2 * step)
        a = float(analytic.reshape(-1)[i])
        rel = abs(a - num) / max(abs(a), abs(num), atol)
        worst = max(worst, rel)
        checked += 1
    return GradCheckReport(worst, checked, excluded)
