"""Binary cross-entropy, Adam, epoch loop and the three training callbacks."""

from __future__ import annotations

import copy
import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ShapeError
from .layers import EVAL, TRAIN
from .tensor import Rng, Tape, Tensor, backward, make_output
from .unet import UNetModel, forward, set_mode

log = logging.getLogger(__name__)

BCE_CLAMP = 1e-7


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    epochs: int = 50
    batch_train: int = 8
    batch_val: int = 4
    early_stop_patience: int = 10
    plateau_patience: int = 5
    plateau_factor: float = 0.1
    min_lr: float = 1e-7
    min_delta: float = 0.0
    seed: int = 0
    tile_size: int = 256
    tile_stride: int = 256
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.batch_train < 1 or self.batch_val < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.early_stop_patience < 1 or self.plateau_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    train_pixel_acc: float
    val_pixel_acc: float
    lr_in_effect: float
    wall_time: float = 0.0


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch != self.records[-1].epoch + 1:
            raise ContractError(f"epoch {rec.epoch} does not follow {self.records[-1].epoch}")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def val_losses(self):
        return [r.val_loss for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "train_acc", "val_acc", "lr"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.train_pixel_acc),
                        repr(r.val_pixel_acc), repr(r.lr_in_effect)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    def to_list(self) -> list:
        return [asdict(r) for r in self.records]

    @classmethod
    def from_list(cls, rows) -> "TrainHistory":
        return cls([EpochRecord(**row) for row in rows])


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


@dataclass
class TrainState:
    """Everything needed to continue training bit-exactly."""

    config: TrainConfig
    adam: AdamState
    history: TrainHistory
    lr: float
    shuffle_rng: Rng
    best_snapshot: Optional[dict] = None

    @classmethod
    def fresh(cls, config: TrainConfig) -> "TrainState":
        return cls(config, AdamState(), TrainHistory(), config.lr, Rng(config.seed).split("data-shuffle"))


# ------------------------------------------------------------------ loss

def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to [1e-7, 1-1e-7].

    The gradient is the derivative of the loss formula evaluated at the
    clamped prediction, so saturated outputs still receive a signal.
    """
    y = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != y.shape:
        raise ShapeError(f"bce_loss: prediction {list(pred.shape)} vs target {list(y.shape)}")
    if not np.isin(y, (0, 1)).all():
        raise ContractError("bce_loss target must be binary {0, 1}")
    p = np.clip(pred.data, BCE_CLAMP, 1 - BCE_CLAMP)
    y = y.astype(pred.dtype)
    n = p.size
    pix = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    loss = np.array([pix.sum(dtype=np.float64) / n], dtype=pred.dtype)

    def back(g):
        return (g[0] / n * (p - y) / (p * (1 - p)),)

    return make_output(loss, (pred,), back, "bce_loss")


def pixel_accuracy_counts(pred: np.ndarray, target: np.ndarray, tau: float = 0.5):
    return int(((pred >= tau) == (target >= 0.5)).sum()), int(pred.size)


# ------------------------------------------------------------------ optimizer

def adam_step(params: dict, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """One bias-corrected Adam update, in place on ``param.data``."""
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name} has no gradient")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1 - beta2) * (g * g)
        p.data = (p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.data.dtype)


# ------------------------------------------------------------------ epoch loop

@dataclass
class Split:
    """Stacked tiles: inputs [n, C, T, T] in [0, 1], targets [n, 1, T, T] binary."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ShapeError("inputs and targets disagree on sample count")

    def __len__(self):
        return len(self.inputs)


def batch_indices(n: int, batch: int, order=None, merge_singleton: bool = False) -> list:
    order = np.arange(n) if order is None else order
    chunks = [order[i:i + batch] for i in range(0, n, batch)]
    if merge_singleton and len(chunks) > 1 and len(chunks[-1]) == 1:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


def run_epoch(model: UNetModel, split: Split, config: TrainConfig, mode: str,
              state: Optional[TrainState] = None):
    """Train (shuffle + Adam per batch) or evaluate one pass over ``split``.

    Returns (mean per-pixel BCE, pixel accuracy at 0.5).
    """
    if len(split) == 0:
        raise ContractError("run_epoch needs a non-empty split")
    total_loss = 0.0
    correct = total = 0
    if mode == TRAIN:
        if state is None:
            raise ContractError("training needs a TrainState")
        set_mode(model, TRAIN)
        order = state.shuffle_rng.generator.permutation(len(split))
        chunks = batch_indices(len(split), config.batch_train, order, merge_singleton=True)
    elif mode == EVAL or mode == "val":
        set_mode(model, EVAL)
        chunks = batch_indices(len(split), config.batch_val)
    else:
        raise ConfigError(f"unknown mode {mode!r}")

    for idx in chunks:
        try:
            xb = Tensor._wrap(split.inputs[idx])
            yb = split.targets[idx]
        except (IndexError, ValueError) as exc:
            raise ShapeError(f"batch assembly failed for indices {idx.tolist()}: {exc}") from exc
        if mode == TRAIN:
            model.zero_grad()
            with Tape() as tape:
                pred = forward(model, xb)
                loss = bce_loss(pred, yb)
            if not np.isfinite(loss.data).all():
                raise NumericError("training loss is not finite")
            backward(loss, tape)
            adam_step(model.parameters(), state.adam, state.lr, config.beta1, config.beta2, config.eps_adam)
        else:
            pred = forward(model, xb)
            loss = bce_loss(pred, yb)
        pixels = pred.data.size
        total_loss += float(loss.data[0]) * pixels
        c, t = pixel_accuracy_counts(pred.data, yb)
        correct += c
        total += t
    return total_loss / total, correct / total


# ------------------------------------------------------------------ callbacks

@dataclass
class Stop:
    best_epoch: int


CONTINUE = "continue"


def _best_and_wait(values, min_delta, patience=None):
    """Replay an improvement counter over ``values``; with ``patience`` the
    counter resets whenever it reaches patience (a plateau reduction)."""
    best, best_epoch, wait = float("inf"), 0, 0
    for epoch, v in enumerate(values, start=1):
        if v < best - min_delta:
            best, best_epoch, wait = v, epoch, 0
        else:
            wait += 1
            if patience is not None and wait >= patience and epoch < len(values):
                wait = 0
    return best_epoch, wait


def early_stopping(history: TrainHistory, patience: int, min_delta: float = 0.0):
    """``Stop(best_epoch)`` once val_loss failed to improve by more than
    ``min_delta`` for ``patience`` consecutive epochs, else ``CONTINUE``."""
    if len(history) == 0:
        raise ContractError("early_stopping needs at least one recorded epoch")
    best_epoch, wait = _best_and_wait(history.val_losses, min_delta)
    return Stop(best_epoch) if wait >= patience else CONTINUE


def reduce_lr_on_plateau(history: TrainHistory, patience: int, factor: float, min_lr: float,
                         min_delta: float = 0.0) -> float:
    """Learning rate for the next epoch.  The stagnation counter is replayed
    from history and restarts after each reduction."""
    if len(history) == 0:
        raise ContractError("reduce_lr_on_plateau needs at least one recorded epoch")
    lr = history[-1].lr_in_effect
    _, wait = _best_and_wait(history.val_losses, min_delta, patience)
    if wait >= patience:
        return max(lr * factor, min_lr)
    return lr


def improved(history: TrainHistory, min_delta: float = 0.0) -> bool:
    """True when the latest epoch set a new best val_loss."""
    prior = history.val_losses[:-1]
    return not prior or history[-1].val_loss < min(prior) - min_delta


# ------------------------------------------------------------------ fit

def fit(model: UNetModel, train: Split, val: Split, config: TrainConfig,
        state: Optional[TrainState] = None, out_dir=None, epochs: Optional[int] = None,
        on_epoch=None) -> TrainState:
    """Epoch loop.  Per epoch: train, validate, checkpoint, plateau check,
    early-stop check (in that order).  ``epochs`` caps the number of epochs
    run by this call; the overall budget is ``config.epochs``."""
    from .checkpoint import save_checkpoint

    state = state or TrainState.fresh(config)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if len(state.history):
        if isinstance(early_stopping(state.history, config.early_stop_patience, config.min_delta), Stop):
            return state
        state.lr = reduce_lr_on_plateau(state.history, config.plateau_patience, config.plateau_factor,
                                        config.min_lr, config.min_delta)
    remaining = config.epochs - len(state.history)
    if epochs is not None:
        remaining = min(remaining, epochs)

    for _ in range(max(remaining, 0)):
        t0 = time.perf_counter()
        lr = state.lr
        tr_loss, tr_acc = run_epoch(model, train, config, TRAIN, state)
        va_loss, va_acc = run_epoch(model, val, config, EVAL)
        if not (np.isfinite(tr_loss) and np.isfinite(va_loss)):
            raise NumericError("loss became NaN/Inf")
        epoch = len(state.history) + 1
        state.history.append(EpochRecord(epoch, tr_loss, va_loss, tr_acc, va_acc, lr,
                                         time.perf_counter() - t0))
        log.info("epoch %d train_loss=%.5f val_loss=%.5f train_acc=%.4f val_acc=%.4f lr=%.2e",
                 epoch, tr_loss, va_loss, tr_acc, va_acc, lr)

        if improved(state.history, config.min_delta):
            state.best_snapshot = copy.deepcopy(model.state_arrays())
            if out is not None:
                save_checkpoint(out / "best.amzs", model, state)
        if out is not None:
            save_checkpoint(out / "last.amzs", model, state)
            state.history.write_csv(out / "history.csv")

        state.lr = reduce_lr_on_plateau(state.history, config.plateau_patience, config.plateau_factor,
                                        config.min_lr, config.min_delta)
        decision = early_stopping(state.history, config.early_stop_patience, config.min_delta)
        if on_epoch is not None:
            on_epoch(state)
        if isinstance(decision, Stop):
            log.info("early stop; restoring weights of epoch %d", decision.best_epoch)
            if state.best_snapshot is not None:
                model.load_state_arrays(state.best_snapshot)
            elif out is not None and (out / "best.amzs").exists():
                # resumed run: the best epoch predates this call
                from .checkpoint import load_checkpoint
                model.load_state_arrays(load_checkpoint(out / "best.amzs")[0].state_arrays())
            break
    return state
