"""Thresholding, confusion metrics, tiled inference and the noisy-label
recovery experiment."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .data import SceneSample, split_dataset, stack_channels, tile_offsets, tile_scene
from .errors import ConfigError, ContractError, ShapeError, TilingError
from .layers import EVAL
from .synth import SynthConfig, synth_dataset
from .tensor import Rng, Tensor
from .training import Split, TrainConfig, fit
from .unet import UNetConfig, UNetModel, build, forward, set_mode

log = logging.getLogger(__name__)

HIT_IOU = 0.3


def threshold(prob, tau: float = 0.5) -> np.ndarray:
    """1 where prob >= tau, else 0 (uint8)."""
    if not 0.0 < tau < 1.0:
        raise ConfigError(f"threshold tau must lie in (0, 1), got {tau}")
    arr = prob.data if isinstance(prob, Tensor) else np.asarray(prob)
    # compare in the raster's precision so a float32 p equal to tau counts as >= tau
    cut = arr.dtype.type(tau) if np.issubdtype(arr.dtype, np.floating) else tau
    return (arr >= cut).astype(np.uint8)


@dataclass
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def pixel_accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 1.0

    @property
    def precision(self) -> float:
        if self.tp + self.fp == 0:
            return 1.0 if self.fn == 0 else 0.0
        return self.tp / (self.tp + self.fp)

    @property
    def recall(self) -> float:
        if self.tp + self.fn == 0:
            return 1.0 if self.fp == 0 else 0.0
        return self.tp / (self.tp + self.fn)

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 1.0

    @property
    def iou(self) -> float:
        denom = self.tp + self.fp + self.fn
        return self.tp / denom if denom else 1.0

    def __add__(self, other: "MetricsReport") -> "MetricsReport":
        return MetricsReport(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
                "pixel_accuracy": self.pixel_accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1, "iou": self.iou}


def compute_metrics(pred, ref) -> MetricsReport:
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise ShapeError(f"prediction {pred.shape} and reference {ref.shape} differ in shape")
    for name, arr in (("prediction", pred), ("reference", ref)):
        if not np.isin(arr, (0, 1)).all():
            raise ContractError(f"{name} mask must be binary")
    p = pred.astype(bool)
    r = ref.astype(bool)
    tp = int(np.count_nonzero(p & r))
    fp = int(np.count_nonzero(p & ~r))
    fn = int(np.count_nonzero(~p & r))
    return MetricsReport(tp, fp, int(p.size) - tp - fp - fn, fn)


def predict_scene(model: UNetModel, sample: SceneSample, tile: int, stride: Optional[int] = None) -> np.ndarray:
    """H x W probability raster from overlapping tiles; overlaps are averaged.

    Each tile goes through the network on its own, so the result does not
    depend on how tiles would have been batched.
    """
    stride = stride or tile
    if tile > sample.height or tile > sample.width:
        raise TilingError(f"{sample.scene_id}: scene {sample.height}x{sample.width} smaller than tile {tile}")
    set_mode(model, EVAL)
    stack = stack_channels(sample)
    acc = np.zeros((sample.height, sample.width), np.float64)
    hits = np.zeros((sample.height, sample.width), np.int32)
    for r in tile_offsets(sample.height, tile, stride):
        for c in tile_offsets(sample.width, tile, stride):
            x = Tensor._wrap(np.ascontiguousarray(stack[None, :, r:r + tile, c:c + tile]))
            acc[r:r + tile, c:c + tile] += forward(model, x).data[0, 0]
            hits[r:r + tile, c:c + tile] += 1
    return (acc / hits).astype(np.float32)


def write_prediction(prob: np.ndarray, out_dir, tau: float = 0.5) -> tuple[Path, Path]:
    """prob.png (8-bit probability) and binary.png ({0, 255}) in ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prob_path, bin_path = out / "prob.png", out / "binary.png"
    Image.fromarray(np.clip(np.rint(prob * 255.0), 0, 255).astype(np.uint8)).save(prob_path)
    Image.fromarray(threshold(prob, tau) * 255).save(bin_path)
    return prob_path, bin_path


# ------------------------------------------------------------------ recovery

@dataclass
class SceneRecovery:
    scene_id: str
    split: str
    model: MetricsReport
    noisy: MetricsReport
    n_dropped: int
    n_dropped_hit: int
    n_injected: int
    n_rejected: int
    river_px: int
    river_fp: int
    cloud_px: int
    cloud_fp: int

    @property
    def model_iou(self) -> float:
        return self.model.iou

    @property
    def noisy_iou(self) -> float:
        return self.noisy.iou


def _ratio(num, den):
    return num / den if den else float("nan")


@dataclass
class RecoveryReport:
    """Oracle-referenced scores of a model trained on corrupted labels.

    IoUs are pooled over all scenes (sum of confusion counts).  The dropped
    component recall counts oracle components missing from the training
    labels that the prediction covers at IoU >= 0.3; the rejection rate counts
    injected false components whose mean predicted probability is < 0.5.
    Confuser rates are the fraction of river / cloud pixels predicted as scar
    (NaN when no such pixels exist).
    """

    scenes: list = field(default_factory=list)
    history: object = None

    def _sum(self, attr):
        return sum(getattr(s, attr) for s in self.scenes)

    @property
    def model_iou(self) -> float:
        return sum((s.model for s in self.scenes), MetricsReport(0, 0, 0, 0)).iou

    @property
    def noisy_iou(self) -> float:
        return sum((s.noisy for s in self.scenes), MetricsReport(0, 0, 0, 0)).iou

    @property
    def mean_model_iou(self) -> float:
        return float(np.mean([s.model_iou for s in self.scenes]))

    @property
    def mean_noisy_iou(self) -> float:
        return float(np.mean([s.noisy_iou for s in self.scenes]))

    @property
    def dropped_recall(self) -> float:
        return _ratio(self._sum("n_dropped_hit"), self._sum("n_dropped"))

    @property
    def rejection_rate(self) -> float:
        return _ratio(self._sum("n_rejected"), self._sum("n_injected"))

    @property
    def river_fp_rate(self) -> float:
        return _ratio(self._sum("river_fp"), self._sum("river_px"))

    @property
    def cloud_fp_rate(self) -> float:
        return _ratio(self._sum("cloud_fp"), self._sum("cloud_px"))

    def summary(self) -> dict:
        return {
            "n_scenes": len(self.scenes),
            "model_iou": self.model_iou,
            "noisy_iou": self.noisy_iou,
            "mean_model_iou": self.mean_model_iou,
            "mean_noisy_iou": self.mean_noisy_iou,
            "n_dropped": self._sum("n_dropped"),
            "dropped_recall": self.dropped_recall,
            "n_injected": self._sum("n_injected"),
            "rejection_rate": self.rejection_rate,
            "river_px": self._sum("river_px"),
            "river_fp_rate": self.river_fp_rate,
            "cloud_px": self._sum("cloud_px"),
            "cloud_fp_rate": self.cloud_fp_rate,
        }

    def subset(self, split: str) -> "RecoveryReport":
        return RecoveryReport([s for s in self.scenes if s.split == split], self.history)

    def split_summaries(self) -> dict:
        """``summary()`` keys prefixed by split name, e.g. ``val.model_iou``."""
        out = {}
        for split in sorted({s.split for s in self.scenes if s.split}):
            out.update({f"{split}.{k}": v for k, v in self.subset(split).summary().items()})
        return out

    def write_csv(self, path) -> None:
        cols =["scene_id", "split", "model_iou", "noisy_iou", "n_dropped", "n_dropped_hit", "n_injected",
                "n_rejected", "river_px", "river_fp", "cloud_px", "cloud_fp"]
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for s in self.scenes:
                w.writerow([getattr(s, c) for c in cols])


def component_hits(components: np.ndarray, pred: np.ndarray, min_iou: float = HIT_IOU) -> tuple[int, int]:
    """(number of labelled components, number covered by the prediction).

    A component counts as covered when its IoU with the union of predicted
    connected components touching it reaches ``min_iou``.
    """
    n = int(components.max()) if components.size else 0
    if n == 0:
        return 0, 0
    pred_lab, _ = ndimage.label(pred.astype(bool))
    hit = 0
    for i in range(1, n + 1):
        comp = components == i
        touching = np.unique(pred_lab[comp])
        touching = touching[touching > 0]
        if touching.size == 0:
            continue
        union_pred = np.isin(pred_lab, touching)
        inter = np.count_nonzero(comp & union_pred)
        iou = inter / np.count_nonzero(comp | union_pred)
        if iou >= min_iou:
            hit += 1
    return n, hit


def rejected_components(components: np.ndarray, prob: np.ndarray, tau: float = 0.5) -> tuple[int, int]:
    n = int(components.max()) if components.size else 0
    rejected = sum(1 for i in range(1, n + 1) if prob[components == i].mean() < tau)
    return n, rejected


def score_scene(sample: SceneSample, prob: np.ndarray, split: str = "", tau: float = 0.5) -> SceneRecovery:
    if sample.oracle is None:
        raise ContractError(f"{sample.scene_id}: recovery scoring needs an oracle mask")
    pred = threshold(prob, tau)
    empty = np.zeros(sample.labels.shape, np.int32)
    n_drop, hit = component_hits(sample.dropped if sample.dropped is not None else empty, pred)
    n_inj, rej = rejected_components(sample.injected if sample.injected is not None else empty, prob, tau)
    river = sample.river if sample.river is not None else np.zeros(pred.shape, bool)
    cloud = sample.cloud if sample.cloud is not None else np.zeros(pred.shape, bool)
    return SceneRecovery(
        sample.scene_id, split,
        compute_metrics(pred, sample.oracle), compute_metrics(sample.labels, sample.oracle),
        n_drop, hit, n_inj, rej,
        int(river.sum()), int(np.count_nonzero(pred.astype(bool) & river)),
        int(cloud.sum()), int(np.count_nonzero(pred.astype(bool) & cloud)),
    )


def scenes_to_split(scenes: list[SceneSample], tile: int, stride: int) -> Split:
    tiles = [t for s in scenes for t in tile_scene(s, tile, stride)]
    return Split(np.stack([t.input for t in tiles]), np.stack([t.target for t in tiles]))


def _gray3(arr):
    return np.repeat(arr[..., None], 3, axis=2)


def write_panel(sample: SceneSample, prob: np.ndarray, path, tau: float = 0.5) -> None:
    """vis | nir | noisy labels | probability | binary map, side by side."""
    nir = sample.nir[:, :, 0]
    nir8 = (nir >> 8).astype(np.uint8) if nir.dtype == np.uint16 else nir.astype(np.uint8)
    strip = [
        sample.vis,
        _gray3(nir8),
        _gray3(sample.labels.astype(np.uint8) * 255),
        _gray3(np.clip(np.rint(prob * 255), 0, 255).astype(np.uint8)),
        _gray3(threshold(prob, tau) * 255),
    ]
    gap = np.full((sample.height, 2, 3), 255, np.uint8)
    row = np.concatenate([x for part in strip for x in (part, gap)][:-1], axis=1)
    Image.fromarray(row).save(path)


def recovery_experiment(synth_cfg: SynthConfig, train_cfg: TrainConfig, unet_cfg: Optional[UNetConfig] = None,
                        out_dir=None, n_panels: int = 8, scenes: Optional[list] = None) -> RecoveryReport:
    """Train on corrupted synthetic labels, score every scene against its oracle."""
    scenes = scenes if scenes is not None else synth_dataset(synth_cfg)
    for s in scenes:
        if s.oracle is None:
            raise ContractError(f"{s.scene_id}: recovery experiment needs oracle masks")
    unet_cfg = unet_cfg or UNetConfig(in_channels=scenes[0].n_channels)
    tile = min(train_cfg.tile_size, synth_cfg.canvas)
    stride = min(train_cfg.tile_stride, tile)

    train_sc, val_sc = split_dataset(scenes, train_cfg.val_fraction, train_cfg.seed)
    model = build(unet_cfg, Rng(train_cfg.seed))
    out = Path(out_dir) if out_dir is not None else None
    state = fit(model, scenes_to_split(train_sc, tile, stride), scenes_to_split(val_sc, tile, stride),
                train_cfg, out_dir=out / "checkpoints" if out else None)

    report = RecoveryReport(history=state.history)
    val_ids = {s.scene_id for s in val_sc}
    if out is not None:
        (out / "panels").mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(scenes):
        prob = predict_scene(model, s, tile, stride)
        report.scenes.append(score_scene(s, prob, "val" if s.scene_id in val_ids else "train"))
        if out is not None and i < n_panels:
            write_panel(s, prob, out / "panels" / f"{s.scene_id}.png")
    if out is not None:
        report.write_csv(out / "recovery.csv")
        with (out / "summary.txt").open("w", encoding="utf-8") as fh:
            for k, v in {**report.summary(), **report.split_summaries()}.items():
                fh.write(f"{k}={v}\n")
    return report
