"""Scene I/O, channel stacking, tiling and scene-level splits.

On-disk layout::

    <root>/scenes/<scene_id>/vis.png     8-bit RGB
                             nir.png     8- or 16-bit grayscale
                             mask.png    8-bit {0, 255} training labels
                             oracle.png  optional clean mask (synthetic data)
    <root>/manifest.csv                  optional: scene_id, split, biome
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import ConfigError, LoadError, ShapeError, TilingError
from .tensor import Rng, Tensor

MASK_THRESHOLD = 128


@dataclass
class SceneSample:
    scene_id: str
    vis: np.ndarray                  # H x W x 3, uint8
    nir: np.ndarray                  # H x W x B2, uint8 or uint16
    labels: np.ndarray               # H x W, uint8 in {0, 1}
    oracle: Optional[np.ndarray] = None
    # synthetic bookkeeping, never written to disk
    river: Optional[np.ndarray] = None
    cloud: Optional[np.ndarray] = None
    dropped: Optional[np.ndarray] = None   # int label map of oracle components removed from labels
    injected: Optional[np.ndarray] = None  # int label map of false label components

    def __post_init__(self):
        if self.nir.ndim == 2:
            self.nir = self.nir[:, :, None]
        h, w = self.labels.shape
        for name in ("vis", "nir", "oracle"):
            arr = getattr(self, name)
            if arr is not None and arr.shape[:2] != (h, w):
                raise ShapeError(f"{self.scene_id}: {name} is {arr.shape[:2]}, labels are {(h, w)}")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def n_channels(self) -> int:
        return 3 + self.nir.shape[2]


def _read_png(path: Path):
    if not path.is_file():
        raise LoadError(f"missing file: {path}")
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            arr = np.array(img)
    except OSError as exc:
        raise LoadError(f"cannot decode {path}: {exc}") from exc
    return mode, arr


def _read_gray(path: Path, allow16: bool):
    mode, arr = _read_png(path)
    if mode == "L":
        return arr.astype(np.uint8)
    if allow16 and mode in ("I;16", "I;16B", "I;16L", "I"):
        if arr.min() < 0 or arr.max() > 65535:
            raise LoadError(f"unsupported bit depth in {path}: values exceed 16 bits")
        return arr.astype(np.uint16)
    raise LoadError(f"unsupported bit depth / mode {mode!r} in {path}")


def _read_mask(path: Path) -> np.ndarray:
    return (_read_gray(path, allow16=False) >= MASK_THRESHOLD).astype(np.uint8)


def load_scene(directory) -> SceneSample:
    d = Path(directory)
    if not d.is_dir():
        raise LoadError(f"scene directory not found: {d}")
    mode, vis = _read_png(d / "vis.png")
    if mode != "RGB":
        raise LoadError(f"unsupported bit depth / mode {mode!r} in {d / 'vis.png'} (need 8-bit RGB)")
    nir = _read_gray(d / "nir.png", allow16=True)
    labels = _read_mask(d / "mask.png")
    oracle = _read_mask(d / "oracle.png") if (d / "oracle.png").exists() else None
    h, w = vis.shape[:2]
    for name, arr in (("nir.png", nir), ("mask.png", labels), ("oracle.png", oracle)):
        if arr is not None and arr.shape[:2] != (h, w):
            raise LoadError(f"dimension mismatch: {d / name} is {arr.shape[1]}x{arr.shape[0]}, "
                            f"vis.png is {w}x{h}")
    return SceneSample(d.name, vis.astype(np.uint8), nir, labels, oracle)


def save_scene(sample: SceneSample, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(sample.vis, dtype=np.uint8)).save(d / "vis.png")
    if sample.nir.shape[2] != 1:
        raise ShapeError("PNG layout stores a single NIR band")
    nir = sample.nir[:, :, 0]
    if nir.dtype == np.uint16:
        Image.fromarray(np.ascontiguousarray(nir, dtype="<u2")).save(d / "nir.png")
    else:
        Image.fromarray(np.ascontiguousarray(nir, dtype=np.uint8)).save(d / "nir.png")
    write_mask_png(sample.labels, d / "mask.png")
    if sample.oracle is not None:
        write_mask_png(sample.oracle, d / "oracle.png")
    return d


def write_mask_png(mask: np.ndarray, path) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


def list_scenes(root) -> list[Path]:
    root = Path(root)
    base = root / "scenes"
    if not base.is_dir():
        raise LoadError(f"dataset root has no scenes/ directory: {root}")
    return sorted(p for p in base.iterdir() if p.is_dir())


def load_dataset(root) -> list[SceneSample]:
    return [load_scene(p) for p in list_scenes(root)]


def read_manifest(root) -> dict[str, dict]:
    path = Path(root) / "manifest.csv"
    if not path.exists():
        return {}
    with path.open(newline="", encoding="utf-8") as fh:
        return {row["scene_id"]: row for row in csv.DictReader(fh)}


def write_manifest(root, rows) -> None:
    path = Path(root) / "manifest.csv"
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scene_id", "split", "biome"])
        for row in rows:
            w.writerow(row)


def _scale(arr: np.ndarray) -> np.ndarray:
    top = 65535.0 if arr.dtype == np.uint16 else 255.0
    return arr.astype(np.float32) / np.float32(top)


def stack_channels(sample: SceneSample) -> np.ndarray:
    """[B1+B2, H, W] float32 in [0, 1], channel order R, G, B, NIR..."""
    vis = _scale(sample.vis).transpose(2, 0, 1)
    nir = _scale(sample.nir).transpose(2, 0, 1)
    return np.ascontiguousarray(np.concatenate([vis, nir], axis=0))


def normalize_stack(sample: SceneSample) -> Tensor:
    return Tensor._wrap(stack_channels(sample)[None])


@dataclass
class Tile:
    scene_id: str
    row: int
    col: int
    input: np.ndarray   # [C, T, T]
    target: np.ndarray  # [1, T, T]


@dataclass
class TileBatch:
    input: Tensor
    target: Tensor
    provenance: list = field(default_factory=list)

    @classmethod
    def from_tiles(cls, tiles: list) -> "TileBatch":
        return cls(Tensor._wrap(np.stack([t.input for t in tiles])),
                   Tensor._wrap(np.stack([t.target for t in tiles])),
                   [(t.scene_id, t.row, t.col) for t in tiles])


def tile_offsets(extent: int, tile: int, stride: int) -> list[int]:
    """Top-left anchored offsets; a trailing partial window is shifted inward."""
    if tile > extent:
        raise TilingError(f"tile size {tile} exceeds extent {extent}")
    if stride < 1:
        raise TilingError(f"stride must be >= 1, got {stride}")
    offs = list(range(0, extent - tile + 1, stride))
    if offs[-1] + tile < extent:
        offs.append(extent - tile)
    return offs


def tile_scene(sample: SceneSample, tile: int, stride: int) -> list[Tile]:
    if tile > sample.height or tile > sample.width:
        raise TilingError(f"{sample.scene_id}: tile {tile} larger than scene {sample.height}x{sample.width}")
    stack = stack_channels(sample)
    target = sample.labels.astype(np.float32)[None]
    tiles = []
    for r in tile_offsets(sample.height, tile, stride):
        for c in tile_offsets(sample.width, tile, stride):
            tiles.append(Tile(sample.scene_id, r, c,
                              np.ascontiguousarray(stack[:, r:r + tile, c:c + tile]),
                              np.ascontiguousarray(target[:, r:r + tile, c:c + tile])))
    return tiles


def stitch_tiles(tiles: list[Tile], height: int, width: int):
    """Reassemble (input, target) rasters from tiles; overlaps take the last write."""
    c = tiles[0].input.shape[0]
    inp = np.zeros((c, height, width), np.float32)
    tgt = np.zeros((1, height, width), np.float32)
    for t in tiles:
        size = t.input.shape[1]
        inp[:, t.row:t.row + size, t.col:t.col + size] = t.input
        tgt[:, t.row:t.row + size, t.col:t.col + size] = t.target
    return inp, tgt


def split_dataset(scenes: list, val_fraction: float = 0.2, seed: int = 0):
    """Seeded shuffle, then prefix split at scene granularity.

    The validation count is round-half-up of ``val_fraction * n``, clamped
    so both sides are non-empty.
    """
    n = len(scenes)
    if n < 2:
        raise ConfigError(f"need at least 2 scenes to split, got {n}")
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    n_val = min(max(math.floor(val_fraction * n + 0.5), 1), n - 1)
    order = Rng(seed).split("split").generator.permutation(n)
    val = [scenes[i] for i in order[:n_val]]
    train = [scenes[i] for i in order[n_val:]]
    return train, val


def with_labels(sample: SceneSample, labels: np.ndarray, **extra) -> SceneSample:
    return replace(sample, labels=labels, **extra)
