"""Procedural VIS/NIR scenes with burn scars, rivers and clouds, plus
component-level label corruption (dropped fragments, false blobs)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .data import SceneSample
from .errors import ConfigError, ContractError
from .tensor import Rng

# nominal reflectances, 8-bit scale: (R, G, B), NIR
GREEN_PASTURE = ((72, 122, 52), 165)
BROWN_PASTURE = ((138, 112, 72), 125)
SCAR = ((66, 42, 36), 48)
RIVER = ((34, 46, 70), 12)
CLOUD = ((236, 236, 240), 226)

_DISK = {r: (np.add.outer(np.arange(-r, r + 1) ** 2, np.arange(-r, r + 1) ** 2) <= r * r + r)
         for r in range(1, 6)}
_SQUARE = np.ones((3, 3), bool)


@dataclass
class SynthConfig:
    canvas: int = 128
    n_scenes: int = 16
    scar_count_range: tuple = (3, 8)
    scar_size_range: tuple = (60, 400)
    river_prob: float = 0.1
    cloud_prob: float = 0.1
    label_drop_fraction: float = 0.0
    false_label_count: int = 0
    nir_bits: int = 8
    seed: int = 0

    def __post_init__(self):
        self.scar_count_range = tuple(int(v) for v in self.scar_count_range)
        self.scar_size_range = tuple(int(v) for v in self.scar_size_range)
        for name in ("scar_count_range", "scar_size_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ConfigError(f"{name} must be a non-empty range (lo <= hi, lo >= 0), got {(lo, hi)}")
        if self.scar_size_range[0] < 1:
            raise ConfigError("scar sizes must be >= 1 pixel")
        for name in ("river_prob", "cloud_prob", "label_drop_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.false_label_count < 0:
            raise ConfigError("false_label_count must be >= 0")
        if self.canvas < 16:
            raise ConfigError("canvas must be at least 16 pixels")
        if self.nir_bits not in (8, 16):
            raise ConfigError("nir_bits must be 8 or 16")

    def to_dict(self) -> dict:
        return asdict(self)


def _stamp(mask, r, c, radius):
    disk = _DISK[radius]
    h, w = mask.shape
    r0, r1 = max(r - radius, 0), min(r + radius + 1, h)
    c0, c1 = max(c - radius, 0), min(c + radius + 1, w)
    sub = disk[r0 - (r - radius):r1 - (r - radius), c0 - (c - radius):c1 - (c - radius)]
    region = mask[r0:r1, c0:c1]
    added = int(np.count_nonzero(sub & ~region))
    region |= sub
    return added


def random_walk_blob(shape, area, gen, forbidden=None, attempts=40):
    """Connected blob of roughly ``area`` pixels grown by a persistent random
    walk that stamps small disks.  Returns None if every attempt touched
    ``forbidden``."""
    h, w = shape
    moves = ((-1, 0), (1, 0), (0, -1), (0, 1))
    for _ in range(attempts):
        radius = int(gen.integers(1, 3))
        lo = radius + 1
        r = int(gen.integers(lo, h - lo))
        c = int(gen.integers(lo, w - lo))
        mask = np.zeros(shape, bool)
        count = _stamp(mask, r, c, radius)
        heading = moves[int(gen.integers(4))]
        steps = 0
        while count < area and steps < 8 * area:
            if gen.random() < 0.35:
                heading = moves[int(gen.integers(4))]
            r = min(max(r + heading[0], lo), h - 1 - lo)
            c = min(max(c + heading[1], lo), w - 1 - lo)
            count += _stamp(mask, r, c, radius)
            steps += 1
        if forbidden is None or not (mask & forbidden).any():
            return mask
    return None


def _smooth_field(shape, gen, sigma):
    f = ndimage.gaussian_filter(gen.standard_normal(shape), sigma, mode="reflect")
    return f / (f.std() + 1e-12)


def _river(shape, gen):
    h, w = shape
    n = max(h, w) * 2
    t = np.linspace(0.0, 1.0, n)
    wander = np.cumsum(gen.normal(0.0, 1.0, n))
    wander = ndimage.gaussian_filter1d(wander - wander.mean(), n / 12)
    wander *= 0.18 * min(h, w) / (np.abs(wander).max() + 1e-12)
    start = gen.uniform(0.25, 0.75)
    width = ndimage.gaussian_filter1d(gen.uniform(1.5, 4.0, n), n / 10)
    mask = np.zeros(shape, bool)
    vertical = gen.random() < 0.5
    for ti, off, wd in zip(t, wander, width):
        if vertical:
            r, c = ti * (h - 1), start * (w - 1) + off
        else:
            r, c = start * (h - 1) + off, ti * (w - 1)
        ri, ci = int(round(r)), int(round(c))
        if 0 <= ri < h and 0 <= ci < w:
            _stamp(mask, ri, ci, max(1, int(round(wd))))
    return mask


def _cloud_alpha(shape, gen):
    h, w = shape
    sigma = gen.uniform(0.05, 0.11) * min(h, w)
    cr, cc = gen.uniform(0.15, 0.85) * h, gen.uniform(0.15, 0.85) * w
    yy, xx = np.mgrid[0:h, 0:w]
    d2 = ((yy - cr) / 1.0) ** 2 + ((xx - cc) / gen.uniform(0.7, 1.4)) ** 2
    return 0.95 * np.exp(-d2 / (2 * sigma * sigma))


def synth_scene(cfg: SynthConfig, rng: Rng, scene_id: str = "synth") -> SceneSample:
    """One scene with an exact scar oracle; labels start equal to the oracle."""
    g = rng.generator
    h = w = cfg.canvas
    shape = (h, w)

    # pasture background: green/brown patches, slow illumination drift
    brown = _smooth_field(shape, g, cfg.canvas / 10) > 0.6
    vis = np.where(brown[..., None], np.array(BROWN_PASTURE[0], float), np.array(GREEN_PASTURE[0], float))
    nir = np.where(brown, float(BROWN_PASTURE[1]), float(GREEN_PASTURE[1]))
    shade = 8.0 * _smooth_field(shape, g, cfg.canvas / 6)
    vis = vis + shade[..., None]
    nir = nir + shade

    river = _river(shape, g) if g.random() < cfg.river_prob else np.zeros(shape, bool)
    alpha = _cloud_alpha(shape, g) if g.random() < cfg.cloud_prob else np.zeros(shape)
    cloud = alpha > 0.5

    vis[river] = RIVER[0]
    nir[river] = RIVER[1]

    forbidden = ndimage.binary_dilation(river | (alpha > 0.05), _SQUARE, iterations=2)
    scars = np.zeros(shape, bool)
    n_scars = int(g.integers(cfg.scar_count_range[0], cfg.scar_count_range[1] + 1))
    for _ in range(n_scars):
        area = int(g.integers(cfg.scar_size_range[0], cfg.scar_size_range[1] + 1))
        blocked = forbidden | ndimage.binary_dilation(scars, _SQUARE, iterations=2)
        blob = random_walk_blob(shape, area, g, blocked)
        if blob is None:
            continue
        jitter = g.normal(0.0, 6.0)
        vis[blob] = np.array(SCAR[0], float) + jitter
        nir[blob] = SCAR[1] + jitter
        scars |= blob

    vis = vis + g.normal(0.0, 5.0, vis.shape)
    nir = nir + g.normal(0.0, 5.0, shape)
    vis = (1 - alpha[..., None]) * vis + alpha[..., None] * np.array(CLOUD[0], float)
    nir = (1 - alpha) * nir + alpha * CLOUD[1]

    vis8 = np.clip(np.rint(vis), 0, 255).astype(np.uint8)
    if cfg.nir_bits == 16:
        nir_out = np.clip(np.rint(nir * 257.0), 0, 65535).astype(np.uint16)
    else:
        nir_out = np.clip(np.rint(nir), 0, 255).astype(np.uint8)
    oracle = scars.astype(np.uint8)
    return SceneSample(scene_id, vis8, nir_out[..., None], oracle.copy(), oracle,
                       river=river, cloud=cloud)


def corrupt_labels(sample: SceneSample, f: float, k: int, rng: Rng,
                   size_range=(60, 400), margin: int = 3) -> SceneSample:
    """Drop floor(f * n) whole oracle components from the labels and add
    ``k`` false blobs at least ``margin`` pixels away from any oracle pixel.

    The oracle is left untouched.  ``dropped`` / ``injected`` label maps on
    the returned sample record what was changed.
    """
    if sample.oracle is None:
        raise ContractError(f"{sample.scene_id}: corrupt_labels needs an oracle mask")
    if not 0.0 <= f <= 1.0:
        raise ConfigError(f"label drop fraction must lie in [0, 1], got {f}")
    if k < 0:
        raise ConfigError(f"false label count must be >= 0, got {k}")
    g = rng.generator
    oracle = sample.oracle.astype(bool)
    comps, n = ndimage.label(oracle)
    n_drop = math.floor(f * n)
    chosen = np.sort(g.choice(np.arange(1, n + 1), size=n_drop, replace=False)) if n_drop else np.array([], int)
    drop_mask = np.isin(comps, chosen)
    dropped = np.zeros(oracle.shape, np.int32)
    for i, lab in enumerate(chosen, start=1):
        dropped[comps == lab] = i
    labels = oracle & ~drop_mask

    injected = np.zeros(oracle.shape, np.int32)
    forbidden = ndimage.binary_dilation(oracle, _SQUARE, iterations=margin) if oracle.any() else np.zeros_like(oracle)
    placed = 0
    for _ in range(k):
        area = int(g.integers(size_range[0], size_range[1] + 1))
        blocked = forbidden | ndimage.binary_dilation(injected > 0, _SQUARE, iterations=2)
        blob = random_walk_blob(oracle.shape, area, g, blocked)
        if blob is None:
            continue
        placed += 1
        injected[blob] = placed
        labels |= blob

    return SceneSample(sample.scene_id, sample.vis, sample.nir, labels.astype(np.uint8), sample.oracle,
                       river=sample.river, cloud=sample.cloud, dropped=dropped, injected=injected)


def synth_dataset(cfg: SynthConfig) -> list[SceneSample]:
    """``cfg.n_scenes`` scenes; labels corrupted when the config asks for it."""
    root = Rng(cfg.seed)
    scenes = []
    for i in range(cfg.n_scenes):
        s = synth_scene(cfg, root.split(f"synth/{i}"), f"scene_{i:04d}")
        if cfg.label_drop_fraction > 0 or cfg.false_label_count > 0:
            s = corrupt_labels(s, cfg.label_drop_fraction, cfg.false_label_count, root.split(f"corrupt/{i}"),
                               size_range=cfg.scar_size_range)
        scenes.append(s)
    return scenes
