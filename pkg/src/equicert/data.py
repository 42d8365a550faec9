"""Synthetic lane dataset.

Each sample is a textured background with K thick, roughly vertical line
segments painted over it, pixel noise on top, and masks for both the binary
lane class and the per-lane instance ids. Everything is drawn from
counter-based streams keyed by (seed, split offset + sample index), so a
config generates bit-identical data no matter how or where it runs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import serialize
from .metrics import relabel_contiguous
from .stats import STREAM_DATA, rng_stream

# split offsets keep val/test streams fixed when train_size changes
_SPLIT_OFFSETS = {"train": 0, "val": 1_000_000, "test": 2_000_000}

_BG_BASE = -0.45
_LANE_BASE = 0.35
_TEXTURE_AMPLITUDE = 0.25
_LANE_JITTER = 0.12
_MAX_DRIFT = 5.0


class DatasetConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    height: int = 32
    width: int = 64
    channels: int = 1
    min_lanes: int = 2
    max_lanes: int = 4
    thickness: float = 2.4
    noise_level: float = 0.12
    train_size: int = 400
    val_size: int = 40
    test_size: int = 80
    seed: int = 0

    def __post_init__(self):
        if min(self.height, self.width, self.channels) < 1:
            raise DatasetConfigError("dimensions must be positive")
        if self.min_lanes < 0 or self.max_lanes < self.min_lanes:
            raise DatasetConfigError("lane count range must satisfy 0 <= min <= max")
        if min(self.train_size, self.val_size, self.test_size) < 1:
            raise DatasetConfigError("split sizes must be positive")
        if self.thickness <= 0 or self.noise_level < 0:
            raise DatasetConfigError("thickness must be positive, noise nonnegative")
        if self.max_lanes > 0:
            slot = (self.width - 2 * self._margin) / self.max_lanes
            if slot < 2.0 * self.thickness + 2.0:
                raise DatasetConfigError(
                    f"{self.max_lanes} lanes of thickness {self.thickness} "
                    f"cannot fit in width {self.width}")

    @property
    def _margin(self) -> float:
        return self.thickness + 1.0


@dataclass
class LaneSample:
    image: np.ndarray   # (C, H, W) in [-1, 1]
    seg_gt: np.ndarray  # (H, W) uint8
    inst_gt: np.ndarray  # (H, W) int64, 0 = background


@dataclass
class LaneDataset:
    config: DatasetConfig
    train: list[LaneSample] = field(default_factory=list)
    val: list[LaneSample] = field(default_factory=list)
    test: list[LaneSample] = field(default_factory=list)

    def split(self, name: str) -> list[LaneSample]:
        return getattr(self, name)


def _segment_distance(rows, cols, p0, p1):
    """Distance from each pixel to the segment p0-p1 (row, col coordinates)."""
    d = p1 - p0
    length2 = float(d @ d)
    if length2 == 0.0:
        return np.hypot(rows - p0[0], cols - p0[1])
    t = ((rows - p0[0]) * d[0] + (cols - p0[1]) * d[1]) / length2
    t = np.clip(t, 0.0, 1.0)
    proj_r = p0[0] + t * d[0]
    proj_c = p0[1] + t * d[1]
    return np.hypot(rows - proj_r, cols - proj_c)


def _smooth_texture(rng, h, w):
    coarse = rng.uniform(-_TEXTURE_AMPLITUDE, _TEXTURE_AMPLITUDE, size=(h // 4 + 2, w // 4 + 2))
    up = np.repeat(np.repeat(coarse, 4, axis=0), 4, axis=1)[:h, :w]
    # two passes of a small box blur soften the block edges
    for _ in range(2):
        padded = np.pad(up, 1, mode="edge")
        up = (
            padded[:-2, :-2] + padded[:-2, 1:-1] + padded[:-2, 2:] +
            padded[1:-1, :-2] + padded[1:-1, 1:-1] + padded[1:-1, 2:] +
            padded[2:, :-2] + padded[2:, 1:-1] + padded[2:, 2:]) / 9.0
    return up


def generate_sample(cfg: DatasetConfig, sample_index: int) -> LaneSample:
    rng = rng_stream(cfg.seed, STREAM_DATA, sample_index)
    h, w = cfg.height, cfg.width

    base = _BG_BASE + _smooth_texture(rng, h, w)
    rows, cols = np.indices((h, w), dtype=np.float64)
    inst = np.zeros((h, w), dtype=np.int64)

    k = int(rng.integers(cfg.min_lanes, cfg.max_lanes + 1))
    margin = cfg._margin
    paint = np.zeros((h, w))
    if k > 0:
        slot = (w - 2 * margin) / k
        for lane in range(k):
            cx = margin + slot * (lane + float(rng.uniform(0.2, 0.8)))
            drift = float(rng.uniform(-_MAX_DRIFT, _MAX_DRIFT))
            p0 = np.array([h - 1.0, cx])
            p1 = np.array([0.0, cx + drift])
            dist = _segment_distance(rows, cols, p0, p1)
            mask = (dist <= cfg.thickness / 2.0) & (inst == 0)
            inst[mask] = lane + 1
            paint[mask] = _LANE_BASE + float(rng.uniform(-_LANE_JITTER, _LANE_JITTER))

    inst = relabel_contiguous(inst)
    seg = (inst > 0).astype(np.uint8)

    scene = np.where(seg > 0, paint, base)
    image = np.empty((cfg.channels, h, w))
    for c in range(cfg.channels):
        noisy = scene + rng.normal(0.0, cfg.noise_level, size=(h, w))
        image[c] = np.clip(noisy, -1.0, 1.0)
    return LaneSample(image=image, seg_gt=seg, inst_gt=inst)


def gen_lane_dataset(cfg: DatasetConfig) -> LaneDataset:
    """Generate the train/val/test splits deterministically from the seed."""
    ds = LaneDataset(config=cfg)
    for name, size in (("train", cfg.train_size), ("val", cfg.val_size), ("test", cfg.test_size)):
        offset = _SPLIT_OFFSETS[name]
        samples = [generate_sample(cfg, offset + i) for i in range(size)]
        getattr(ds, name).extend(samples)
    return ds


# ---------------------------------------------------------------------------
# persistence: manifest JSON + one tensor container per sample
# ---------------------------------------------------------------------------

def save_dataset(directory, ds: LaneDataset) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"config": asdict(ds.config), "splits": {}}
    for name in ("train", "val", "test"):
        files = []
        for i, sample in enumerate(ds.split(name)):
            fname = f"{name}_{i:05d}.bin"
            serialize.save_tensors(root / fname, {
                "image": sample.image,
                "seg_gt": sample.seg_gt.astype(np.float64),
                "inst_gt": sample.inst_gt.astype(np.float64),
            })
            files.append(fname)
        manifest["splits"][name] = files
    (root / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(directory) -> LaneDataset:
    root = Path(directory)
    manifest = json.loads((root / "dataset.json").read_text())
    cfg = DatasetConfig(**manifest["config"])
    ds = LaneDataset(config=cfg)
    for name in ("train", "val", "test"):
        for fname in manifest["splits"][name]:
            tensors = serialize.load_tensors(root / fname)
            ds.split(name).append(LaneSample(
                image=tensors["image"],
                seg_gt=tensors["seg_gt"].astype(np.uint8),
                inst_gt=tensors["inst_gt"].astype(np.int64),
            ))
    return ds
