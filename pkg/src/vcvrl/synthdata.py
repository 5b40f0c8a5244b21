"""Synthetic neuron-like volumes and the patch augmentation protocol.

Volumes are random-walk trees rasterised as tubes: a voxel is foreground when
its centre lies within the branch radius of any walk segment.  Intensity is a
per-branch foreground level plus Gaussian noise everywhere, clipped to [0, 1].
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .volio import read_volume, write_volume

SPLITS = ("train", "val", "test")


class DataQualityError(RuntimeError):
    """No patch met the foreground floor within the allowed redraws."""


@dataclass
class GeneratorConfig:
    dims: Tuple[int, int, int] = (32, 32, 16)
    branch_count: int = 4
    step_length: float = 2.0
    radius_range: Tuple[float, float] = (1.0, 1.8)
    curvature: float = 0.35
    intensity_range: Tuple[float, float] = (0.6, 1.0)
    noise_sigma: float = 0.1
    seed: int = 0
    max_steps: Optional[int] = None

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        self.radius_range = tuple(float(r) for r in self.radius_range)
        self.intensity_range = tuple(float(v) for v in self.intensity_range)
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise ValueError(f"dims must be three extents >= 8, got {self.dims}")
        lo, hi = self.radius_range
        if lo < 1 or hi < lo:
            raise ValueError(f"radius range must satisfy 1 <= lo <= hi, got {self.radius_range}")
        if 2 * hi >= min(self.dims):
            raise ValueError(f"radius {hi} does not fit inside dims {self.dims}")
        if self.branch_count < 1 or self.step_length <= 0:
            raise ValueError("need branch_count >= 1 and step_length > 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AugmentationConfig:
    crop: Tuple[int, int, int] = (16, 16, 8)
    flip_axes: Tuple[int, ...] = (0, 1)
    rotate: bool = True
    foreground_floor: float = 0.001
    max_redraws: int = 100

    def __post_init__(self):
        self.crop = tuple(int(n) for n in self.crop)
        self.flip_axes = tuple(int(a) for a in self.flip_axes)


@dataclass
class VolumeSample:
    volume: np.ndarray
    label: np.ndarray
    seed: int = 0
    provenance: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.volume.shape != self.label.shape:
            raise ValueError(f"volume {self.volume.shape} and label {self.label.shape} differ")

    @property
    def foreground_fraction(self) -> float:
        return float(self.label.mean())


# -- generation ------------------------------------------------------------------


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _turn(direction: np.ndarray, max_angle: float, rng: np.random.Generator) -> np.ndarray:
    other = rng.standard_normal(3)
    angle = rng.uniform(0.0, max_angle)
    perp = other - other.dot(direction) * direction
    norm = np.linalg.norm(perp)
    if norm < 1e-12 or angle == 0.0:
        return direction
    return _unit(math.cos(angle) * direction + math.sin(angle) * perp / norm)


def _exit_fraction(pos: np.ndarray, step: np.ndarray, upper: np.ndarray) -> float:
    """Largest t in [0, 1] keeping ``pos + t*step`` inside [0, upper]."""
    t = 1.0
    for p, s, u in zip(pos, step, upper):
        if s > 0 and p + s > u:
            t = min(t, (u - p) / s)
        elif s < 0 and p + s < 0:
            t = min(t, -p / s)
    return max(t, 0.0)


def _rasterise(shape, segments, radius: float, level: float, label: np.ndarray, intensity: np.ndarray) -> None:
    for a, b in segments:
        lo = np.maximum(np.floor(np.minimum(a, b) - radius), 0).astype(int)
        hi = np.minimum(np.ceil(np.maximum(a, b) + radius) + 1, shape).astype(int)
        grids = np.meshgrid(*(np.arange(l, h) for l, h in zip(lo, hi)), indexing="ij")
        pts = np.stack(grids, axis=-1).astype(np.float64)
        ab = b - a
        denom = ab.dot(ab)
        t = np.clip(((pts - a) @ ab) / denom, 0.0, 1.0) if denom > 0 else np.zeros(pts.shape[:-1])
        dist = np.linalg.norm(pts - (a + t[..., None] * ab), axis=-1)
        inside = dist <= radius
        box = tuple(slice(l, h) for l, h in zip(lo, hi))
        label[box] |= inside
        intensity[box] = np.where(inside, np.maximum(intensity[box], level), intensity[box])


def generate_volume(config: GeneratorConfig) -> VolumeSample:
    """Rasterise a seeded random-walk tree into an intensity and a label volume."""
    rng = np.random.default_rng(config.seed)
    dims = np.asarray(config.dims)
    upper = (dims - 1).astype(np.float64)
    max_steps = config.max_steps or int(math.ceil(4 * dims.max() / config.step_length))
    label = np.zeros(config.dims, dtype=bool)
    intensity = np.zeros(config.dims, dtype=np.float64)
    all_segments: List[Tuple[np.ndarray, np.ndarray]] = []
    branches = []
    for b in range(config.branch_count):
        if not all_segments:
            start = rng.uniform(0.25, 0.75, size=3) * upper
        else:
            a, c = all_segments[rng.integers(len(all_segments))]
            start = a + rng.uniform() * (c - a)
        direction = _unit(rng.standard_normal(3))
        radius = rng.uniform(*config.radius_range)
        level = rng.uniform(*config.intensity_range)
        pos = start
        segments = []
        length = 0.0
        for _ in range(max_steps):
            direction = _turn(direction, config.curvature, rng)
            step = config.step_length * direction
            t = _exit_fraction(pos, step, upper)
            nxt = pos + t * step
            if t > 0:
                segments.append((pos, nxt))
                length += t * config.step_length
            if t < 1.0:
                break
            pos = nxt
        _rasterise(config.dims, segments, radius, level, label, intensity)
        all_segments.extend(segments)
        branches.append(
            {"start": [float(v) for v in start], "radius": float(radius), "intensity": float(level), "length": length}
        )
    noise = rng.normal(0.0, config.noise_sigma, size=config.dims) if config.noise_sigma > 0 else 0.0
    volume = np.clip(intensity + noise, 0.0, 1.0).astype(np.float32)
    provenance = {"generator": config.to_dict(), "branches": branches}
    return VolumeSample(volume, label.astype(np.uint8), config.seed, provenance)


def sample_seed(base_seed: int, split: str, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, SPLITS.index(split), index]).generate_state(1)[0])


def make_dataset(config: GeneratorConfig, counts: Sequence[int] = (35, 3, 4)) -> Dict[str, List[VolumeSample]]:
    """Train/val/test volumes; each volume's seed is derived from ``config.seed``."""
    data: Dict[str, List[VolumeSample]] = {}
    for split, n in zip(SPLITS, counts):
        samples = []
        for i in range(n):
            cfg = GeneratorConfig(**{**config.to_dict(), "seed": sample_seed(config.seed, split, i)})
            samples.append(generate_volume(cfg))
        data[split] = samples
    return data


# -- augmentation ----------------------------------------------------------------


def flip(sample: VolumeSample, axis: int) -> VolumeSample:
    return VolumeSample(
        np.ascontiguousarray(np.flip(sample.volume, axis)),
        np.ascontiguousarray(np.flip(sample.label, axis)),
        sample.seed,
        dict(sample.provenance),
    )


def rotate90(sample: VolumeSample, k: int, plane: Tuple[int, int] = (0, 1)) -> VolumeSample:
    return VolumeSample(
        np.ascontiguousarray(np.rot90(sample.volume, k, axes=plane)),
        np.ascontiguousarray(np.rot90(sample.label, k, axes=plane)),
        sample.seed,
        dict(sample.provenance),
    )


def extract_patch(sample: VolumeSample, aug: AugmentationConfig, rng: np.random.Generator) -> VolumeSample:
    """Random crop meeting the foreground floor, then random flips and an in-plane rotation."""
    crop = aug.crop
    shape = sample.volume.shape
    if any(c > n for c, n in zip(crop, shape)):
        raise ValueError(f"crop {crop} larger than volume {shape}")
    for attempt in range(aug.max_redraws):
        origin = [int(rng.integers(0, n - c + 1)) for n, c in zip(shape, crop)]
        box = tuple(slice(o, o + c) for o, c in zip(origin, crop))
        label = sample.label[box]
        if label.mean() > aug.foreground_floor:
            break
    else:
        raise DataQualityError(
            f"no {crop} patch with foreground above {aug.foreground_floor} after {aug.max_redraws} draws (seed {sample.seed})"
        )
    patch = VolumeSample(sample.volume[box].copy(), label.copy(), sample.seed)
    flips = [a for a in aug.flip_axes if rng.random() < 0.5]
    for a in flips:
        patch = flip(patch, a)
    k = 0
    if aug.rotate:
        # quarter turns only keep the crop shape when the plane is square
        k = int(rng.integers(4)) if crop[0] == crop[1] else 2 * int(rng.integers(2))
        patch = rotate90(patch, k)
    patch.provenance = {"source_seed": sample.seed, "origin": origin, "flips": flips, "rot90": k, "redraws": attempt}
    return patch


# -- on-disk datasets -------------------------------------------------------------


def write_sample(directory, name: str, sample: VolumeSample) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_volume(directory / f"{name}.img.vvol", sample.volume)
    write_volume(directory / f"{name}.lbl.vvol", sample.label)


def read_sample(directory, name: str, seed: int = 0, provenance: Optional[dict] = None) -> VolumeSample:
    directory = Path(directory)
    volume = read_volume(directory / f"{name}.img.vvol")
    label = read_volume(directory / f"{name}.lbl.vvol")
    return VolumeSample(volume, label, seed, provenance or {})


def write_dataset(directory, data: Dict[str, List[VolumeSample]]) -> Path:
    directory = Path(directory)
    manifest = {}
    for split, samples in data.items():
        entries = []
        for i, s in enumerate(samples):
            name = f"{split}_{i:03d}"
            write_sample(directory / split, name, s)
            entries.append({"name": name, "seed": s.seed, "provenance": s.provenance})
        manifest[split] = entries
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_dataset(directory) -> Dict[str, List[VolumeSample]]:
    """Load a directory written by :func:`write_dataset`.

    Without a manifest, every ``*.img.vvol`` under ``<split>/`` is read (so
    converted real volumes can be dropped in).
    """
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    data: Dict[str, List[VolumeSample]] = {}
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        for split, entries in manifest.items():
            data[split] = [read_sample(directory / split, e["name"], e["seed"], e["provenance"]) for e in entries]
        return data
    for split in SPLITS:
        files = sorted((directory / split).glob("*.img.vvol"))
        data[split] = [read_sample(directory / split, f.name[: -len(".img.vvol")]) for f in files]
    return data
