"""Dataset manifests, deterministic splits and the synthetic multi-GSD generator.

A dataset lives in a directory holding ``manifest.csv`` with the header
``path,gsd,label,series_id,split``. Paths are relative to that directory,
``label`` is a category name and ``split`` is one of ``train``, ``val``,
``test`` or empty (unassigned).
"""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from satdino.exceptions import ConfigurationError, DataError, SplitError

MANIFEST_NAME = "manifest.csv"
MANIFEST_HEADER = ("path", "gsd", "label", "series_id", "split")
SPLIT_TOKENS = ("train", "val", "test", "")
SPLIT_NAMES = ("train", "val", "test")

SYNTH_CLASSES = (
    "stripes",
    "checkerboard",
    "dot-lattice",
    "gradient-blobs",
    "cross-hatch",
    "rings",
    "noise-texture",
    "patches",
)


@dataclass
class GeoSample:
    image: np.ndarray
    gsd: float
    label: int = -1
    series_id: Optional[str] = None
    timestamp: Optional[float] = None
    sample_id: object = None

    def __post_init__(self):
        if not self.gsd > 0:
            raise DataError(f"sample {self.sample_id!r}: gsd must be positive, got {self.gsd}")


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    gsd: float
    label: str
    series_id: str = ""
    split: str = ""


@dataclass
class DatasetManifest:
    root: Path
    records: list
    categories: list = field(default_factory=list)

    def __post_init__(self):
        self.root = Path(self.root)
        if not self.categories:
            self.categories = sorted({r.label for r in self.records})
        self._index = {name: i for i, name in enumerate(self.categories)}

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return (self.root == other.root and self.records == other.records
                and self.categories == other.categories)

    def label_id(self, record: ManifestRecord) -> int:
        return self._index[record.label]

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]

    def split_counts(self) -> dict:
        counts = defaultdict(int)
        for r in self.records:
            counts[r.split] += 1
        return dict(counts)

    def load_samples(self, split: Optional[str] = None) -> list:
        records = self.records if split is None else self.split(split)
        missing = [r.path for r in records if not (self.root / r.path).is_file()]
        if missing:
            raise DataError("missing images:\n  " + "\n  ".join(missing))
        return [
            GeoSample(
                image=load_image(self.root / r.path),
                gsd=r.gsd,
                label=self.label_id(r),
                series_id=r.series_id or None,
                sample_id=r.path,
            )
            for r in records
        ]

    def save(self, path: Optional[Path] = None) -> Path:
        path = Path(path) if path else self.root / MANIFEST_NAME
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(MANIFEST_HEADER)
            for r in self.records:
                writer.writerow([r.path, repr(float(r.gsd)), r.label, r.series_id, r.split])
        return path


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def save_image(path, image: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    # fixed compression settings keep the bytes reproducible
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path, format="PNG", optimize=False, compress_level=6)


def load_dataset(root_dir, check_files: bool = True) -> DatasetManifest:
    """Read and validate ``root_dir/manifest.csv``."""
    root = Path(root_dir)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise DataError(f"no {MANIFEST_NAME} in {root}")
    problems = []
    records = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != MANIFEST_HEADER:
            raise DataError(
                f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {reader.fieldnames}"
            )
        for lineno, row in enumerate(reader, start=2):
            rel = (row["path"] or "").strip()
            where = f"row {lineno} ({rel or '<empty>'})"
            if not rel:
                problems.append(f"{where}: empty path")
                continue
            if rel in seen:
                problems.append(f"{where}: duplicate path")
            seen.add(rel)
            try:
                gsd = float(row["gsd"])
            except (TypeError, ValueError):
                problems.append(f"{where}: gsd {row['gsd']!r} is not a number")
                continue
            if not (gsd > 0 and math.isfinite(gsd)):
                problems.append(f"{where}: gsd must be positive, got {row['gsd']}")
            split = (row["split"] or "").strip()
            if split not in SPLIT_TOKENS:
                problems.append(f"{where}: unknown split {split!r}")
            label = (row["label"] or "").strip()
            if not label:
                problems.append(f"{where}: empty label")
            if check_files and not (root / rel).is_file():
                problems.append(f"{where}: file not found")
            records.append(ManifestRecord(rel, gsd, label, (row["series_id"] or "").strip(), split))
    if problems:
        raise DataError(f"{path}: {len(problems)} problem(s)\n  " + "\n  ".join(problems))
    return DatasetManifest(root, records)


def _allocate(n: int, fractions: Sequence[float]) -> list[int]:
    # largest-remainder rounding, ties broken by split order
    exact = [f * n for f in fractions]
    counts = [math.floor(e) for e in exact]
    order = sorted(range(len(fractions)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_dataset(manifest: DatasetManifest, fractions: Sequence[float] = (0.8, 0.2),
                  seed: int = 0, persist: bool = True) -> DatasetManifest:
    """Stratified, seeded assignment of every record to a split."""
    fractions = [float(f) for f in fractions]
    if not 1 <= len(fractions) <= len(SPLIT_NAMES):
        raise ConfigurationError(f"between 1 and {len(SPLIT_NAMES)} fractions expected")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"fractions must be non-negative and sum to 1, got {fractions}")
    by_class = defaultdict(list)
    for i, r in enumerate(manifest.records):
        by_class[r.label].append(i)
    required = sum(f > 0 for f in fractions)
    assignment = {}
    for ci, label in enumerate(sorted(by_class)):
        idx = by_class[label]
        if len(idx) < required:
            raise SplitError(
                f"class {label!r} has {len(idx)} sample(s) but {required} splits need one each"
            )
        rng = np.random.default_rng([seed, ci])
        perm = [idx[j] for j in rng.permutation(len(idx))]
        counts = _allocate(len(idx), fractions)
        # every split with a positive fraction gets at least one sample
        for k, f in enumerate(fractions):
            if f > 0 and counts[k] == 0:
                donor = max(range(len(counts)), key=lambda j: counts[j])
                counts[donor] -= 1
                counts[k] += 1
        start = 0
        for name, c in zip(SPLIT_NAMES, counts):
            for j in perm[start:start + c]:
                assignment[j] = name
            start += c
    records = [replace(r, split=assignment[i]) for i, r in enumerate(manifest.records)]
    out = DatasetManifest(manifest.root, records, list(manifest.categories))
    if persist:
        out.save()
    return out


def compute_normalization(samples: Sequence[GeoSample]) -> tuple[tuple, tuple]:
    """Per-channel mean and std of pixel values scaled to [0, 1]."""
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for s in samples:
        px = s.image.reshape(-1, 3).astype(np.float64) / 255.0
        total += px.sum(axis=0)
        total_sq += (px ** 2).sum(axis=0)
        count += px.shape[0]
    if count == 0:
        raise DataError("cannot compute normalization from an empty sample set")
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean ** 2, 1e-12))
    return tuple(float(m) for m in mean), tuple(float(s) for s in std)


def group_series(samples: Sequence[GeoSample]) -> list:
    """Group samples into time series, keeping first-appearance order.

    Samples without a series id form singleton groups.
    """
    groups = {}
    order = []
    for i, s in enumerate(samples):
        key = s.series_id if s.series_id else ("__single__", i)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(s)
    return [groups[k] for k in order]


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 8
    image_size: int = 64
    gsd_range: tuple = (0.307, 1.705)
    samples_per_class: int = 32
    seed: int = 0
    series_size: int = 1
    period_m: float = 6.0

    def __post_init__(self):
        if not 2 <= self.n_classes <= len(SYNTH_CLASSES):
            raise ConfigurationError(f"n_classes must be in [2, {len(SYNTH_CLASSES)}]")
        lo, hi = self.gsd_range
        if not 0 < lo <= hi <= 10:
            raise ConfigurationError(f"gsd_range must lie within (0, 10], got {self.gsd_range}")
        if self.image_size < 8 or self.samples_per_class < 1 or self.series_size < 1:
            raise ConfigurationError("image_size >= 8, samples_per_class >= 1, series_size >= 1")


def _rotate(u, v, theta):
    c, s = math.cos(theta), math.sin(theta)
    return c * u + s * v, -s * u + c * v


def _pattern(kind: str, u, v, period: float, scene: dict, phase: float):
    """Intensity field in [0, 1] over ground coordinates (meters)."""
    a, b = _rotate(u - scene["cx"], v - scene["cy"], scene["theta"])
    two_pi = 2 * math.pi
    if kind == "stripes":
        return 0.5 + 0.5 * np.sin(two_pi * a / period + phase)
    if kind == "checkerboard":
        return 0.5 + 0.5 * np.tanh(4 * np.sin(two_pi * a / period + phase)
                                   * np.sin(two_pi * b / period))
    if kind == "dot-lattice":
        da = (a / period + phase / two_pi) % 1.0 - 0.5
        db = (b / period) % 1.0 - 0.5
        return np.exp(-(da ** 2 + db ** 2) / (2 * 0.15 ** 2))
    if kind == "gradient-blobs":
        ia = np.floor(a / period)
        ib = np.floor(b / period)
        jit = scene["table"]
        ja = jit[(ia.astype(int) % 64), (ib.astype(int) % 64)] * 0.15
        fa = a / period - ia - 0.5 - ja
        fb = b / period - ib - 0.5 + ja
        blobs = np.exp(-(fa ** 2 + fb ** 2) / (2 * 0.22 ** 2))
        ramp = 0.15 * (u - scene["cx"]) / (abs(scene["extent"]) + 1e-9)
        return np.clip(0.8 * blobs + 0.1 + ramp + 0.02 * math.sin(phase), 0, 1)
    if kind == "cross-hatch":
        la = (0.5 + 0.5 * np.cos(two_pi * a / period + phase)) ** 4
        lb = (0.5 + 0.5 * np.cos(two_pi * b / period)) ** 4
        return np.clip(la + lb, 0, 1)
    if kind == "rings":
        r = np.hypot(a, b)
        return 0.5 + 0.5 * np.sin(two_pi * r / period + phase)
    if kind == "noise-texture":
        out = np.zeros_like(a)
        for fa, fb, ph in scene["waves"]:
            out += np.cos(two_pi * (fa * a + fb * b) / period + ph + phase)
        return 0.5 + 0.5 * out / math.sqrt(len(scene["waves"]) * 2)
    if kind == "patches":
        ia = np.floor(a / period).astype(int) % 64
        ib = np.floor(b / period).astype(int) % 64
        fill = 0.3 + 0.5 * scene["table"][ia, ib]
        border = (0.5 + 0.5 * np.cos(two_pi * a / period)) ** 8 \
            + (0.5 + 0.5 * np.cos(two_pi * b / period)) ** 8
        return np.clip(fill * (1 - np.clip(border, 0, 1)), 0, 1)
    raise ConfigurationError(f"unknown synthetic class {kind!r}")


_PALETTES = {
    "stripes": ((0.20, 0.35, 0.15), (0.75, 0.70, 0.45)),
    "checkerboard": ((0.15, 0.15, 0.30), (0.80, 0.75, 0.70)),
    "dot-lattice": ((0.30, 0.45, 0.25), (0.85, 0.85, 0.80)),
    "gradient-blobs": ((0.45, 0.35, 0.25), (0.15, 0.45, 0.20)),
    "cross-hatch": ((0.55, 0.55, 0.50), (0.15, 0.15, 0.15)),
    "rings": ((0.25, 0.30, 0.50), (0.70, 0.60, 0.40)),
    "noise-texture": ((0.35, 0.30, 0.20), (0.60, 0.65, 0.40)),
    "patches": ((0.10, 0.10, 0.10), (0.70, 0.80, 0.35)),
}


def render_scene(kind: str, size: int, gsd: float, period: float, scene: dict,
                 phase: float = 0.0, illumination: float = 1.0,
                 noise: Optional[np.ndarray] = None) -> np.ndarray:
    """Render one synthetic image at ``gsd`` m/px with 2x2 supersampling."""
    ss = 2
    coords = (np.arange(size * ss) + 0.5) / ss * gsd
    u, v = np.meshgrid(coords, coords)
    field_ = _pattern(kind, u, v, period, scene, phase)
    field_ = field_.reshape(size, ss, size, ss).mean(axis=(1, 3))
    lo, hi = (np.asarray(c) for c in _PALETTES[kind])
    tint = np.asarray(scene["tint"])
    rgb = (lo + tint) * (1 - field_[..., None]) + (hi + tint) * field_[..., None]
    rgb = rgb * illumination
    if noise is not None:
        rgb = rgb + noise
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


def _scene_params(rng: np.random.Generator, extent: float) -> dict:
    waves = []
    for _ in range(16):
        ang = rng.uniform(0, 2 * math.pi)
        mag = rng.uniform(0.9, 1.1)
        waves.append((mag * math.cos(ang), mag * math.sin(ang), rng.uniform(0, 2 * math.pi)))
    return {
        "theta": rng.uniform(0, math.pi),
        "cx": rng.uniform(0, extent),
        "cy": rng.uniform(0, extent),
        "extent": extent,
        "tint": tuple(rng.uniform(-0.05, 0.05, size=3)),
        "table": rng.random((64, 64)),
        "waves": waves,
    }


def generate_synthetic(spec: SynthSpec, out_dir) -> DatasetManifest:
    """Write a procedural multi-GSD dataset and its manifest to ``out_dir``.

    Every class has a defining feature size of ``spec.period_m`` meters, so
    the apparent pixel frequency of the pattern is proportional to the GSD.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    lo, hi = spec.gsd_range
    for ci, kind in enumerate(SYNTH_CLASSES[: spec.n_classes]):
        n_scenes = math.ceil(spec.samples_per_class / spec.series_size)
        written = 0
        for si in range(n_scenes):
            rng = np.random.default_rng([spec.seed, ci, si])
            gsd = float(rng.uniform(lo, hi))
            scene = _scene_params(rng, spec.image_size * gsd)
            series_id = f"{kind}-{si:05d}" if spec.series_size > 1 else ""
            for t in range(min(spec.series_size, spec.samples_per_class - written)):
                phase = 0.0 if t == 0 else float(rng.uniform(-0.6, 0.6))
                illum = float(rng.uniform(0.85, 1.15))
                noise = rng.normal(0.0, 0.015, size=(spec.image_size, spec.image_size, 3))
                img = render_scene(kind, spec.image_size, gsd, spec.period_m, scene,
                                   phase=phase, illumination=illum, noise=noise)
                rel = f"images/{kind}/{si:05d}_{t:02d}.png"
                save_image(out / rel, img)
                records.append(ManifestRecord(rel, gsd, kind, series_id, ""))
                written += 1
    manifest = DatasetManifest(out, records)
    manifest.save()
    return manifest
