"""Synthetic defect-image dataset generator.

Reproduces the two pathologies that make production inspection data hard:
a head class whose samples form several clusters (one per product line,
because the class-agnostic background dominates pixel space), and rare
defect classes whose few samples are scattered across those same
backgrounds. Images are 8-bit grayscale PNGs: a product-line-specific
periodic grating plus a class-specific defect overlay plus Gaussian noise.
Everything is deterministic given the dataset spec.

Manifest format (JSONL): the first line is a header object
{"spec_hash", "seed", "num_classes", "num_product_lines"}; each following
line is {"path", "class_id", "product_line_id", "split"} with paths relative
to the manifest file.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

TRAIN_FRACTION = 0.6

# seed-stream tags keep the per-line, per-class, and per-record generators apart
_LINE_TAG = 0x11E5
_CLASS_TAG = 0xC1A5
_SPLIT_TAG = 0x51D7

PRIMITIVES = ("blob", "scratch", "ring", "cluster")


# ---------------------------------------------------------------------------
# dataset specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSpec:
    """Counts and rendering parameters for one synthetic dataset.

    ``counts[c][p]`` is the number of samples of class ``c`` drawn from
    product line ``p``. Class 0 renders as pure background (the "normal"
    class); every class must have at least one sample somewhere.
    """

    num_classes: int
    num_product_lines: int
    counts: tuple[tuple[int, ...], ...]
    image_size: int = 64
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or self.num_product_lines < 1:
            raise ValueError("need at least one class and one product line")
        counts = tuple(tuple(int(n) for n in row) for row in self.counts)
        object.__setattr__(self, "counts", counts)
        if len(counts) != self.num_classes:
            raise ValueError(f"counts has {len(counts)} rows, expected {self.num_classes}")
        for c, row in enumerate(counts):
            if len(row) != self.num_product_lines:
                raise ValueError(f"counts row {c} has {len(row)} cells, expected {self.num_product_lines}")
            if any(n < 0 for n in row):
                raise ValueError(f"negative count in class {c}")
            if sum(row) < 1:
                raise ValueError(f"class {c} has no samples in any product line")
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError("noise must lie in [0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "num_product_lines": self.num_product_lines,
            "counts": [list(row) for row in self.counts],
            "image_size": self.image_size,
            "noise": self.noise,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown dataset spec keys: {sorted(unknown)}")
        data = dict(data)
        data["counts"] = tuple(tuple(row) for row in data["counts"])
        return cls(**data)

    def spec_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]

    def render(self, line_id: int, class_id: int, rng_seed: int) -> np.ndarray:
        """Render one sample, validating ids against this spec."""
        if not 0 <= line_id < self.num_product_lines:
            raise ValueError(f"unknown product line id {line_id}")
        if not 0 <= class_id < self.num_classes:
            raise ValueError(f"unknown class id {class_id}")
        return render_sample(line_id, class_id, rng_seed, self.image_size, self.noise)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _line_params(line_id: int) -> dict:
    rng = np.random.default_rng((_LINE_TAG, line_id))
    theta = rng.uniform(0.0, math.pi)
    return {
        "freq1": rng.uniform(3.0, 9.0),
        "freq2": rng.uniform(9.0, 16.0),
        "theta": theta,
        "phase1": rng.uniform(0.0, 2.0 * math.pi),
        "phase2": rng.uniform(0.0, 2.0 * math.pi),
        "amp1": 0.18,
        "amp2": 0.07,
    }


def _class_params(class_id: int) -> dict:
    rng = np.random.default_rng((_CLASS_TAG, class_id))
    sign = 1.0 if rng.random() < 0.5 else -1.0
    return {
        "primitive": PRIMITIVES[(class_id - 1) % len(PRIMITIVES)],
        "amplitude": sign * rng.uniform(0.5, 0.75),
        "size": rng.uniform(0.09, 0.16),
        "thickness": rng.uniform(0.020, 0.040),
        "n_dots": int(rng.integers(4, 8)),
    }


def _background(size: int, line_id: int, rng: np.random.Generator) -> np.ndarray:
    p = _line_params(line_id)
    y, x = np.mgrid[0:size, 0:size] / float(size)
    u = x * math.cos(p["theta"]) + y * math.sin(p["theta"])
    v = -x * math.sin(p["theta"]) + y * math.cos(p["theta"])
    ph1 = p["phase1"] + rng.uniform(-0.25, 0.25)
    ph2 = p["phase2"] + rng.uniform(-0.25, 0.25)
    img = 0.5 \
        + p["amp1"] * np.sin(2.0 * math.pi * p["freq1"] * u + ph1) \
        + p["amp2"] * np.sin(2.0 * math.pi * p["freq2"] * v + ph2)
    return img


def _overlay_defect(img: np.ndarray, class_id: int, rng: np.random.Generator) -> None:
    p = _class_params(class_id)
    size = img.shape[0]
    y, x = np.mgrid[0:size, 0:size] / float(size)
    cx = rng.uniform(0.25, 0.75)
    cy = rng.uniform(0.25, 0.75)
    amp = p["amplitude"] * rng.uniform(0.85, 1.15)
    scale = p["size"] * rng.uniform(0.85, 1.15)

    if p["primitive"] == "blob":
        r2 = (x - cx) ** 2 + (y - cy) ** 2
        img += amp * np.exp(-r2 / (2.0 * scale**2))
    elif p["primitive"] == "scratch":
        angle = rng.uniform(0.0, math.pi)
        dx, dy = math.cos(angle), math.sin(angle)
        half = 2.2 * scale
        # distance to the segment through (cx, cy) with direction (dx, dy)
        t = np.clip((x - cx) * dx + (y - cy) * dy, -half, half)
        d2 = (x - cx - t * dx) ** 2 + (y - cy - t * dy) ** 2
        img += amp * np.exp(-d2 / (2.0 * p["thickness"] ** 2))
    elif p["primitive"] == "ring":
        r = np.sqrt((x - cx) ** 2 + (y - cy) ** 2)
        img += amp * np.exp(-((r - scale) ** 2) / (2.0 * p["thickness"] ** 2))
    elif p["primitive"] == "cluster":
        sigma = scale / 3.0
        for _ in range(p["n_dots"]):
            ox = cx + rng.uniform(-1.4, 1.4) * scale
            oy = cy + rng.uniform(-1.4, 1.4) * scale
            r2 = (x - ox) ** 2 + (y - oy) ** 2
            img += amp * np.exp(-r2 / (2.0 * sigma**2))
    else:  # pragma: no cover - PRIMITIVES is closed
        raise ValueError(f"unknown primitive {p['primitive']!r}")


def render_sample(line_id: int, class_id: int, rng_seed: int, size: int = 64,
                  noise: float = 0.05) -> np.ndarray:
    """Render one 8-bit grayscale sample.

    The image is a product-line background grating, a class-specific defect
    overlay (none for class 0), and Gaussian pixel noise, fully determined
    by (line_id, class_id, rng_seed).
    """
    if line_id < 0 or class_id < 0:
        raise ValueError("line and class ids must be nonnegative")
    rng = np.random.default_rng((line_id, class_id, rng_seed))
    img = _background(size, line_id, rng)
    if class_id > 0:
        _overlay_defect(img, class_id, rng)
    if noise > 0:
        img += rng.normal(0.0, noise, img.shape)
    return np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)


def save_png(img: np.ndarray, path) -> None:
    Image.fromarray(img, mode="L").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

@dataclass
class Manifest:
    """Header plus one record per image; see the module docstring for the
    on-disk JSONL layout."""

    header: dict
    records: list[dict] = field(default_factory=list)

    RECORD_FIELDS = ("path", "class_id", "product_line_id", "split")

    def split_records(self, split: str) -> list[dict]:
        return [r for r in self.records if r["split"] == split]

    def class_counts(self, split: str = "train") -> np.ndarray:
        counts = np.zeros(int(self.header["num_classes"]), dtype=np.int64)
        for r in self.split_records(split):
            counts[r["class_id"]] += 1
        return counts

    def validate(self) -> None:
        paths = [r["path"] for r in self.records]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest paths are not unique")
        for r in self.records:
            if set(r) != set(self.RECORD_FIELDS):
                raise ValueError(f"bad manifest record fields: {sorted(r)}")
            if r["split"] not in ("train", "test"):
                raise ValueError(f"bad split value {r['split']!r}")

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            fh.write(json.dumps(self.header, sort_keys=True) + "\n")
            for r in self.records:
                fh.write(json.dumps({k: r[k] for k in self.RECORD_FIELDS}) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "Manifest":
        with open(path) as fh:
            lines = [line for line in fh if line.strip()]
        if not lines:
            raise ValueError(f"empty manifest: {path}")
        manifest = cls(header=json.loads(lines[0]),
                       records=[json.loads(line) for line in lines[1:]])
        manifest.validate()
        return manifest


# ---------------------------------------------------------------------------
# generation and statistics
# ---------------------------------------------------------------------------

def _split_cell(n: int, spec_seed: int, class_id: int, line_id: int) -> np.ndarray:
    """Boolean train mask for the n samples of one (class, line) cell."""
    rng = np.random.default_rng((_SPLIT_TAG, spec_seed, class_id, line_id))
    mask = np.zeros(n, dtype=bool)
    n_train = int(math.floor(TRAIN_FRACTION * n))
    mask[rng.permutation(n)[:n_train]] = True
    return mask


def generate_dataset(spec: DatasetSpec, out_dir) -> tuple[Manifest, "DistributionStats"]:
    """Render every sample in the spec and write images plus manifest.jsonl.

    The train/test split is stratified per (class, line) cell at 60/40 with
    floor rounding; classes that would end up with an empty train split get
    one sample promoted from their largest cell, so per-class train counts
    are always valid denominators for the balanced losses.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = {
        "spec_hash": spec.spec_hash(),
        "seed": spec.seed,
        "num_classes": spec.num_classes,
        "num_product_lines": spec.num_product_lines,
    }
    records: list[dict] = []
    for class_id in range(spec.num_classes):
        class_records: list[dict] = []
        for line_id in range(spec.num_product_lines):
            n = spec.counts[class_id][line_id]
            if n == 0:
                continue
            train_mask = _split_cell(n, spec.seed, class_id, line_id)
            for i in range(n):
                rel = f"images/class_{class_id:02d}/line_{line_id:02d}_{i:05d}.png"
                img = spec.render(line_id, class_id, rng_seed=spec.seed * 1_000_003 + i)
                dest = out_dir / rel
                dest.parent.mkdir(parents=True, exist_ok=True)
                save_png(img, dest)
                class_records.append({
                    "path": rel,
                    "class_id": class_id,
                    "product_line_id": line_id,
                    "split": "train" if train_mask[i] else "test",
                })
        if not any(r["split"] == "train" for r in class_records):
            # promote one sample from the largest cell of this class
            largest_line = max(range(spec.num_product_lines),
                               key=lambda p: spec.counts[class_id][p])
            for r in class_records:
                if r["product_line_id"] == largest_line:
                    r["split"] = "train"
                    break
        records.extend(class_records)
    manifest = Manifest(header=header, records=records)
    manifest.validate()
    manifest.save(out_dir / "manifest.jsonl")
    return manifest, distribution_stats(manifest)


@dataclass
class DistributionStats:
    """Per-class totals, the class-by-line table, and the imbalance ratio
    (max class total over min class total, classes with zero samples
    excluded)."""

    per_class: list[int]
    per_cell: list[list[int]]
    imbalance_ratio: float
    num_samples: int

    def to_dict(self) -> dict:
        return {
            "per_class": self.per_class,
            "per_cell": self.per_cell,
            "imbalance_ratio": self.imbalance_ratio,
            "num_samples": self.num_samples,
        }


def distribution_stats(manifest: Manifest) -> DistributionStats:
    if not manifest.records:
        raise ValueError("empty manifest")
    num_classes = int(manifest.header["num_classes"])
    num_lines = int(manifest.header["num_product_lines"])
    per_cell = np.zeros((num_classes, num_lines), dtype=np.int64)
    for r in manifest.records:
        per_cell[r["class_id"], r["product_line_id"]] += 1
    per_class = per_cell.sum(axis=1)
    nonzero = per_class[per_class >= 1]
    ratio = float(nonzero.max() / nonzero.min())
    return DistributionStats(
        per_class=per_class.tolist(),
        per_cell=per_cell.tolist(),
        imbalance_ratio=ratio,
        num_samples=int(per_class.sum()),
    )


def load_split(manifest: Manifest, manifest_dir, split: Optional[str] = None):
    """Load images for one split (or all records) into arrays.

    Returns (images uint8 (N, S, S), class ids (N,), line ids (N,), paths).
    """
    manifest_dir = Path(manifest_dir)
    records = manifest.records if split is None else manifest.split_records(split)
    if not records:
        raise ValueError(f"no records for split {split!r}")
    images = np.stack([load_png(manifest_dir / r["path"]) for r in records])
    labels = np.array([r["class_id"] for r in records], dtype=np.int64)
    lines = np.array([r["product_line_id"] for r in records], dtype=np.int64)
    return images, labels, lines, [r["path"] for r in records]


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

# 8 defect classes over 3 product lines, scaled so the head/tail ratio is
# 1000/7 while the whole set stays under 2,000 images; the cell structure
# mirrors a real inspection line's product-by-defect count table, including
# empty cells and classes dominated by a single line.
MINI_COUNTS = (
    (500, 300, 200),
    (300, 100, 80),
    (150, 2, 40),
    (20, 15, 120),
    (15, 85, 0),
    (12, 20, 8),
    (6, 3, 11),
    (4, 1, 2),
)

PRESETS: dict[str, DatasetSpec] = {
    "icdefect-mini": DatasetSpec(
        num_classes=8,
        num_product_lines=3,
        counts=MINI_COUNTS,
        image_size=64,
        noise=0.05,
        seed=0,
    ),
}

# Subgroup thresholds matched to the preset's scale (the production protocol
# thresholds of 1e4/1e3/1e2 would put every mini class in one or two bins).
PRESET_SUBGROUPS: dict[str, dict[str, float]] = {
    "icdefect-mini": {"head": 500, "many": 100, "medium": 20},
}


def get_preset(name: str, seed: Optional[int] = None) -> DatasetSpec:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    spec = PRESETS[name]
    if seed is not None:
        spec = replace(spec, seed=seed)
    return spec
