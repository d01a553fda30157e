"""Volumetric data model: phantoms, class statistics and the DMXV file format.

Volumes are plain ``float32`` arrays of shape ``(D, H, W)``; label maps are
``uint8`` arrays of the same shape holding class ids (0 is background).
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

MAGIC = b"DMXV"
FORMAT_VERSION = 1
DTYPE_REAL32 = 0
DTYPE_UINT8 = 1
_HEADER = struct.Struct("<4sBB3I")

_DTYPES = {
    DTYPE_REAL32: np.dtype("<f4"),
    DTYPE_UINT8: np.dtype("u1"),
}


class VolumeFormatError(ValueError):
    pass


class PhantomError(ValueError):
    pass


def check_volume(v: np.ndarray) -> np.ndarray:
    if v.ndim != 3 or min(v.shape) < 1:
        raise ValueError(f"volume must be a non-empty 3D array, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("volume contains non-finite values")
    return np.ascontiguousarray(v, dtype=np.float32)


def check_labels(l: np.ndarray, num_classes: int) -> np.ndarray:
    if l.ndim != 3:
        raise ValueError(f"label map must be 3D, got shape {l.shape}")
    if l.size and int(l.max()) >= num_classes:
        raise ValueError(f"label value {int(l.max())} >= num_classes {num_classes}")
    return np.ascontiguousarray(l, dtype=np.uint8)


# ---------------------------------------------------------------------------
# class statistics


@dataclass(frozen=True)
class ClassStats:
    counts: np.ndarray  # int64, length C
    total_voxels: int

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    def __add__(self, other: "ClassStats") -> "ClassStats":
        if self.num_classes != other.num_classes:
            raise ValueError("cannot add stats with different class counts")
        return ClassStats(self.counts + other.counts, self.total_voxels + other.total_voxels)

    def __eq__(self, other):
        if not isinstance(other, ClassStats):
            return NotImplemented
        return self.total_voxels == other.total_voxels and np.array_equal(self.counts, other.counts)


def compute_class_stats(labels: Sequence[np.ndarray], num_classes: int) -> ClassStats:
    """Exact per-class voxel counts summed over all label maps."""
    counts = np.zeros(num_classes, dtype=np.int64)
    total = 0
    for l in labels:
        l = np.asarray(l)
        if l.size and int(l.max()) >= num_classes:
            raise ValueError(f"label value {int(l.max())} out of range for C={num_classes}")
        counts += np.bincount(l.ravel(), minlength=num_classes)[:num_classes]
        total += l.size
    return ClassStats(counts, total)


# ---------------------------------------------------------------------------
# phantoms


@dataclass(frozen=True)
class PhantomSpec:
    """Axis-aligned ellipsoid phantom with one ellipsoid per foreground class.

    ``fractions[k]`` is the target volume fraction of class ``k + 1``.
    ``semi_axes`` / ``centers`` pin the geometry explicitly (fractions are then
    ignored for the pinned classes).
    """

    dims: tuple[int, int, int]
    fractions: tuple[float, ...]
    contrasts: tuple[float, ...]
    background: float = 0.1
    noise: float = 0.05
    shape: str = "ellipsoid"
    aspect_jitter: float = 0.3
    semi_axes: Optional[tuple[Optional[tuple[float, float, float]], ...]] = None
    centers: Optional[tuple[Optional[tuple[float, float, float]], ...]] = None

    @property
    def num_foreground_classes(self) -> int:
        return len(self.fractions)

    @property
    def num_classes(self) -> int:
        return len(self.fractions) + 1

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise PhantomError(f"bad dims {self.dims}")
        if self.shape != "ellipsoid":
            raise PhantomError(f"unsupported shape kind {self.shape!r}")
        if not self.fractions:
            raise PhantomError("need at least one foreground class")
        if any(f <= 0 for f in self.fractions) or sum(self.fractions) >= 1:
            raise PhantomError("fractions must be positive with sum < 1")
        if len(self.contrasts) != len(self.fractions):
            raise PhantomError("one contrast per foreground class required")
        for name in ("semi_axes", "centers"):
            val = getattr(self, name)
            if val is not None and len(val) != len(self.fractions):
                raise PhantomError(f"{name} must have one entry per foreground class")
        if self.noise < 0:
            raise PhantomError("noise amplitude must be non-negative")


def ellipsoid_mask(dims, center, semi_axes) -> np.ndarray:
    """Lattice points ``p`` with ``sum(((p - center) / semi_axes) ** 2) <= 1``."""
    grids = np.ogrid[tuple(slice(0, n) for n in dims)]
    r2 = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, semi_axes))
    return r2 <= 1.0


def _fit_axes(dims, center, aspect, target):
    def count(scale):
        return int(ellipsoid_mask(dims, center, [scale * a for a in aspect]).sum())

    lo, hi = 0.0, max(dims) * 2.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if count(mid) < target:
            lo = mid
        else:
            hi = mid
    # pick whichever bracket lands closer to the target count
    scale = lo if abs(count(lo) - target) < abs(count(hi) - target) else hi
    return tuple(scale * a for a in aspect)


def generate_phantom(seed: int, spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic ellipsoid phantom ``(volume, labels)`` for ``(seed, spec)``.

    Classes are painted largest-first so rarer structures are never occluded.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    dims = tuple(int(n) for n in spec.dims)
    n_vox = math.prod(dims)
    labels = np.zeros(dims, dtype=np.uint8)

    order = sorted(range(spec.num_foreground_classes), key=lambda k: -spec.fractions[k])
    for k in order:
        cls = k + 1
        pinned_axes = spec.semi_axes[k] if spec.semi_axes is not None else None
        pinned_center = spec.centers[k] if spec.centers is not None else None

        if pinned_axes is not None:
            axes = tuple(float(a) for a in pinned_axes)
        else:
            # axes follow the grid's proportions, jittered per class
            aspect = np.asarray(dims, float) * np.exp(rng.uniform(-spec.aspect_jitter, spec.aspect_jitter, size=3))
            aspect /= np.prod(aspect) ** (1 / 3)
            r0 = (3 * spec.fractions[k] * n_vox / (4 * math.pi)) ** (1 / 3)
            axes = tuple(r0 * a for a in aspect)

        for ax, (a, n) in enumerate(zip(axes, dims)):
            if 2 * a + 1 > n:
                raise PhantomError(
                    f"class {cls}: ellipsoid semi-axis {a:.2f} does not fit axis {ax} of size {n}"
                )

        if pinned_center is not None:
            center = tuple(float(c) for c in pinned_center)
        else:
            # leave one voxel of slack for the lattice fit below
            center = tuple(
                rng.uniform(min(a + 1, (n - 1) / 2), max(n - 2 - a, (n - 1) / 2))
                for a, n in zip(axes, dims)
            )

        if pinned_axes is None:
            target = max(1, round(spec.fractions[k] * n_vox))
            axes = _fit_axes(dims, center, np.asarray(axes) / max(axes), target)

        labels[ellipsoid_mask(dims, center, axes)] = cls

    level = np.concatenate([[spec.background], spec.background + np.asarray(spec.contrasts, float)])
    volume = level[labels] + spec.noise * rng.uniform(-1.0, 1.0, size=dims)
    return volume.astype(np.float32), labels


# ---------------------------------------------------------------------------
# DMXV persistence


def store_volume(v: np.ndarray, path) -> None:
    """Write a volume (float32) or label map (uint8) in DMXV format."""
    v = np.asarray(v)
    if v.ndim != 3:
        raise ValueError(f"expected a 3D array, got shape {v.shape}")
    if v.dtype == np.uint8:
        code = DTYPE_UINT8
    elif v.dtype == np.float32:
        code = DTYPE_REAL32
    else:
        raise ValueError(f"unsupported dtype {v.dtype}; use float32 or uint8")
    payload = np.ascontiguousarray(v, dtype=_DTYPES[code]).tobytes()
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, code, *v.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_volume(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size or raw[:4] != MAGIC:
        raise VolumeFormatError(f"{path}: unrecognized format")
    _, version, code, d, h, w = _HEADER.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPES:
        raise VolumeFormatError(f"{path}: unknown dtype code {code}")
    dtype = _DTYPES[code]
    expected = d * h * w * dtype.itemsize
    got = len(raw) - _HEADER.size
    if got != expected:
        raise VolumeFormatError(
            f"{path}: truncated/oversized payload ({got} bytes, expected {expected})"
        )
    arr = np.frombuffer(raw, dtype=dtype, offset=_HEADER.size).reshape(d, h, w)
    return arr.astype(np.float32 if code == DTYPE_REAL32 else np.uint8)


# ---------------------------------------------------------------------------
# dataset splits and manifests

SPLIT_SECTIONS = ("labeled", "unlabeled", "val", "test")


@dataclass
class DatasetSplit:
    labeled: list[str] = field(default_factory=list)
    unlabeled: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)

    def validate(self) -> None:
        seen: dict[str, str] = {}
        for name in SPLIT_SECTIONS:
            for cid in getattr(self, name):
                if cid in seen:
                    raise ValueError(f"case {cid!r} appears in both {seen[cid]} and {name}")
                seen[cid] = name


@dataclass
class Case:
    case_id: str
    image: np.ndarray
    labels: np.ndarray


@dataclass
class Dataset:
    split: DatasetSplit
    cases: dict[str, Case]
    num_classes: int

    def section(self, name: str) -> list[Case]:
        return [self.cases[cid] for cid in getattr(self.split, name)]


def write_manifest(path, split: DatasetSplit, files: dict[str, tuple[str, str]]) -> None:
    """Plain-text manifest: ``[section]`` headers, then ``case image label`` lines.

    Paths are written relative to the manifest's directory.
    """
    split.validate()
    base = Path(path).parent
    lines = ["# dinomix manifest v1"]
    for name in SPLIT_SECTIONS:
        lines.append(f"[{name}]")
        for cid in getattr(split, name):
            img, lbl = files[cid]
            lines.append(f"{cid} {os.path.relpath(img, base)} {os.path.relpath(lbl, base)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> tuple[DatasetSplit, dict[str, tuple[Path, Path]]]:
    base = Path(path).parent
    split = DatasetSplit()
    files: dict[str, tuple[Path, Path]] = {}
    section = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1]
            if section not in SPLIT_SECTIONS:
                raise ValueError(f"{path}:{lineno}: unknown section {section!r}")
            continue
        parts = line.split()
        if section is None or len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: malformed manifest line")
        cid, img, lbl = parts
        getattr(split, section).append(cid)
        files[cid] = (base / img, base / lbl)
    split.validate()
    return split, files


def load_dataset(manifest, num_classes: Optional[int] = None) -> Dataset:
    split, files = read_manifest(manifest)
    cases = {}
    for cid, (img, lbl) in files.items():
        cases[cid] = Case(cid, load_volume(img), load_volume(lbl))
    if num_classes is None:
        num_classes = 1 + max(int(c.labels.max()) for c in cases.values())
    return Dataset(split, cases, num_classes)


def make_split(n_train: int, labeled_frac: float, n_val: int, n_test: int) -> DatasetSplit:
    ids = [f"case{i:03d}" for i in range(n_train + n_val + n_test)]
    n_lab = max(1, int(n_train * labeled_frac))
    return DatasetSplit(
        labeled=ids[:n_lab],
        unlabeled=ids[n_lab:n_train],
        val=ids[n_train : n_train + n_val],
        test=ids[n_train + n_val :],
    )


def generate_dataset(out_dir, seed: int, spec: PhantomSpec, split: DatasetSplit) -> Path:
    """Write one phantom per case plus ``manifest.txt``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).spawn(
        sum(len(getattr(split, s)) for s in SPLIT_SECTIONS)
    )
    files = {}
    all_ids = [cid for s in SPLIT_SECTIONS for cid in getattr(split, s)]
    for cid, ss in zip(all_ids, seeds):
        vol, lbl = generate_phantom(int(ss.generate_state(1)[0]), spec)
        img_path, lbl_path = out / "images" / f"{cid}.dmxv", out / "labels" / f"{cid}.dmxv"
        store_volume(vol, img_path)
        store_volume(lbl, lbl_path)
        files[cid] = (str(img_path), str(lbl_path))
    manifest = out / "manifest.txt"
    write_manifest(manifest, split, files)
    return manifest
