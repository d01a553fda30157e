"""Weak (crop + flip) and strong (gamma) views with recorded parameters."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

DEFAULT_GAMMA_RANGE = (0.7, 1.5)


@dataclass(frozen=True)
class CropRecord:
    origin: tuple[int, int, int]
    crop_dims: tuple[int, int, int]
    flips: tuple[bool, bool, bool]

    def source_index(self, p) -> tuple[int, int, int]:
        """Input-volume coordinate that landed at output coordinate ``p``."""
        return tuple(
            o + (n - 1 - q if f else q)
            for o, n, f, q in zip(self.origin, self.crop_dims, self.flips, p)
        )


@dataclass(frozen=True)
class StrongRecord:
    gamma: float
    source: Optional[CropRecord] = None


def _crop_flip(a: np.ndarray, rec: CropRecord) -> np.ndarray:
    sl = tuple(slice(o, o + n) for o, n in zip(rec.origin, rec.crop_dims))
    out = a[sl]
    axes = tuple(i for i, f in enumerate(rec.flips) if f)
    if axes:
        out = np.flip(out, axis=axes)
    return np.ascontiguousarray(out)


def apply_weak(v: np.ndarray, l: Optional[np.ndarray], seed, crop_dims, flip: bool = True):
    """Random crop plus per-axis random flip, applied identically to ``v`` and ``l``."""
    crop_dims = tuple(int(c) for c in crop_dims)
    for ax, (c, n) in enumerate(zip(crop_dims, v.shape)):
        if c > n:
            raise ValueError(f"crop size {c} exceeds volume size {n} on axis {ax}")
        if c < 1:
            raise ValueError(f"crop size on axis {ax} must be positive")
    if l is not None and l.shape != v.shape:
        raise ValueError(f"label shape {l.shape} does not match volume shape {v.shape}")
    rng = np.random.default_rng(seed)
    origin = tuple(int(rng.integers(0, n - c + 1)) for c, n in zip(crop_dims, v.shape))
    flips = tuple(bool(b) for b in rng.random(3) < 0.5) if flip else (False, False, False)
    rec = CropRecord(origin, crop_dims, flips)
    return _crop_flip(v, rec), (None if l is None else _crop_flip(l, rec)), rec


def minmax_normalize(v: np.ndarray) -> np.ndarray:
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        # degenerate constant crop maps to all zeros
        return np.zeros_like(v, dtype=np.float32)
    return ((v - lo) / (hi - lo)).astype(np.float32)


def apply_strong(
    weak: np.ndarray,
    seed,
    gamma_range=DEFAULT_GAMMA_RANGE,
    gamma: Optional[float] = None,
    source: Optional[CropRecord] = None,
):
    """Min-max normalize the crop to [0, 1] and raise it to a log-uniform gamma.

    Geometry is untouched, so labels of the weak view stay aligned.
    """
    if not np.all(np.isfinite(weak)):
        raise ValueError("strong augmentation needs finite intensities")
    lo, hi = gamma_range
    if not 0 < lo <= hi:
        raise ValueError(f"invalid gamma range {gamma_range}")
    if gamma is None:
        rng = np.random.default_rng(seed)
        gamma = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    out = np.power(minmax_normalize(weak), np.float32(gamma)).astype(np.float32)
    return out, StrongRecord(float(gamma), source)
