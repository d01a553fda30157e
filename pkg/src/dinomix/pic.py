"""Progressive imbalance-aware CutMix.

Class sampling starts from a distribution that favours rare classes and is
linearly relaxed towards uniform as training proceeds. Patches centred on a
voxel of the sampled class are cut from a labeled crop and pasted onto a
strongly augmented unlabeled crop.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .volcore import ClassStats

NEVER = math.inf  # eta sentinel: stay on the balanced distribution forever


@dataclass(frozen=True)
class PICSchedule:
    gamma: float = 1.0
    eta: float = 2 / 3
    e_max: int = 1500

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.e_max < 1:
            raise ValueError("e_max must be >= 1")

    def alpha(self, epoch: float) -> float:
        """Interpolation weight towards uniform at ``epoch``, clamped to [0, 1]."""
        if math.isinf(self.eta):
            return 0.0
        if self.eta == 0:
            return 1.0
        return min(1.0, max(0.0, epoch / (self.eta * self.e_max)))


@dataclass(frozen=True)
class PatchSpec:
    dims: tuple[int, int, int]

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"patch dims must be three positive ints, got {self.dims}")

    @classmethod
    def half_of(cls, crop_dims) -> "PatchSpec":
        return cls(tuple(max(1, c // 2) for c in crop_dims))


@dataclass
class MixResult:
    image: np.ndarray
    target: np.ndarray
    mask: np.ndarray  # bool, True inside the pasted box
    box: tuple[slice, slice, slice]


def imbalance_ratios(stats: ClassStats) -> np.ndarray:
    """Rarest positive count divided by each class count; absent classes get 0."""
    counts = np.asarray(stats.counts, dtype=np.float64)
    present = counts > 0
    if not present.any():
        raise ValueError("imbalance ratios need at least one class with a positive count")
    ratios = np.zeros_like(counts)
    ratios[present] = counts[present].min() / counts[present]
    return ratios


def _check_distribution(p: np.ndarray) -> np.ndarray:
    assert np.all(p >= 0) and abs(p.sum() - 1.0) <= 1e-9, p
    return p


def balanced_distribution(ratios, gamma: float) -> np.ndarray:
    ratios = np.asarray(ratios, dtype=np.float64)
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    support = ratios > 0
    if not support.any():
        raise ValueError("balanced distribution needs some ratio > 0")
    weights = np.zeros_like(ratios)
    # 0 ** gamma is taken as 0 for every gamma, so gamma = 0 is uniform on the support
    weights[support] = ratios[support] ** gamma
    return _check_distribution(weights / weights.sum())


def uniform_distribution(ratios) -> np.ndarray:
    support = np.asarray(ratios) > 0
    return support / support.sum()


def progressive_distribution(p_bal, epoch: float, schedule: PICSchedule, ratios=None) -> np.ndarray:
    """Blend ``p_bal`` towards uniform over the classes present in labeled data.

    ``ratios`` defines that support; without it the support of ``p_bal`` is used
    (identical whenever gamma is finite).
    """
    p_bal = np.asarray(p_bal, dtype=np.float64)
    if not 0 <= epoch <= schedule.e_max:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.e_max}]")
    p_uni = uniform_distribution(p_bal if ratios is None else ratios)
    a = schedule.alpha(epoch)
    return _check_distribution((1 - a) * p_bal + a * p_uni)


def schedule_rows(p_bal, schedule: PICSchedule, ratios=None):
    """``(epoch, alpha, P_E)`` for every epoch ``0 .. e_max - 1``."""
    for e in range(schedule.e_max):
        yield e, schedule.alpha(e), progressive_distribution(p_bal, e, schedule, ratios)


def write_schedule_csv(path, p_bal, schedule: PICSchedule, ratios=None) -> int:
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "alpha"] + [f"p{c}" for c in range(len(p_bal))])
        for e, a, p in schedule_rows(p_bal, schedule, ratios):
            w.writerow([e, repr(a)] + [repr(float(x)) for x in p])
            n += 1
    return n


def sample_center(p_e, labels: np.ndarray, rng: np.random.Generator):
    """Draw a class from ``p_e`` and then a voxel of that class uniformly.

    If the class is absent from ``labels`` the class is redrawn once from
    ``p_e`` renormalised over the classes that are present.
    """
    p_e = np.asarray(p_e, dtype=np.float64)
    counts = np.bincount(labels.ravel(), minlength=len(p_e))[: len(p_e)]
    present = counts > 0
    cls = int(rng.choice(len(p_e), p=p_e))
    if not present[cls]:
        feasible = np.where(present, p_e, 0.0)
        if feasible.sum() <= 0:
            raise ValueError("no class with positive probability is present in the label map")
        cls = int(rng.choice(len(p_e), p=feasible / feasible.sum()))
    flat = np.flatnonzero(labels.ravel() == cls)
    idx = int(flat[rng.integers(len(flat))])
    return cls, tuple(int(i) for i in np.unravel_index(idx, labels.shape))


def patch_box(center, patch: PatchSpec, dims) -> tuple[slice, slice, slice]:
    """Box of ``patch.dims`` centred at ``center``, shifted (never shrunk) into bounds."""
    box = []
    for ax, (c, p, n) in enumerate(zip(center, patch.dims, dims)):
        if p > n:
            raise ValueError(f"patch size {p} exceeds volume size {n} on axis {ax}")
        if not 0 <= c < n:
            raise ValueError(f"center {tuple(center)} outside volume dims {tuple(dims)}")
        start = min(max(c - p // 2, 0), n - p)
        box.append(slice(start, start + p))
    return tuple(box)


def cutmix_paste(
    labeled: tuple[np.ndarray, np.ndarray],
    unlabeled_strong: np.ndarray,
    pseudo: np.ndarray,
    center,
    patch: PatchSpec,
) -> MixResult:
    image_l, gt = labeled
    dims = unlabeled_strong.shape
    for name, arr in (("labeled image", image_l), ("ground truth", gt), ("pseudo-label", pseudo)):
        if arr.shape != dims:
            raise ValueError(f"{name} shape {arr.shape} does not match {dims}")
    box = patch_box(center, patch, dims)
    mask = np.zeros(dims, dtype=bool)
    mask[box] = True
    image = unlabeled_strong.copy()
    image[box] = image_l[box]
    target = pseudo.copy()
    target[box] = gt[box]
    return MixResult(image, target, mask, box)


def class_sampler(stats: ClassStats, schedule: PICSchedule):
    """Bind labeled-set statistics and a schedule into ``epoch -> P_E``."""
    ratios = imbalance_ratios(stats)
    p_bal = balanced_distribution(ratios, schedule.gamma)

    def p_at(epoch: float) -> np.ndarray:
        return progressive_distribution(p_bal, min(epoch, schedule.e_max), schedule, ratios)

    return p_at
