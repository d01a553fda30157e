"""Sliding-window inference, Dice and average surface distance (in voxels)."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from .model import argmax_lowest

log = logging.getLogger(__name__)

DEFAULT_STRIDE = (32, 32, 16)


@dataclass(frozen=True)
class SlidingWindowSpec:
    window: tuple[int, int, int]
    stride: tuple[int, int, int] = DEFAULT_STRIDE

    def __post_init__(self):
        if min(self.stride) < 1:
            raise ValueError("strides must be >= 1")
        if min(self.window) < 1:
            raise ValueError("window dims must be >= 1")


def window_starts(dim: int, window: int, stride: int) -> list[int]:
    """Starts at stride multiples plus a final window clamped to the boundary.

    A stride larger than the window is reduced to the window size so that
    every voxel stays covered.
    """
    if window > dim:
        raise ValueError(f"window {window} exceeds volume size {dim}")
    stride = min(stride, window)
    starts = list(range(0, dim - window + 1, stride))
    if starts[-1] != dim - window:
        starts.append(dim - window)
    return starts


def _main_logits(net, x):
    out = net(x)
    return out[0] if isinstance(out, (tuple, list)) else out


@torch.no_grad()
def sliding_window_logits(net, volume, spec: SlidingWindowSpec) -> torch.Tensor:
    v = torch.as_tensor(np.asarray(volume, dtype=np.float32))
    dims = tuple(v.shape)
    for ax, (w, n) in enumerate(zip(spec.window, dims)):
        if w > n:
            raise ValueError(f"window {w} exceeds volume size {n} on axis {ax}")
    starts = [window_starts(n, w, s) for n, w, s in zip(dims, spec.window, spec.stride)]
    was_training = getattr(net, "training", False)
    if hasattr(net, "eval"):
        net.eval()
    acc = None
    count = torch.zeros(dims)
    try:
        for d in starts[0]:
            for h in starts[1]:
                for w in starts[2]:
                    box = (slice(d, d + spec.window[0]), slice(h, h + spec.window[1]), slice(w, w + spec.window[2]))
                    logits = _main_logits(net, v[box][None, None])[0]
                    if acc is None:
                        acc = torch.zeros((logits.shape[0],) + dims, dtype=logits.dtype)
                    acc[(slice(None),) + box] += logits
                    count[box] += 1
    finally:
        if hasattr(net, "train"):
            net.train(was_training)
    return acc / count


def sliding_window_predict(net, volume, spec: SlidingWindowSpec) -> np.ndarray:
    """Average logits over covering windows, then per-voxel argmax (lowest id on ties)."""
    logits = sliding_window_logits(net, volume, spec)
    return argmax_lowest(logits, 0).numpy().astype(np.uint8)


def coverage_counts(dims, spec: SlidingWindowSpec) -> np.ndarray:
    count = np.zeros(dims, dtype=np.int64)
    starts = [window_starts(n, w, s) for n, w, s in zip(dims, spec.window, spec.stride)]
    for d in starts[0]:
        for h in starts[1]:
            for w in starts[2]:
                count[d : d + spec.window[0], h : h + spec.window[1], w : w + spec.window[2]] += 1
    return count


# ---------------------------------------------------------------------------
# metrics


def _check_pair(pred, gt):
    if pred.shape != gt.shape:
        raise ValueError(f"dims mismatch: prediction {pred.shape} vs ground truth {gt.shape}")


def dice(pred: np.ndarray, gt: np.ndarray, c: int) -> Optional[float]:
    """``2|A & B| / (|A| + |B|)``; ``None`` when both regions are empty."""
    _check_pair(pred, gt)
    a, b = pred == c, gt == c
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return None
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


_SIX = ndimage.generate_binary_structure(3, 1)


def surface(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with a 6-neighbour outside it; the border counts as outside."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_SIX, border_value=0)


def asd(pred: np.ndarray, gt: np.ndarray, c: int) -> Optional[float]:
    """Symmetric mean surface distance in voxels; ``None`` if a surface is empty."""
    _check_pair(pred, gt)
    sp, sg = surface(pred == c), surface(gt == c)
    if not sp.any() or not sg.any():
        return None
    to_gt = ndimage.distance_transform_edt(~sg)[sp].mean()
    to_pred = ndimage.distance_transform_edt(~sp)[sg].mean()
    return float(0.5 * (to_gt + to_pred))


def _mean_defined(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class MetricsReport:
    num_classes: int
    dice: list = field(default_factory=list)  # per foreground class, None if undefined
    asd: list = field(default_factory=list)

    @property
    def mean_dice(self) -> Optional[float]:
        return _mean_defined(self.dice)

    @property
    def mean_asd(self) -> Optional[float]:
        return _mean_defined(self.asd)

    @property
    def missing(self) -> int:
        """Foreground classes with an undefined Dice or ASD."""
        return sum(1 for d, a in zip(self.dice, self.asd) if d is None or a is None)

    def rows(self):
        for c, (d, a) in enumerate(zip(self.dice, self.asd), start=1):
            yield str(c), d, a
        yield "avg", self.mean_dice, self.mean_asd

    def write_csv(self, path) -> None:
        fmt = lambda v: "" if v is None else repr(float(v))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "dice", "asd"])
            for name, d, a in self.rows():
                w.writerow([name, fmt(d), fmt(a)])


def case_metrics(pred, gt, num_classes: int):
    return (
        [dice(pred, gt, c) for c in range(1, num_classes)],
        [asd(pred, gt, c) for c in range(1, num_classes)],
    )


def evaluate(net, cases: Sequence, spec: SlidingWindowSpec, num_classes: int, csv_path=None) -> MetricsReport:
    """Predict every case and average each class's metrics over cases where defined.

    ``cases`` holds objects with ``image`` and ``labels`` arrays.
    """
    if not cases:
        raise ValueError("evaluate needs a non-empty split")
    per_dice, per_asd = [], []
    for case in cases:
        pred = sliding_window_predict(net, case.image, spec)
        d, a = case_metrics(pred, case.labels, num_classes)
        per_dice.append(d)
        per_asd.append(a)
    report = MetricsReport(
        num_classes,
        [_mean_defined(col) for col in zip(*per_dice)],
        [_mean_defined(col) for col in zip(*per_asd)],
    )
    if report.missing:
        log.info("%d foreground class(es) have undefined metrics", report.missing)
    if csv_path is not None:
        report.write_csv(csv_path)
    return report
