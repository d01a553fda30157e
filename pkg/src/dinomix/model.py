"""Compact VNet-style student, EMA teacher and pseudo-labelling."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class NetConfig:
    num_classes: int = 4
    in_channels: int = 1
    base_channels: int = 8
    stages: int = 2

    @property
    def feature_channels(self) -> int:
        return self.base_channels * 2**self.stages


def _block(cin, cout):
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, padding=1),
        nn.GroupNorm(min(4, cout), cout),
        nn.LeakyReLU(0.01, inplace=True),
    )


class StudentNet(nn.Module):
    """Encoder-decoder with additive skips, a main head and an auxiliary head.

    ``forward`` returns ``(main_logits, aux_logits, deepest_features)``; the
    deepest features are the encoder output at ``1 / 2**stages`` resolution.
    """

    def __init__(self, cfg: NetConfig = NetConfig()):
        super().__init__()
        self.cfg = cfg
        b, s = cfg.base_channels, cfg.stages
        chans = [b * 2**i for i in range(s + 1)]
        self.stem = _block(cfg.in_channels, chans[0])
        self.down = nn.ModuleList(nn.Conv3d(chans[i], chans[i + 1], 2, stride=2) for i in range(s))
        self.enc = nn.ModuleList(_block(chans[i + 1], chans[i + 1]) for i in range(s))
        self.up = nn.ModuleList(
            nn.ConvTranspose3d(chans[i + 1], chans[i], 2, stride=2) for i in reversed(range(s))
        )
        self.dec = nn.ModuleList(_block(chans[i], chans[i]) for i in reversed(range(s)))
        self.head = nn.Conv3d(chans[0], cfg.num_classes, 1)
        self.aux_head = nn.Conv3d(chans[0], cfg.num_classes, 1)

    def check_input(self, x: torch.Tensor) -> None:
        k = 2**self.cfg.stages
        if x.dim() != 5:
            raise ValueError(f"expected (B, C, D, H, W) input, got shape {tuple(x.shape)}")
        for name, n in zip("DHW", x.shape[2:]):
            if n % k:
                raise ValueError(f"input axis {name} of size {n} is not divisible by {k}")

    def encode(self, x):
        self.check_input(x)
        skips = [self.stem(x)]
        for down, enc in zip(self.down, self.enc):
            skips.append(enc(down(skips[-1])))
        return skips

    def forward(self, x):
        skips = self.encode(x)
        feats = skips[-1]
        y = feats
        for up, dec, skip in zip(self.up, self.dec, reversed(skips[:-1])):
            y = dec(up(y) + skip)
        return self.head(y), self.aux_head(y), feats


def make_teacher(student: nn.Module) -> nn.Module:
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, momentum: float) -> None:
    """``p_T <- m * p_T + (1 - m) * p_S`` for every parameter and float buffer."""
    t_state, s_state = teacher.state_dict(), student.state_dict()
    if t_state.keys() != s_state.keys():
        raise ValueError("teacher and student parameter sets differ")
    for name, t in t_state.items():
        s = s_state[name]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        if t.is_floating_point():
            # lerp form keeps p_T bit-identical when p_T == p_S
            t.lerp_(s.to(t.dtype), 1.0 - momentum)
        else:
            t.copy_(s)


def argmax_lowest(logits: torch.Tensor, dim: int = 1) -> torch.Tensor:
    # torch.argmax returns the first maximal index, i.e. the lowest class id on ties
    return torch.argmax(logits, dim=dim)


@torch.no_grad()
def pseudo_label_from_logits(logits: torch.Tensor):
    probs = F.softmax(logits, dim=1)
    return argmax_lowest(logits, 1), probs.max(dim=1).values


@torch.no_grad()
def teacher_pseudo_label(teacher: nn.Module, weak: torch.Tensor):
    """Per-voxel argmax of the teacher's main head and its softmax confidence."""
    was_training = teacher.training
    teacher.eval()
    try:
        logits = teacher(weak)[0]
    finally:
        teacher.train(was_training)
    return pseudo_label_from_logits(logits)
