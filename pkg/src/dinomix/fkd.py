"""Feature distillation from a frozen 2D foundation encoder into the 3D student.

The frozen encoder sees the volume one depth slice at a time; its feature maps
are stacked along depth and average-pooled onto the student's deepest feature
grid. A light projector maps student channels to encoder channels and the loss
compares per-location unit vectors.
"""
from __future__ import annotations

import hashlib
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

NORM_EPS = 1e-8


class FoundationTeacher(nn.Module):
    """Frozen 2D encoder: ``featurize((3, h, w)) -> (C_T, h_t, w_t)``.

    Subclasses must hold no trainable state. ``input_size`` is the ``(h, w)``
    resolution slices are resampled to before ``featurize``.
    """

    out_channels: int
    input_size: tuple[int, int]

    def featurize(self, image: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def freeze(self):
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def train(self, mode: bool = True):
        # always stays in eval mode
        return super().train(False)


class FixtureTeacher(FoundationTeacher):
    """Deterministic stand-in encoder built from local patch statistics.

    Each ``patch x patch`` cell is summarised by its mean, variance and mean
    absolute gradient along both axes; a fixed-seed random linear map lifts
    these four statistics to ``out_channels`` features.
    """

    def __init__(self, out_channels: int = 16, input_size=(32, 32), patch: int = 4, seed: int = 0):
        super().__init__()
        if input_size[0] % patch or input_size[1] % patch:
            raise ValueError("input_size must be divisible by patch")
        self.out_channels = out_channels
        self.input_size = tuple(input_size)
        self.patch = patch
        g = torch.Generator().manual_seed(seed)
        self.register_buffer("weight", torch.randn(out_channels, 4, generator=g))
        self.register_buffer("bias", 0.1 * torch.randn(out_channels, generator=g))
        self.freeze()

    @torch.no_grad()
    def featurize(self, image: torch.Tensor) -> torch.Tensor:
        x = image.float().mean(dim=0, keepdim=True)[None]  # (1, 1, h, w)
        p = self.patch
        mean = F.avg_pool2d(x, p)
        var = F.avg_pool2d(x * x, p) - mean * mean
        gh = F.pad((x[..., 1:, :] - x[..., :-1, :]).abs(), (0, 0, 0, 1))
        gw = F.pad((x[..., :, 1:] - x[..., :, :-1]).abs(), (0, 1, 0, 0))
        stats = torch.cat([mean, var.clamp_min(0), F.avg_pool2d(gh, p), F.avg_pool2d(gw, p)], dim=1)
        feats = torch.einsum("ck,khw->chw", self.weight, stats[0])
        return feats + self.bias[:, None, None]


class PretrainedViTAdapter(FoundationTeacher):
    """Frozen pretrained ViT (e.g. a DINO-family release) loaded from a local path.

    Expects slices with intensities in [0, 1]; they are normalised with the
    ImageNet constants ``mean = (0.485, 0.456, 0.406)`` and
    ``std = (0.229, 0.224, 0.225)`` before the encoder. Patch tokens of the last
    hidden layer are returned as a ``(C_T, h / patch, w / patch)`` grid; class
    and register tokens are dropped.
    """

    MEAN = (0.485, 0.456, 0.406)
    STD = (0.229, 0.224, 0.225)

    def __init__(self, weights_path, input_size=(224, 224)):
        super().__init__()
        from transformers import AutoModel

        self.encoder = AutoModel.from_pretrained(str(weights_path))
        cfg = self.encoder.config
        self.patch = int(cfg.patch_size)
        self.out_channels = int(cfg.hidden_size)
        self.input_size = tuple(input_size)
        if self.input_size[0] % self.patch or self.input_size[1] % self.patch:
            raise ValueError(f"input_size {input_size} not divisible by patch size {self.patch}")
        self.register_buffer("mean", torch.tensor(self.MEAN).view(3, 1, 1))
        self.register_buffer("std", torch.tensor(self.STD).view(3, 1, 1))
        self.freeze()

    @torch.no_grad()
    def featurize(self, image: torch.Tensor) -> torch.Tensor:
        x = ((image.float() - self.mean) / self.std)[None]
        tokens = self.encoder(pixel_values=x).last_hidden_state[0]
        gh, gw = self.input_size[0] // self.patch, self.input_size[1] // self.patch
        grid = tokens[-gh * gw :]
        return grid.transpose(0, 1).reshape(self.out_channels, gh, gw)


def build_teacher(kind: str, weights_path: Optional[str] = None, **kw) -> FoundationTeacher:
    if kind == "fixture":
        return FixtureTeacher(**kw)
    if kind == "vit":
        if not weights_path:
            raise ValueError("teacher kind 'vit' needs a weights path")
        return PretrainedViTAdapter(weights_path, **kw)
    raise ValueError(f"unknown teacher kind {kind!r}")


def module_digest(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------


@torch.no_grad()
def stack_slice_features(teacher: FoundationTeacher, volume) -> torch.Tensor:
    """Run ``teacher`` on every depth slice; returns ``(C_T, D, h_t, w_t)``."""
    v = torch.as_tensor(np.asarray(volume) if not torch.is_tensor(volume) else volume).float()
    if v.dim() != 3:
        raise ValueError(f"expected a (D, H, W) volume, got shape {tuple(v.shape)}")
    if not torch.isfinite(v).all():
        raise ValueError("volume contains non-finite values")
    slices = F.interpolate(v[:, None], size=teacher.input_size, mode="bilinear", align_corners=False)
    feats = []
    for i in range(slices.shape[0]):
        try:
            feats.append(teacher.featurize(slices[i].expand(3, -1, -1)))
        except Exception as exc:
            raise RuntimeError(f"foundation teacher failed on slice {i}: {exc}") from exc
    return torch.stack(feats, dim=1)


def extract_teacher_features(teacher: FoundationTeacher, volume, target_dims: Sequence[int]) -> torch.Tensor:
    """Teacher feature volume ``(C_T, D_S, H_S, W_S)`` aligned to the student grid."""
    stacked = stack_slice_features(teacher, volume)
    out = F.adaptive_avg_pool3d(stacked[None], tuple(int(n) for n in target_dims))[0]
    return out.detach()


def extract_teacher_features_batch(teacher, volumes: torch.Tensor, target_dims) -> torch.Tensor:
    """Batched form for ``(B, 1, D, H, W)`` input; returns ``(B, C_T, D_S, H_S, W_S)``."""
    return torch.stack([extract_teacher_features(teacher, v[0], target_dims) for v in volumes])


class Projector(nn.Module):
    """Maps ``C_S``-channel student features to ``C_T`` channels at the same resolution."""

    def __init__(self, in_channels: int, out_channels: int, kind: str = "linear", bias: bool = True):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        if kind == "linear":
            self.net = nn.Conv3d(in_channels, out_channels, 1, bias=bias)
        elif kind == "mlp":
            self.net = nn.Sequential(
                nn.Conv3d(in_channels, in_channels, 1, bias=bias),
                nn.GroupNorm(min(4, in_channels), in_channels),
                nn.LeakyReLU(0.01, inplace=True),
                nn.Conv3d(in_channels, out_channels, 1, bias=bias),
            )
        else:
            raise ValueError(f"unknown projector kind {kind!r}")

    @torch.no_grad()
    def identity_(self):
        if not isinstance(self.net, nn.Conv3d) or self.in_channels != self.out_channels:
            raise ValueError("identity init needs a linear projector with C_S == C_T")
        self.net.weight.zero_()
        self.net.weight[:, :, 0, 0, 0].copy_(torch.eye(self.in_channels))
        if self.net.bias is not None:
            self.net.bias.zero_()
        return self

    def forward(self, f_s: torch.Tensor) -> torch.Tensor:
        if f_s.shape[1] != self.in_channels:
            raise ValueError(f"projector expects {self.in_channels} channels, got {f_s.shape[1]}")
        return self.net(f_s)


def _unit(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=1, keepdim=True).clamp_min(NORM_EPS)


def distillation_loss(projected: torch.Tensor, teacher_feats: torch.Tensor) -> torch.Tensor:
    """Mean over locations of ``|| u(projected) - u(sg(teacher)) ||^2``.

    ``u`` normalises each location's channel vector (dim 1) to unit length,
    so the value lies in ``[0, 4]``.
    """
    if projected.shape != teacher_feats.shape:
        raise ValueError(
            f"shape mismatch: projected {tuple(projected.shape)} vs teacher {tuple(teacher_feats.shape)}"
        )
    diff = _unit(projected) - _unit(teacher_feats.detach())
    return diff.pow(2).sum(dim=1).mean()
