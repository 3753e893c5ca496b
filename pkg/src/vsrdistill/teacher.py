"""Teacher oracle: pixel targets and the re-encoded feature target at the decoder middle block."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError
from .student import StudentNet


@dataclass
class TeacherKind:
    kind: str = "gt_oracle"  # or "gt_smoothed"
    sigma: float = 0.0

    def validate(self) -> None:
        if self.kind not in ("gt_oracle", "gt_smoothed"):
            raise ConfigError(f"unknown teacher kind {self.kind!r}")
        if self.sigma < 0:
            raise ConfigError("teacher sigma must be >= 0")


def gaussian_kernel1d(sigma: float, dtype=torch.float32) -> torch.Tensor:
    radius = max(1, int(math.ceil(3 * sigma)))
    x = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-(x**2) / (2 * sigma * sigma))
    return (k / k.sum()).to(dtype)


def gaussian_blur(frames: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable blur over the last two dims of an (..., C, H, W) tensor, reflect padding."""
    if sigma <= 0:
        return frames
    lead = frames.shape[:-3]
    c, h, w = frames.shape[-3:]
    x = frames.reshape(-1, c, h, w)
    k = gaussian_kernel1d(sigma, frames.dtype)
    r = k.numel() // 2
    if r >= min(h, w):
        raise DimensionError(f"blur radius {r} too large for {h}x{w} frames")
    x = F.pad(x, (r, r, r, r), mode="reflect")
    x = F.conv2d(x, k.view(1, 1, 1, -1).repeat(c, 1, 1, 1), groups=c)
    x = F.conv2d(x, k.view(1, 1, -1, 1).repeat(c, 1, 1, 1), groups=c)
    return x.reshape(*lead, c, h, w)


def teacher_forward(kind: TeacherKind, x_hr: torch.Tensor, x_lr: torch.Tensor | None = None) -> torch.Tensor:
    """Teacher pixels in signed range. ``x_hr`` must already be signed; ``x_lr`` is unused by the oracles."""
    kind.validate()
    if kind.kind == "gt_oracle" or kind.sigma == 0:
        return x_hr
    return gaussian_blur(x_hr, kind.sigma)


class FrozenEncoder(nn.Module):
    """Fixed strided conv stack mapping HR pixels to the tap resolution (HR / 2) and width."""

    def __init__(self, out_channels: int, hidden: int = 32, seed: int = 0):
        super().__init__()
        self.conv1 = nn.Conv2d(3, hidden, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(hidden, out_channels, 3, stride=1, padding=1)
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for conv in (self.conv1, self.conv2):
                bound = math.sqrt(6.0 / conv.weight[0].numel())
                conv.weight.copy_(torch.empty_like(conv.weight).uniform_(-bound, bound, generator=gen))
                conv.bias.zero_()
        self.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t = x.shape[:2]
        h = F.relu(self.conv1(x.flatten(0, 1)))
        return self.conv2(h).unflatten(0, (b, t))


def build_encoder(student: StudentNet, seed: int) -> FrozenEncoder:
    return FrozenEncoder(student.tap_channels, seed=seed)


def reencode_features(x_teacher: torch.Tensor, enc: FrozenEncoder, student: StudentNet) -> torch.Tensor:
    """mid_block(enc(x)) with the student's current mid-block weights; the result is a constant.

    Accepts T x 3 x H x W or B x T x 3 x H x W signed pixels.
    """
    squeeze = x_teacher.ndim == 4
    x = x_teacher.unsqueeze(0) if squeeze else x_teacher
    if x.ndim != 5 or x.shape[2] != 3:
        raise DimensionError(f"expected (B,) T x 3 x H x W pixels, got {tuple(x_teacher.shape)}")
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise DimensionError(f"pixel size {tuple(x.shape[-2:])} must be even to reach the tap resolution")
    with torch.no_grad():
        latent = enc(x)
        if latent.shape[2] != student.tap_channels:
            raise DimensionError("encoder width does not match the student tap")
        b, t = latent.shape[:2]
        feats = student.mid_block(latent.flatten(0, 1)).unflatten(0, (b, t))
    return feats[0] if squeeze else feats
