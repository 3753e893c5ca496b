"""Dual-head discriminators for the pixel and feature domains.

Layout: trainable input adapter -> frozen backbone -> tail [2D conv, 1D temporal conv, 2D conv]
-> two 1x1 heads reading disjoint channel partitions of the shared tail output.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, UsageError
from .student import StudentNet
from .video import VideoClip

DOMAINS = ("pixel", "feature")
BACKBONES = ("frozen_random_pyramid", "frozen_stage1_student_body")
TRAINABLE_GROUPS = ("adapter", "tail", "heads")
LEAK = 0.2


@dataclass
class DiscriminatorConfig:
    domain: str = "pixel"
    backbone: str = ""  # empty: domain default
    tail_channels: int = 256
    head_split: tuple[int, int] = (192, 64)
    adapter_channels: int = 16
    pyramid_widths: tuple[int, ...] = (32, 64, 128)
    # blur before each 2x subsample so pixel features move smoothly with sub-stride motion
    antialias: bool = True
    temporal_kernel: int = 3

    def resolved_backbone(self) -> str:
        if self.backbone:
            return self.backbone
        return "frozen_random_pyramid" if self.domain == "pixel" else "frozen_stage1_student_body"

    def validate(self) -> None:
        if self.domain not in DOMAINS:
            raise ConfigError(f"unknown discriminator domain {self.domain!r}")
        if self.resolved_backbone() not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        d, c = self.head_split
        if d < 0 or c < 0:
            raise ConfigError(f"head split {self.head_split} has a negative width")
        if d + c != self.tail_channels:
            raise ConfigError(f"head split {self.head_split} does not sum to tail_channels={self.tail_channels}")
        if d + c == 0:
            raise ConfigError("at least one head needs channels")
        if self.temporal_kernel % 2 == 0:
            raise ConfigError("temporal_kernel must be odd")


class HeadOutputs(NamedTuple):
    detail_map: torch.Tensor  # B x T x 1 x h' x w'
    consistency_map: torch.Tensor
    detail_logit: torch.Tensor  # B
    consistency_logit: torch.Tensor


def _lrelu(x):
    return F.leaky_relu(x, LEAK)


class FrozenPyramid(nn.Module):
    def __init__(self, cin: int, widths, antialias: bool = True):
        super().__init__()
        self.antialias = antialias
        stride = 1 if antialias else 2
        convs = []
        for w in widths:
            convs.append(nn.Conv2d(cin, w, 3, stride=stride, padding=1))
            cin = w
        self.convs = nn.ModuleList(convs)
        self.out_channels = cin
        k = torch.tensor([1.0, 2.0, 1.0])
        self.register_buffer("blur", (k[:, None] * k[None, :] / 16).view(1, 1, 3, 3), persistent=False)

    def _down(self, x):
        c = x.shape[1]
        x = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), self.blur.expand(c, 1, 3, 3), groups=c)
        return x[:, :, ::2, ::2]

    def forward(self, x):  # (B*T) x C x H x W
        for conv in self.convs:
            x = _lrelu(conv(x))
            if self.antialias:
                x = self._down(x)
        return x


class StudentBodyBackbone(nn.Module):
    """The stage-1 student body (2D stages and their temporal blocks), without the RGB stem."""

    def __init__(self, student: StudentNet):
        super().__init__()
        self.stages = copy.deepcopy(student.body["stages"])
        self.temporal = copy.deepcopy(student.temporal)
        self.in_channels = student.cfg.pruned_body[0]
        self.out_channels = student.cfg.pruned_body[-1]

    def forward(self, x, b, t):
        for stage, tblocks in zip(self.stages, self.temporal):
            x = stage(x)
            if len(tblocks):
                h5 = x.unflatten(0, (b, t))
                for blk in tblocks:
                    h5 = blk(h5)
                x = h5.flatten(0, 1)
        return x


class Discriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig, in_channels: int, student: StudentNet | None = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.domain = cfg.domain
        self.in_channels = in_channels
        kind = cfg.resolved_backbone()
        if kind == "frozen_random_pyramid":
            self.adapter = nn.Conv2d(in_channels, cfg.adapter_channels, 3, padding=1)
            self.backbone = FrozenPyramid(cfg.adapter_channels, cfg.pyramid_widths, cfg.antialias)
        else:
            if student is None:
                raise UsageError("a student-body backbone needs the stage-1 student")
            body = StudentBodyBackbone(student)
            # feature maps sit at twice the body resolution, so the adapter strides by 2
            self.adapter = nn.Conv2d(in_channels, body.in_channels, 3, stride=2, padding=1)
            self.backbone = body
        self.backbone.requires_grad_(False)
        tc = cfg.tail_channels
        self.tail = nn.ModuleDict(
            {
                "conv_a": nn.Conv2d(self.backbone.out_channels, tc, 3, padding=1),
                "conv_t": nn.Conv1d(tc, tc, cfg.temporal_kernel),
                "conv_b": nn.Conv2d(tc, tc, 1),
            }
        )
        d, c = cfg.head_split
        self.heads = nn.ModuleDict()
        if d:
            self.heads["detail"] = nn.Conv2d(d, 1, 1)
        if c:
            self.heads["consistency"] = nn.Conv2d(c, 1, 1)

    def backbone_forward(self, x, b, t):
        if isinstance(self.backbone, StudentBodyBackbone):
            return self.backbone(x, b, t)
        return self.backbone(x)

    def tail_forward(self, h, b, t):
        h = _lrelu(self.tail["conv_a"](h))
        hh, ww = h.shape[-2:]
        # the 1D conv runs as a (k x 1) conv2d over a B x C x T x HW view; same result, no permutes
        seq = h.unflatten(0, (b, t)).transpose(1, 2).flatten(3)
        p = self.cfg.temporal_kernel // 2
        if p:
            seq = F.pad(seq, (0, 0, p, p), mode="replicate")
        conv = self.tail["conv_t"]
        seq = F.conv2d(seq, conv.weight.unsqueeze(-1), conv.bias)
        h = _lrelu(seq.unflatten(3, (hh, ww)).transpose(1, 2).flatten(0, 1))
        return _lrelu(self.tail["conv_b"](h))

    def heads_forward(self, feats, b, t) -> HeadOutputs:
        d, _ = self.cfg.head_split
        n, _, hh, ww = feats.shape
        zeros_map = feats.new_zeros(b, t, 1, hh, ww)
        if "detail" in self.heads:
            dmap = self.heads["detail"](feats[:, :d]).unflatten(0, (b, t))
        else:
            dmap = zeros_map
        if "consistency" in self.heads:
            cmap = self.heads["consistency"](feats[:, d:]).unflatten(0, (b, t))
        else:
            cmap = zeros_map
        return HeadOutputs(dmap, cmap, dmap.mean(dim=(1, 2, 3, 4)), cmap.mean(dim=(1, 2, 3, 4)))

    def forward(self, x: torch.Tensor) -> HeadOutputs:
        squeeze = x.ndim == 4
        if squeeze:
            x = x.unsqueeze(0)
        if x.ndim != 5 or x.shape[2] != self.in_channels:
            raise UsageError(
                f"{self.domain} discriminator expects (B,) T x {self.in_channels} x H x W, got {tuple(x.shape)}"
            )
        b, t = x.shape[:2]
        h = _lrelu(self.adapter(x.flatten(0, 1)))
        h = self.backbone_forward(h, b, t)
        out = self.heads_forward(self.tail_forward(h, b, t), b, t)
        if squeeze:
            return HeadOutputs(*(o[0] for o in out))
        return out

    def trainable_parameters(self):
        return [p for n, p in self.named_parameters() if n.split(".")[0] in TRAINABLE_GROUPS]

    def frozen_parameters(self):
        return [p for n, p in self.named_parameters() if n.split(".")[0] == "backbone"]


def build_discriminator(
    cfg: DiscriminatorConfig, seed: int, stage1_student: StudentNet | None = None
) -> Discriminator:
    cfg.validate()
    if cfg.domain == "pixel":
        in_channels = 3
    else:
        if stage1_student is None:
            raise UsageError("the feature-domain discriminator is built from the stage-1 student")
        in_channels = stage1_student.tap_channels
    if cfg.resolved_backbone() == "frozen_stage1_student_body" and stage1_student is None:
        raise UsageError("backbone frozen_stage1_student_body needs the stage-1 student")
    d = Discriminator(cfg, in_channels, stage1_student)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, m in d.named_modules():
            if name.startswith("backbone") and cfg.resolved_backbone() == "frozen_stage1_student_body":
                continue  # keep the copied student weights
            if isinstance(m, (nn.Conv2d, nn.Conv1d)):
                fan_in = m.weight[0].numel()
                bound = math.sqrt(6.0 / ((1 + LEAK**2) * fan_in))
                if name.startswith("heads"):
                    bound = 1.0 / math.sqrt(fan_in)
                m.weight.copy_(torch.empty_like(m.weight).uniform_(-bound, bound, generator=gen))
                m.bias.zero_()
    d.backbone.requires_grad_(False)
    return d


def disc_forward(d: Discriminator, sample, domain: str | None = None) -> HeadOutputs:
    if isinstance(sample, VideoClip):
        if d.domain != "pixel":
            raise UsageError("a pixel clip was routed to the feature discriminator")
        sample = sample.to_signed().frames
    if domain is not None and domain != d.domain:
        raise UsageError(f"{domain} sample routed to the {d.domain} discriminator")
    return d(sample)
