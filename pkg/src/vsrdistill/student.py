"""The "2D + 1D" student: a pruned per-frame 2D backbone with zero-initialized temporal residual blocks."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError
from .video import VideoClip

TEMPORAL_MODES = ("conv_rb", "conv_rb_doubled", "temporal_attention", "none")
TAP = "decoder_middle_block"


def prune_width(width: int, fraction: float) -> int:
    if not 0 <= fraction < 1:
        raise ConfigError(f"prune fraction must lie in [0, 1), got {fraction}")
    return max(4, _round_half_up(width * (1 - fraction)))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class StudentConfig:
    body_widths: tuple[int, ...] = (48, 48, 48)
    decoder_widths: tuple[int, int] = (64, 32)
    body_prune_fraction: float = 0.25
    decoder_prune_fraction: float = 0.50
    blocks_per_stage: int = 2
    temporal_kernel: int = 3
    temporal_mode: str = "conv_rb"
    scale_factor: int = 4
    tap: str = TAP

    def validate(self) -> None:
        for frac in (self.body_prune_fraction, self.decoder_prune_fraction):
            if not 0 <= frac < 1:
                raise ConfigError(f"prune fraction must lie in [0, 1), got {frac}")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ConfigError(f"temporal_kernel must be odd, got {self.temporal_kernel}")
        if self.temporal_mode not in TEMPORAL_MODES:
            raise ConfigError(f"unknown temporal_mode {self.temporal_mode!r}")
        if self.scale_factor != 4:
            raise ConfigError("the decoder has exactly two x2 upsampling stages; scale_factor must be 4")
        if len(self.decoder_widths) != 2:
            raise ConfigError("decoder_widths needs one width per upsampling stage (2)")
        if not self.body_widths or self.blocks_per_stage < 1:
            raise ConfigError("body needs at least one stage with one block")
        if self.tap != TAP:
            raise ConfigError(f"only the {TAP!r} tap is supported")
        for w, frac in [(w, self.body_prune_fraction) for w in self.body_widths] + [
            (w, self.decoder_prune_fraction) for w in self.decoder_widths
        ]:
            if _round_half_up(w * (1 - frac)) < 4:
                raise ConfigError(f"width {w} pruned by {frac:.0%} drops below 4 channels")

    @property
    def pruned_body(self) -> list[int]:
        return [prune_width(w, self.body_prune_fraction) for w in self.body_widths]

    @property
    def pruned_decoder(self) -> list[int]:
        return [prune_width(w, self.decoder_prune_fraction) for w in self.decoder_widths]


class ForwardOutputs(NamedTuple):
    x_student: torch.Tensor  # (B,) T x 3 x sH x sW, signed range
    f_student: torch.Tensor  # (B,) T x C' x h' x w'


def _groups(c: int) -> int:
    return math.gcd(4, c)


def conv3x3(cin, cout):
    return nn.Conv2d(cin, cout, 3, padding=1)


class ResBlock(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.conv1 = conv3x3(c, c)
        self.norm1 = nn.GroupNorm(_groups(c), c)
        self.conv2 = conv3x3(c, c)
        self.norm2 = nn.GroupNorm(_groups(c), c)

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.relu(x + h)


class UpBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = conv3x3(cin, cout)
        self.norm = nn.GroupNorm(_groups(cout), cout)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return F.relu(self.norm(self.conv(x)))


class TemporalRB(nn.Module):
    """x + conv2(relu(conv1(x))) along T at every spatial location, replicate padding."""

    def __init__(self, channels: int, kernel: int = 3):
        super().__init__()
        self.channels = channels
        self.kernel = kernel
        self.conv1 = nn.Conv1d(channels, channels, kernel)
        self.conv2 = nn.Conv1d(channels, channels, kernel)

    def _tconv(self, conv, x):
        p = self.kernel // 2
        if p:
            x = F.pad(x, (p, p), mode="replicate")
        return conv(x)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        # feats: B x T x C x h x w
        b, t, c, h, w = feats.shape
        if c != self.channels:
            raise DimensionError(f"temporal block expects {self.channels} channels, got {c}")
        seq = feats.permute(0, 3, 4, 2, 1).reshape(b * h * w, c, t)
        res = self._tconv(self.conv2, F.relu(self._tconv(self.conv1, seq)))
        res = res.reshape(b, h, w, c, t).permute(0, 4, 3, 1, 2)
        return feats + res

    def zero_init_(self):
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)


class TemporalAttention(nn.Module):
    """Single-head self-attention over T at every spatial location, residual, zero-initialized output."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)

    def forward(self, feats):
        b, t, c, h, w = feats.shape
        if c != self.channels:
            raise DimensionError(f"temporal attention expects {self.channels} channels, got {c}")
        seq = feats.permute(0, 3, 4, 1, 2).reshape(b * h * w, t, c)
        q, k, v = self.qkv(seq).chunk(3, dim=-1)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        out = self.proj(attn @ v).reshape(b, h, w, t, c).permute(0, 3, 4, 1, 2)
        return feats + out

    def zero_init_(self):
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)


class StudentNet(nn.Module):
    def __init__(self, cfg: StudentConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        body_w = cfg.pruned_body
        dec_w = cfg.pruned_decoder

        self.body = nn.ModuleDict()
        self.body["stem"] = conv3x3(3, body_w[0])
        stages = []
        prev = body_w[0]
        for w in body_w:
            layers = []
            if w != prev:
                layers.append(nn.Conv2d(prev, w, 1))
            layers += [ResBlock(w) for _ in range(cfg.blocks_per_stage)]
            stages.append(nn.Sequential(*layers))
            prev = w
        self.body["stages"] = nn.ModuleList(stages)

        # one temporal insertion point after each body stage, same width as that stage
        self.temporal = nn.ModuleList()
        for w in body_w:
            if cfg.temporal_mode == "conv_rb":
                blocks = [TemporalRB(w, cfg.temporal_kernel)]
            elif cfg.temporal_mode == "conv_rb_doubled":
                blocks = [TemporalRB(w, cfg.temporal_kernel), TemporalRB(w, cfg.temporal_kernel)]
            elif cfg.temporal_mode == "temporal_attention":
                blocks = [TemporalAttention(w)]
            else:
                blocks = []
            self.temporal.append(nn.ModuleList(blocks))

        self.decoder = nn.ModuleDict(
            {
                "conv_in": conv3x3(prev, dec_w[0]),
                "up1": UpBlock(dec_w[0], dec_w[0]),
                "mid": ResBlock(dec_w[0]),
                "up2": UpBlock(dec_w[0], dec_w[1]),
                "conv_out": conv3x3(dec_w[1], 3),
            }
        )

    @property
    def tap_channels(self) -> int:
        return self.cfg.pruned_decoder[0]

    @property
    def mid_block(self) -> ResBlock:
        return self.decoder["mid"]

    # -- pieces, all taking/returning B x T x C x H x W

    def body_forward(self, x: torch.Tensor, temporal: bool = True) -> torch.Tensor:
        b, t = x.shape[:2]
        h = self.body["stem"](x.flatten(0, 1))
        for stage, tblocks in zip(self.body["stages"], self.temporal):
            h = stage(h)
            if temporal and len(tblocks):
                h5 = h.unflatten(0, (b, t))
                for blk in tblocks:
                    h5 = blk(h5)
                h = h5.flatten(0, 1)
        return h.unflatten(0, (b, t))

    def decoder_front(self, feats: torch.Tensor) -> torch.Tensor:
        b, t = feats.shape[:2]
        h = F.relu(self.decoder["conv_in"](feats.flatten(0, 1)))
        h = self.decoder["up1"](h)
        h = self.decoder["mid"](h)
        return h.unflatten(0, (b, t))

    def decoder_back(self, tap: torch.Tensor) -> torch.Tensor:
        b, t = tap.shape[:2]
        h = self.decoder["up2"](tap.flatten(0, 1))
        h = torch.tanh(self.decoder["conv_out"](h))
        return h.unflatten(0, (b, t))

    def check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 5 or x.shape[2] != 3:
            raise DimensionError(f"student expects (B,) T x 3 x H x W input, got {tuple(x.shape)}")
        if x.shape[3] < 2 or x.shape[4] < 2:
            raise DimensionError(f"input frames too small: {tuple(x.shape[-2:])}")

    def forward(self, x: torch.Tensor, temporal: bool = True) -> ForwardOutputs:
        squeeze = x.ndim == 4
        if squeeze:
            x = x.unsqueeze(0)
        self.check_input(x)
        tap = self.decoder_front(self.body_forward(x, temporal=temporal))
        out = self.decoder_back(tap)
        if squeeze:
            return ForwardOutputs(out[0], tap[0])
        return ForwardOutputs(out, tap)


def _init_conv_(m: nn.Module, gen: torch.Generator) -> None:
    fan_in = m.weight[0].numel()
    bound = math.sqrt(6.0 / fan_in)
    with torch.no_grad():
        m.weight.copy_(torch.empty_like(m.weight).uniform_(-bound, bound, generator=gen))
        if m.bias is not None:
            m.bias.zero_()


def build_student(cfg: StudentConfig, seed: int) -> StudentNet:
    """Deterministic build: fan-in scaled uniform 2D init, temporal output layers exactly zero."""
    cfg.validate()
    net = StudentNet(cfg)
    gen = torch.Generator().manual_seed(int(seed))
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv1d, nn.Linear)):
            _init_conv_(m, gen)
    # keep the output layer small so the initial image stays out of tanh saturation
    with torch.no_grad():
        net.decoder["conv_out"].weight.mul_(0.1)
    for group in net.temporal:
        for blk in group:
            blk.zero_init_()
    return net


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, VideoClip):
        return x.to_signed().frames
    return x


def temporal_rb_forward(block: TemporalRB, features: torch.Tensor) -> torch.Tensor:
    """Apply one temporal block to a T x C x h x w (or batched) feature volume."""
    if features.ndim == 4:
        return block(features.unsqueeze(0))[0]
    return block(features)


def student_forward(net: StudentNet, x_lr) -> ForwardOutputs:
    return net(_as_tensor(x_lr), temporal=True)


def forward_2d_only(net: StudentNet, x_lr) -> ForwardOutputs:
    return net(_as_tensor(x_lr), temporal=False)


def count_params(net: StudentNet) -> dict[str, int]:
    groups = {"body_2d": 0, "decoder_2d": 0, "temporal": 0}
    for name, p in net.named_parameters():
        key = {"body": "body_2d", "decoder": "decoder_2d", "temporal": "temporal"}[name.split(".")[0]]
        groups[key] += p.numel()
    groups["total"] = sum(groups.values())
    return groups
