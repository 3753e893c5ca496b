"""Fidelity and temporal-consistency metrics, temporal profiles and JSON reports."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import DimensionError, UsageError
from .video import DegradationConfig, FlowField, VideoClip, degrade, warp

PSNR_CAP = 99.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _unit(x) -> torch.Tensor:
    if isinstance(x, VideoClip):
        return x.to_unit().frames
    return x


def _check_pair(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a, b) -> float:
    """Mean over frames of 10 log10(1 / MSE); unit range; identical frames score the 99 dB cap."""
    a, b = _unit(a).double(), _unit(b).double()
    _check_pair(a, b, "psnr")
    mse = ((a - b) ** 2).flatten(1).mean(dim=1)
    vals = [PSNR_CAP if m == 0 else min(PSNR_CAP, 10 * math.log10(1.0 / float(m))) for m in mse]
    return float(np.mean(vals))


def ssim(a, b, window: int = 8, stride: int = 4) -> float:
    """Windowed SSIM with uniform 8x8 windows at stride 4, averaged over windows, channels and frames."""
    a, b = _unit(a).double(), _unit(b).double()
    _check_pair(a, b, "ssim")
    if a.shape[-1] < window or a.shape[-2] < window:
        raise DimensionError(f"frames smaller than the {window}x{window} SSIM window")
    pool = lambda x: F.avg_pool2d(x, window, stride)  # noqa: E731
    mu_a, mu_b = pool(a), pool(b)
    var_a = pool(a * a) - mu_a**2
    var_b = pool(b * b) - mu_b**2
    cov = pool(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean())


def warping_error(clip, flow: FlowField) -> float:
    """Masked mean of the squared RGB error between frame t and frame t+1 warped back, x 1e3."""
    x = _unit(clip).double()
    t_len = x.shape[0]
    if t_len < 2:
        raise UsageError("warping error needs at least two frames")
    disp = flow.displacements.double()
    if disp.shape[0] != t_len - 1 or disp.shape[-2:] != x.shape[-2:]:
        raise DimensionError(f"flow {tuple(disp.shape)} does not fit a {tuple(x.shape)} clip")
    warped, mask = warp(x[1:], disp)
    mask = mask & flow.validity_mask.bool()
    err = ((x[:-1] - warped) ** 2).sum(dim=1)
    per_t = []
    for e, m in zip(err, mask):
        n = int(m.sum())
        per_t.append(float((e * m).sum()) / n if n else 0.0)
    return 1e3 * float(np.mean(per_t))


def temporal_profile(clip, row: int | str = "center") -> torch.Tensor:
    """3 x W x T image whose column t is pixel row ``row`` of frame t."""
    x = _unit(clip)
    h = x.shape[-2]
    if row == "center":
        row = h // 2
    row = int(row)
    if not 0 <= row < h:
        raise UsageError(f"row {row} outside 0..{h - 1}")
    return x[:, :, row, :].permute(1, 2, 0).contiguous()


def save_profile(profile: torch.Tensor, path: str | Path) -> None:
    codes = torch.round(profile.clamp(0, 1) * 255).to(torch.uint8).permute(1, 2, 0).numpy()
    Image.fromarray(np.ascontiguousarray(codes), mode="RGB").save(path)


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    e_warp_star: float | None
    per_clip: list = field(default_factory=list)
    config_echo: dict = field(default_factory=dict)
    dataset: str = ""
    checkpoint: str = ""

    def to_json(self) -> str:
        doc = {
            "dataset": self.dataset,
            "checkpoint": self.checkpoint,
            "metrics": {"psnr": self.psnr, "ssim": self.ssim, "e_warp_star": self.e_warp_star},
            "per_clip": self.per_clip,
            "config_echo": self.config_echo,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        doc = json.loads(text)
        m = doc["metrics"]
        return cls(
            psnr=m["psnr"],
            ssim=m["ssim"],
            e_warp_star=m["e_warp_star"],
            per_clip=doc.get("per_clip", []),
            config_echo=doc.get("config_echo", {}),
            dataset=doc.get("dataset", ""),
            checkpoint=doc.get("checkpoint", ""),
        )

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def evaluate(
    model: Callable[[torch.Tensor], torch.Tensor],
    clips: Sequence[VideoClip],
    flows: Sequence[FlowField | None],
    degradation: DegradationConfig | None = None,
    seed: int = 0,
    lr_clips: Sequence[VideoClip] | None = None,
) -> MetricReport:
    """Super-resolve held-out clips and score them against HR.

    ``model`` maps a signed T x 3 x h x w LR clip to a signed HR clip (use ``as_model`` for a
    StudentNet). LR inputs are ``lr_clips`` if given, else ``degrade(hr, degradation, (seed, i))``.
    """
    degradation = degradation or DegradationConfig()
    per_clip = []
    for i, (hr, flow) in enumerate(zip(clips, flows)):
        lr = lr_clips[i] if lr_clips is not None else degrade(hr, degradation, (seed, i))
        with torch.no_grad():
            out = model(lr.to_signed().frames)
        sr = VideoClip(((out.clamp(-1, 1) + 1) / 2).float(), "unit", hr.clip_id)
        entry = {
            "clip_id": hr.clip_id,
            "psnr": psnr(sr, hr),
            "ssim": ssim(sr, hr),
            "e_warp_star": warping_error(sr, flow) if flow is not None and sr.num_frames > 1 else None,
        }
        per_clip.append(entry)
    warps = [c["e_warp_star"] for c in per_clip if c["e_warp_star"] is not None]
    return MetricReport(
        psnr=float(np.mean([c["psnr"] for c in per_clip])) if per_clip else float("nan"),
        ssim=float(np.mean([c["ssim"] for c in per_clip])) if per_clip else float("nan"),
        e_warp_star=float(np.mean(warps)) if warps else None,
        per_clip=per_clip,
        config_echo={"degradation": asdict(degradation), "seed": seed},
    )


def as_model(net) -> Callable[[torch.Tensor], torch.Tensor]:
    def run(x):
        return net(x).x_student

    return run
