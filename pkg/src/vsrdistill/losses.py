"""Distillation and adversarial losses, and the curated label set for the dual-head discriminators."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError, UsageError
from .video import shuffle_batch

SOURCE_LABELS = {
    "student": (-1, -1),
    "video": (0, 1),
    "video_shuffled": (0, -1),
    "image_static": (1, 1),
    "image_assembled": (1, -1),
}


@dataclass
class LossWeights:
    lambda_pixel: float = 0.1
    lambda_feature: float = 1.0
    lambda_adv: float = 1.0

    def validate(self) -> None:
        for k, v in vars(self).items():
            if v < 0:
                raise ConfigError(f"{k} must be >= 0, got {v}")


@dataclass
class CurationConfig:
    """Which curated sources enter the discriminator set, and the detail label of real videos."""

    include_shuffled_video: bool = True
    include_assembled_images: bool = True
    video_detail_label: int = 0
    reduction: str = "mean"  # "sum" is the literal sum over the set

    def validate(self) -> None:
        if self.video_detail_label not in (-1, 0, 1):
            raise ConfigError("video_detail_label must be -1, 0 or 1")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError(f"unknown reduction {self.reduction!r}")


@dataclass
class LabeledSample:
    payload: torch.Tensor  # B x T x C x H x W
    domain: str
    y_d: int
    y_c: int
    source_tag: str

    def __post_init__(self):
        if self.y_d not in (-1, 0, 1) or self.y_c not in (-1, 0, 1):
            raise UsageError(f"labels must lie in {{-1, 0, 1}}, got ({self.y_d}, {self.y_c})")
        if self.domain not in ("pixel", "feature"):
            raise UsageError(f"unknown domain {self.domain!r}")


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape(a, b, "l1")
    return (a - b).abs().mean()


def softplus(x):
    """log(1 + exp(x)) without overflow for large |x|."""
    if not torch.is_tensor(x):
        x = torch.as_tensor(x, dtype=torch.float64)
    return torch.clamp(x, min=0) + torch.log1p(torch.exp(-x.abs()))


# ---------------------------------------------------------------------------
# structure/texture perceptual distance over a frozen random pyramid


class StructureTextureDistance(nn.Module):
    """Scale 0 is the image itself; scales 1..n-1 come from seeded strided convs + ReLU."""

    def __init__(self, widths: Sequence[int] = (16, 32), seed: int = 1234, c1: float = 1e-6, c2: float = 1e-6):
        super().__init__()
        self.c1, self.c2 = c1, c2
        gen = torch.Generator().manual_seed(seed)
        convs = []
        cin = 3
        for w in widths:
            conv = nn.Conv2d(cin, w, 3, stride=2, padding=1)
            bound = math.sqrt(6.0 / conv.weight[0].numel())
            with torch.no_grad():
                conv.weight.copy_(torch.empty_like(conv.weight).uniform_(-bound, bound, generator=gen))
                conv.bias.zero_()
            convs.append(conv)
            cin = w
        self.convs = nn.ModuleList(convs)
        self.requires_grad_(False)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = [x]
        for conv in self.convs:
            x = F.relu(F.conv2d(x, conv.weight.to(x.dtype), conv.bias.to(x.dtype), stride=2, padding=1))
            feats.append(x)
        return feats

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        _same_shape(a, b, "dists")
        if a.shape[-3] != 3:
            raise DimensionError(f"dists expects RGB frames, got {tuple(a.shape)}")
        fa = self.features(a.reshape(-1, *a.shape[-3:]))
        fb = self.features(b.reshape(-1, *b.shape[-3:]))
        per_scale = []
        for xa, xb in zip(fa, fb):
            mu_a = xa.mean(dim=(2, 3))
            mu_b = xb.mean(dim=(2, 3))
            var_a = ((xa - mu_a[..., None, None]) ** 2).mean(dim=(2, 3))
            var_b = ((xb - mu_b[..., None, None]) ** 2).mean(dim=(2, 3))
            cov = ((xa - mu_a[..., None, None]) * (xb - mu_b[..., None, None])).mean(dim=(2, 3))
            texture = (2 * mu_a * mu_b + self.c1) / (mu_a**2 + mu_b**2 + self.c1)
            structure = (2 * cov + self.c2) / (var_a + var_b + self.c2)
            # frames x channels; mean over channels then frames
            per_scale.append(((texture + structure) / 2).mean(dim=1))
        sim = torch.stack(per_scale).mean(dim=0)  # per frame
        return 1 - sim.mean()


_DEFAULT_DISTS: StructureTextureDistance | None = None


def default_dists() -> StructureTextureDistance:
    global _DEFAULT_DISTS
    if _DEFAULT_DISTS is None:
        _DEFAULT_DISTS = StructureTextureDistance()
    return _DEFAULT_DISTS


def dists(a: torch.Tensor, b: torch.Tensor, metric: StructureTextureDistance | None = None) -> torch.Tensor:
    """Per-frame structure/texture distance averaged over frames; inputs in signed range."""
    if hasattr(a, "frames"):
        a = a.to_signed().frames
    if hasattr(b, "frames"):
        b = b.to_signed().frames
    return (metric or default_dists())(a, b)


# ---------------------------------------------------------------------------
# generator objective


def adversarial_term(logits) -> torch.Tensor | None:
    """Non-saturating term averaged over the present heads; ``logits`` is a tensor or a list per head."""
    if logits is None:
        return None
    if torch.is_tensor(logits) or isinstance(logits, (int, float)):
        logits = [logits]
    terms = [softplus(-torch.as_tensor(lg)).mean() for lg in logits]
    if not terms:
        return None
    return torch.stack(terms).mean()


def gen_loss(x_s, x_t, f_s, f_t, d_pix_logit, d_feat_logit, w: LossWeights = LossWeights(), metric=None):
    """Returns (total, terms). Discriminator logits may be None for a missing adversary."""
    _same_shape(x_s, x_t, "pixel targets")
    _same_shape(f_s, f_t, "feature targets")
    zero = x_s.new_zeros(())
    pix_l1 = l1(x_s, x_t)
    pix_dists = dists(x_s, x_t, metric)
    adv_p = adversarial_term(d_pix_logit) if w.lambda_adv else None
    adv_f = adversarial_term(d_feat_logit) if w.lambda_adv else None
    adv_p = zero if adv_p is None else adv_p.to(x_s.dtype)
    adv_f = zero if adv_f is None else adv_f.to(x_s.dtype)
    feat_l1 = l1(f_s, f_t)
    loss_pixel = pix_l1 + pix_dists + w.lambda_adv * adv_p
    loss_feature = feat_l1 + w.lambda_adv * adv_f
    total = w.lambda_pixel * loss_pixel + w.lambda_feature * loss_feature
    terms = {
        "pixel_l1": pix_l1,
        "pixel_dists": pix_dists,
        "pixel_adv": adv_p,
        "feature_l1": feat_l1,
        "feature_adv": adv_f,
        "L_pixel": loss_pixel,
        "L_feature": loss_feature,
        "total": total,
    }
    return total, terms


def distill_loss(x_s, x_t, f_s, f_t, w: LossWeights = LossWeights(), metric=None):
    """Stage-1 objective: the generator loss with the adversarial terms removed."""
    return gen_loss(x_s, x_t, f_s, f_t, None, None, LossWeights(w.lambda_pixel, w.lambda_feature, 0.0), metric)


# ---------------------------------------------------------------------------
# discriminator objective


def sample_term(detail_logit, consistency_logit, y_d: int, y_c: int) -> torch.Tensor:
    return softplus(-y_d * detail_logit).mean() + softplus(-y_c * consistency_logit).mean()


def disc_logits(samples: Sequence[LabeledSample], d_pixel, d_feature) -> list[tuple[torch.Tensor, torch.Tensor] | None]:
    """Per-sample (detail, consistency) logits, one discriminator pass per domain.

    Entries are None where the sample's domain has no discriminator.
    """
    out: list = [None] * len(samples)
    for domain, d in (("pixel", d_pixel), ("feature", d_feature)):
        idx = [i for i, s in enumerate(samples) if s.domain == domain]
        if not idx or d is None:
            continue
        if getattr(d, "domain", domain) != domain:
            raise UsageError(f"{domain} samples routed to a {d.domain} discriminator")
        payloads = [samples[i].payload if samples[i].payload.ndim == 5 else samples[i].payload.unsqueeze(0) for i in idx]
        sizes = [p.shape[0] for p in payloads]
        heads = d(torch.cat(payloads))
        for i, ld, lc in zip(idx, heads.detail_logit.split(sizes), heads.consistency_logit.split(sizes)):
            out[i] = (ld, lc)
    return out


def disc_loss(samples: Sequence[LabeledSample], d_pixel, d_feature, reduction: str = "mean") -> torch.Tensor:
    """Softplus(-y_d * detail) + Softplus(-y_c * consistency) over the labeled set.

    Samples whose domain has no discriminator (single-domain runs) are skipped. ``reduction="sum"``
    gives the literal sum over the set; the default mean keeps the scale independent of set size.
    """
    if reduction not in ("mean", "sum"):
        raise UsageError(f"unknown reduction {reduction!r}")
    for s in samples:
        if s.y_d not in (-1, 0, 1) or s.y_c not in (-1, 0, 1):
            raise UsageError(f"invalid label ({s.y_d}, {s.y_c}) on {s.source_tag}")
    terms = [
        sample_term(lg[0], lg[1], s.y_d, s.y_c)
        for s, lg in zip(samples, disc_logits(samples, d_pixel, d_feature))
        if lg is not None
    ]
    if not terms:
        return torch.zeros(())
    stacked = torch.stack(terms)
    return stacked.sum() if reduction == "sum" else stacked.mean()


def build_label_set(
    x_student,
    f_student,
    video_clip,
    image_frame,
    image_frames_t,
    seed,
    reencode: Callable[[torch.Tensor], torch.Tensor] | None = None,
    curation: CurationConfig = CurationConfig(),
) -> list[LabeledSample]:
    """The ten (payload, y_d, y_c) entries: five sources, each in the pixel and feature domain.

    Pixel payloads are B x T x 3 x H x W in signed range; ``image_frame`` is B x 3 x H x W and is
    repeated into a static pseudo-video. ``reencode`` maps pixel payloads to tap features; without
    it only pixel-domain entries can be built.
    """
    named = {
        "x_student": x_student,
        "f_student": f_student,
        "video_clip": video_clip,
        "image_frame": image_frame,
        "image_frames_t": image_frames_t,
    }
    missing = [k for k, v in named.items() if v is None]
    if missing:
        raise UsageError(f"build_label_set is missing payloads: {', '.join(missing)}")
    curation.validate()
    if reencode is None:
        raise UsageError("build_label_set needs the re-encoding path for feature payloads")

    t_len = video_clip.shape[1]
    if image_frames_t.shape[1] != t_len:
        raise DimensionError("assembled image sequences must have the video's frame count")
    pixels = {
        "student": x_student,
        "video": video_clip,
        "video_shuffled": shuffle_batch(video_clip, seed),
        "image_static": image_frame.unsqueeze(1).expand(-1, t_len, -1, -1, -1).contiguous(),
        "image_assembled": image_frames_t,
    }
    for tag, p in pixels.items():
        if p.shape != x_student.shape:
            raise DimensionError(f"{tag} payload {tuple(p.shape)} does not match student {tuple(x_student.shape)}")
    tags = ["student", "video"]
    if curation.include_shuffled_video:
        tags.append("video_shuffled")
    tags.append("image_static")
    if curation.include_assembled_images:
        tags.append("image_assembled")

    samples = []
    for tag in tags:
        y_d, y_c = SOURCE_LABELS[tag]
        if tag in ("video", "video_shuffled"):
            y_d = curation.video_detail_label
        samples.append(LabeledSample(pixels[tag], "pixel", y_d, y_c, tag))
        feat = f_student if tag == "student" else reencode(pixels[tag])
        samples.append(LabeledSample(feat, "feature", y_d, y_c, tag))
    return samples
