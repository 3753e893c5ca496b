"""Procedural datasets on disk and in memory, the image pool, and (seed, index)-deterministic sampling."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, FormatError, VSRError
from .video import (
    TEXTURES,
    DegradationConfig,
    FlowField,
    ProceduralSpec,
    VideoClip,
    degrade,
    detail_image,
    load_clip,
    load_flow,
    save_clip,
    save_flow,
    synth_clip,
)

MOTION_CHOICES = ("static", "translate", "rotate_texture", "mixed")


def procedural_specs(n: int, frames: int, size: tuple[int, int], seed: int, motion: str = "mixed") -> list[ProceduralSpec]:
    if motion not in MOTION_CHOICES:
        raise ConfigError(f"unknown motion {motion!r}; choose from {MOTION_CHOICES}")
    if motion in ("translate", "rotate_texture", "mixed") and frames < 2:
        raise ConfigError(f"motion {motion!r} needs at least 2 frames: flow is undefined for a single frame")
    rng = np.random.default_rng([seed, 7])
    specs = []
    for i in range(n):
        m = motion
        if motion == "mixed":
            m = "translate" if i % 4 != 3 else "rotate_texture"
        vmax = max(1, min(2, size[0] // 8))
        vel = (0.0, 0.0)
        if m == "translate":
            while vel == (0.0, 0.0):
                vel = (float(rng.integers(-vmax, vmax + 1)), float(rng.integers(-vmax, vmax + 1)))
        specs.append(
            ProceduralSpec(
                motion=m,
                velocity=vel,
                texture=str(TEXTURES[int(rng.integers(len(TEXTURES)))]),
                frames=frames,
                size=tuple(size),
                rotation_deg=float(rng.uniform(1.0, 3.0)) * (1 if rng.random() < 0.5 else -1),
            )
        )
    return specs


@dataclass
class ClipDataset:
    clips: list[VideoClip]  # HR, unit range
    flows: list[FlowField | None]
    train_ids: list[int]
    val_ids: list[int]
    name: str = "synthetic"
    meta: dict = field(default_factory=dict)

    @property
    def train(self) -> list[VideoClip]:
        return [self.clips[i] for i in self.train_ids]

    def val(self) -> tuple[list[VideoClip], list[FlowField | None]]:
        return [self.clips[i] for i in self.val_ids], [self.flows[i] for i in self.val_ids]


def split_ids(n: int, val_fraction: float = 0.25) -> tuple[list[int], list[int]]:
    if n < 2:
        return list(range(n)), []
    n_val = max(1, int(round(n * val_fraction)))
    return list(range(n - n_val)), list(range(n - n_val, n))


def synthetic_dataset(
    n: int, frames: int, size: tuple[int, int], seed: int, motion: str = "mixed", val_fraction: float = 0.25
) -> ClipDataset:
    clips, flows = [], []
    for i, spec in enumerate(procedural_specs(n, frames, size, seed, motion)):
        clip, flow = synth_clip(spec, [seed, i])
        clip.clip_id = f"clip_{i:04d}"
        clips.append(clip)
        flows.append(flow if frames > 1 else None)
    train, val = split_ids(n, val_fraction)
    meta = {"clips": n, "frames": frames, "height": size[0], "width": size[1], "seed": seed, "motion": motion}
    return ClipDataset(clips, flows, train, val, name="synthetic", meta=meta)


def write_dataset(ds: ClipDataset, out: str | Path) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for clip, flow in zip(ds.clips, ds.flows):
            d = save_clip(clip, out / clip.clip_id)
            if flow is not None:
                save_flow(flow, d / "flow.bin")
        manifest = dict(ds.meta)
        manifest.update(
            {
                "clip_ids": [c.clip_id for c in ds.clips],
                "split": {
                    "train": [ds.clips[i].clip_id for i in ds.train_ids],
                    "val": [ds.clips[i].clip_id for i in ds.val_ids],
                },
            }
        )
        (out / "dataset.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    except OSError as exc:
        raise VSRError(f"cannot write dataset to {out}: {exc}") from exc
    return out


def load_dataset(root: str | Path) -> ClipDataset:
    root = Path(root)
    mpath = root / "dataset.json"
    if not mpath.is_file():
        raise FormatError(f"{root}: missing dataset.json")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    ids = manifest["clip_ids"]
    clips, flows = [], []
    for cid in ids:
        clip = load_clip(root / cid)
        clip.clip_id = cid
        clips.append(clip.to_unit())
        fpath = root / cid / "flow.bin"
        flows.append(load_flow(fpath) if fpath.is_file() else None)
    index = {cid: i for i, cid in enumerate(ids)}
    split = manifest.get("split", {})
    train = [index[c] for c in split.get("train", ids)]
    val = [index[c] for c in split.get("val", [])]
    meta = {k: v for k, v in manifest.items() if k not in ("clip_ids", "split")}
    return ClipDataset(clips, flows, train, val, name=str(root), meta=meta)


# ---------------------------------------------------------------------------
# sampling; the i-th draw depends only on (seed, i)


def temporal_crop(clip: VideoClip, frames: int, rng: np.random.Generator) -> torch.Tensor:
    t_len = clip.num_frames
    if t_len < frames:
        raise ConfigError(f"clip {clip.clip_id} has {t_len} frames, need {frames}")
    start = int(rng.integers(0, t_len - frames + 1))
    return clip.frames[start : start + frames]


def sample_pairs(
    ds: ClipDataset, degradation: DegradationConfig, seed: int, index: int, batch: int, frames: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """LR-HR batch (B x T x 3 x h x w, B x T x 3 x H x W), signed range."""
    if not ds.train_ids:
        raise VSRError("dataset has no training clips")
    rng = np.random.default_rng([seed, index, 0])
    picks = rng.integers(0, len(ds.train_ids), size=batch)
    lrs, hrs = [], []
    for k, p in enumerate(picks):
        hr = VideoClip(temporal_crop(ds.clips[ds.train_ids[int(p)]], frames, rng), "unit")
        lr = degrade(hr, degradation, [seed, index, 1, k])
        hrs.append(hr.frames)
        lrs.append(lr.frames)
    return torch.stack(lrs) * 2 - 1, torch.stack(hrs) * 2 - 1


def sample_videos(ds: ClipDataset, seed: int, index: int, batch: int, frames: int) -> torch.Tensor:
    """Real HR videos for the discriminator set, signed range."""
    rng = np.random.default_rng([seed, index, 2])
    picks = rng.integers(0, len(ds.train_ids), size=batch)
    return torch.stack([temporal_crop(ds.clips[ds.train_ids[int(p)]], frames, rng) for p in picks]) * 2 - 1


class ImagePool:
    """Detail-rich still images; crops stand in for randomly sampled real photographs."""

    def __init__(self, n_images: int, size: tuple[int, int], crop: tuple[int, int], seed: int):
        if crop[0] > size[0] or crop[1] > size[1]:
            raise ConfigError(f"crop {crop} larger than pool image size {size}")
        self.crop = crop
        self.images = torch.stack([detail_image([seed, 11, i], size) for i in range(n_images)])

    def _crop(self, rng) -> torch.Tensor:
        img = self.images[int(rng.integers(len(self.images)))]
        h, w = self.crop
        y = int(rng.integers(0, img.shape[1] - h + 1))
        x = int(rng.integers(0, img.shape[2] - w + 1))
        return img[:, y : y + h, x : x + w]

    def sample(self, seed: int, index: int, batch: int, frames: int) -> tuple[torch.Tensor, torch.Tensor]:
        """(single frames B x 3 x H x W, unrelated crop sequences B x T x 3 x H x W), signed range."""
        rng = np.random.default_rng([seed, index, 3])
        singles = torch.stack([self._crop(rng) for _ in range(batch)])
        seqs = torch.stack([torch.stack([self._crop(rng) for _ in range(frames)]) for _ in range(batch)])
        return singles * 2 - 1, seqs * 2 - 1
