"""Clip value types, procedural clip synthesis, degradation and label-set transforms."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DimensionError, FormatError

VALUE_RANGES = ("unit", "signed")
MOTIONS = ("static", "translate", "rotate_texture")
TEXTURES = ("checker", "perlin_like", "sinusoid_mix", "random_blobs")

FLOW_MAGIC = b"AVSRFLW1"
FLOW_HEADER = struct.Struct("<8sIII")


@dataclass
class VideoClip:
    frames: torch.Tensor  # T x C x H x W
    value_range: str = "unit"
    clip_id: str = ""

    def __post_init__(self):
        if self.value_range not in VALUE_RANGES:
            raise ConfigError(f"unknown value_range {self.value_range!r}")
        if self.frames.ndim != 4:
            raise DimensionError(f"clip frames must be T x C x H x W, got {tuple(self.frames.shape)}")
        if self.frames.shape[0] < 1 or self.frames.shape[1] != 3:
            raise DimensionError(f"clip needs T >= 1 and C = 3, got {tuple(self.frames.shape)}")

    @property
    def shape(self):
        return tuple(self.frames.shape)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def to_signed(self) -> "VideoClip":
        if self.value_range == "signed":
            return self
        return VideoClip(self.frames * 2 - 1, "signed", self.clip_id)

    def to_unit(self) -> "VideoClip":
        if self.value_range == "unit":
            return self
        return VideoClip((self.frames + 1) / 2, "unit", self.clip_id)

    def check_range(self, atol: float = 1e-6) -> None:
        lo, hi = (0.0, 1.0) if self.value_range == "unit" else (-1.0, 1.0)
        if self.frames.min() < lo - atol or self.frames.max() > hi + atol:
            raise DimensionError(f"clip {self.clip_id!r} values leave the {self.value_range} range")


@dataclass
class FlowField:
    """Per-pixel displacement from frame t+1 back to frame t, in pixels (dx, dy)."""

    displacements: torch.Tensor  # (T-1) x 2 x H x W
    validity_mask: torch.Tensor  # (T-1) x H x W, bool

    @classmethod
    def from_displacements(cls, disp: torch.Tensor) -> "FlowField":
        return cls(disp, source_inside_mask(disp))


@dataclass
class DegradationConfig:
    blur_sigma_range: tuple[float, float] = (0.2, 1.5)
    scale_factor: int = 4
    noise_sigma_range: tuple[float, float] = (0.0, 0.03)
    # (0, 0) disables quantization
    quantization_levels_range: tuple[int, int] = (64, 256)
    order_seed_policy: str = "per_clip"

    def validate(self) -> None:
        if self.scale_factor < 1:
            raise ConfigError("scale_factor must be >= 1")
        for name in ("blur_sigma_range", "noise_sigma_range", "quantization_levels_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} is empty: {lo} > {hi}")
        if self.blur_sigma_range[0] < 0 or self.noise_sigma_range[0] < 0:
            raise ConfigError("sigma ranges must be non-negative")
        lo, hi = self.quantization_levels_range
        if not (lo == hi == 0) and lo < 2:
            raise ConfigError("quantization needs at least 2 levels")
        if self.order_seed_policy not in ("fixed", "per_clip"):
            raise ConfigError(f"unknown order_seed_policy {self.order_seed_policy!r}")


@dataclass
class ProceduralSpec:
    motion: str = "translate"
    velocity: tuple[float, float] = (1.0, 0.0)  # (dx, dy) px/frame
    texture: str = "perlin_like"
    frames: int = 5
    size: tuple[int, int] = (64, 64)
    rotation_deg: float = 2.0  # per frame, rotate_texture only

    def validate(self) -> None:
        h, w = self.size
        if self.motion not in MOTIONS:
            raise ConfigError(f"unknown motion {self.motion!r}")
        if self.texture not in TEXTURES:
            raise ConfigError(f"unknown texture {self.texture!r}")
        if self.frames < 1:
            raise ConfigError("frames must be >= 1")
        if h < 8 or w < 8:
            raise ConfigError(f"clip size must be at least 8x8, got {h}x{w}")
        if self.motion != "static" and self.frames < 2:
            raise ConfigError(f"motion {self.motion!r} needs at least 2 frames for a flow field")
        if math.hypot(*self.velocity) > h / 4:
            raise ConfigError(f"|velocity| exceeds H/4 = {h / 4}")


# ---------------------------------------------------------------------------
# textures: continuous functions of (x, y), so any motion can be rendered exactly


def _hash01(ix: np.ndarray, iy: np.ndarray, salt: int) -> np.ndarray:
    """Stateless lattice hash to [0, 1)."""
    with np.errstate(over="ignore"):
        h = ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
        h ^= iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
        h ^= np.uint64(salt & 0xFFFFFFFFFFFFFFFF)
        h ^= h >> np.uint64(31)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(29)
        h *= np.uint64(0x94D049BB133111EB)
        h ^= h >> np.uint64(32)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _value_noise(x, y, cell: float, salt: int) -> np.ndarray:
    gx, gy = x / cell, y / cell
    x0, y0 = np.floor(gx), np.floor(gy)
    fx, fy = gx - x0, gy - y0
    sx = fx * fx * (3 - 2 * fx)
    sy = fy * fy * (3 - 2 * fy)
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    v00 = _hash01(x0, y0, salt)
    v10 = _hash01(x0 + 1, y0, salt)
    v01 = _hash01(x0, y0 + 1, salt)
    v11 = _hash01(x0 + 1, y0 + 1, salt)
    top = v00 + (v10 - v00) * sx
    bot = v01 + (v11 - v01) * sx
    return top + (bot - top) * sy


class Texture:
    """Seeded RGB texture evaluable at arbitrary real coordinates, values in [0.1, 0.9]."""

    def __init__(self, kind: str, rng: np.random.Generator, extent: float = 64.0, detail: bool = False):
        if kind not in TEXTURES:
            raise ConfigError(f"unknown texture {kind!r}")
        self.kind = kind
        self.detail = detail
        self.colors = rng.uniform(0.0, 1.0, size=(2, 3))
        self.salt = int(rng.integers(0, 2**62))
        if kind == "checker":
            self.cell = float(rng.integers(2, 5) if detail else rng.integers(4, 11))
        elif kind == "perlin_like":
            base = rng.uniform(1.5, 3.0) if detail else rng.uniform(4.0, 9.0)
            self.octaves = [(base * 2.0**-k, 0.5**k) for k in range(3)]
        elif kind == "sinusoid_mix":
            n = 6
            lo, hi = (0.8, 2.0) if detail else (0.15, 0.6)
            self.freq = rng.uniform(lo, hi, size=n)
            self.theta = rng.uniform(0, np.pi, size=n)
            self.phase = rng.uniform(0, 2 * np.pi, size=(n, 3))
        else:
            n = int(rng.integers(30, 60) if detail else rng.integers(12, 24))
            margin = extent
            self.centers = rng.uniform(-margin, extent + margin, size=(n * 3, 2))
            self.radii = rng.uniform(0.8, 2.0, size=n * 3) if detail else rng.uniform(3.0, 8.0, size=n * 3)
            self.amps = rng.uniform(-1.0, 1.0, size=(n * 3, 3))

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Evaluate on coordinate grids of shape H x W; returns 3 x H x W."""
        if self.kind == "checker":
            parity = (np.floor(x / self.cell) + np.floor(y / self.cell)) % 2
            a = parity[None]
            out = self.colors[0][:, None, None] * (1 - a) + self.colors[1][:, None, None] * a
        elif self.kind == "perlin_like":
            chans = []
            for c in range(3):
                acc = np.zeros_like(x)
                norm = 0.0
                for k, (cell, amp) in enumerate(self.octaves):
                    acc += amp * _value_noise(x, y, cell, self.salt + 7919 * c + 104729 * k)
                    norm += amp
                chans.append(acc / norm)
            out = np.stack(chans)
        elif self.kind == "sinusoid_mix":
            chans = []
            for c in range(3):
                acc = np.zeros_like(x)
                for f, th, ph in zip(self.freq, self.theta, self.phase[:, c]):
                    acc += np.sin(f * (x * np.cos(th) + y * np.sin(th)) + ph)
                chans.append(0.5 + 0.5 * acc / len(self.freq))
            out = np.stack(chans)
        else:
            acc = np.zeros((3,) + x.shape)
            for (cx, cy), r, a in zip(self.centers, self.radii, self.amps):
                g = np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * r * r))
                acc += a[:, None, None] * g[None]
            out = 0.5 + 0.5 * np.tanh(acc)
        return 0.1 + 0.8 * np.clip(out, 0.0, 1.0)


def _grid(h: int, w: int):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return xs, ys


def synth_clip(spec: ProceduralSpec, seed: int | Sequence[int]) -> tuple[VideoClip, FlowField]:
    """Render an HR clip in unit range together with its exact ground-truth flow."""
    spec.validate()
    rng = np.random.default_rng(seed)
    h, w = spec.size
    t_len = spec.frames
    tex = Texture(spec.texture, rng, extent=float(max(h, w)))
    xs, ys = _grid(h, w)
    vx, vy = spec.velocity
    cx, cy = (w - 1) / 2, (h - 1) / 2
    theta = math.radians(spec.rotation_deg)

    frames = []
    for t in range(t_len):
        if spec.motion == "static":
            u, v = xs, ys
        elif spec.motion == "translate":
            u, v = xs - vx * t, ys - vy * t
        else:
            c, s = math.cos(-theta * t), math.sin(-theta * t)
            u = c * (xs - cx) - s * (ys - cy) + cx
            v = s * (xs - cx) + c * (ys - cy) + cy
        frames.append(tex(u, v))
    arr = np.stack(frames).astype(np.float32)

    disp = np.zeros((max(t_len - 1, 0), 2, h, w), dtype=np.float64)
    if spec.motion == "translate":
        disp[:, 0] = vx
        disp[:, 1] = vy
    elif spec.motion == "rotate_texture":
        c, s = math.cos(theta), math.sin(theta)
        qx = c * (xs - cx) - s * (ys - cy) + cx
        qy = s * (xs - cx) + c * (ys - cy) + cy
        disp[:, 0] = qx - xs
        disp[:, 1] = qy - ys
    clip_id = f"{spec.motion}-{spec.texture}-{_seed_tag(seed)}"
    flow = FlowField.from_displacements(torch.from_numpy(disp.astype(np.float32)))
    return VideoClip(torch.from_numpy(arr), "unit", clip_id), flow


def _seed_tag(seed) -> str:
    if isinstance(seed, (list, tuple)):
        return "_".join(str(s) for s in seed)
    return str(seed)


def detail_image(seed: int | Sequence[int], size: tuple[int, int]) -> torch.Tensor:
    """A single detail-rich frame (3 x H x W, unit range) from the high-frequency texture family."""
    rng = np.random.default_rng(seed)
    h, w = size
    xs, ys = _grid(h, w)
    kinds = rng.choice(TEXTURES, size=2, replace=False)
    a = Texture(str(kinds[0]), rng, extent=float(max(h, w)), detail=True)(xs, ys)
    b = Texture(str(kinds[1]), rng, extent=float(max(h, w)), detail=True)(xs, ys)
    mix = rng.uniform(0.3, 0.7)
    return torch.from_numpy((mix * a + (1 - mix) * b).astype(np.float32))


# ---------------------------------------------------------------------------
# warping


def source_inside_mask(disp: torch.Tensor) -> torch.Tensor:
    h, w = disp.shape[-2:]
    ys, xs = torch.meshgrid(torch.arange(h, dtype=disp.dtype), torch.arange(w, dtype=disp.dtype), indexing="ij")
    sx = xs + disp[:, 0]
    sy = ys + disp[:, 1]
    return (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)


def warp(frames: torch.Tensor, disp: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Bilinearly sample ``frames`` (N x C x H x W) at p + disp(p).

    Returns the warped frames and the mask of pixels whose source lies inside the frame.
    Out-of-frame samples are zero and should be excluded via the mask.
    """
    n, c, h, w = frames.shape
    if disp.shape != (n, 2, h, w):
        raise DimensionError(f"flow shape {tuple(disp.shape)} does not match frames {tuple(frames.shape)}")
    ys, xs = torch.meshgrid(torch.arange(h, dtype=disp.dtype), torch.arange(w, dtype=disp.dtype), indexing="ij")
    sx = xs + disp[:, 0]
    sy = ys + disp[:, 1]
    mask = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    x0 = torch.floor(sx)
    y0 = torch.floor(sy)
    wx = (sx - x0).to(frames.dtype)
    wy = (sy - y0).to(frames.dtype)
    x0 = x0.long()
    y0 = y0.long()
    flat = frames.reshape(n, c, h * w)

    def tap(yi, xi):
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).reshape(n, 1, h * w).expand(n, c, h * w)
        vals = torch.gather(flat, 2, idx).reshape(n, c, h, w)
        return vals * inside.unsqueeze(1).to(frames.dtype)

    out = (
        tap(y0, x0) * ((1 - wx) * (1 - wy)).unsqueeze(1)
        + tap(y0, x0 + 1) * (wx * (1 - wy)).unsqueeze(1)
        + tap(y0 + 1, x0) * ((1 - wx) * wy).unsqueeze(1)
        + tap(y0 + 1, x0 + 1) * (wx * wy).unsqueeze(1)
    )
    return out, mask


# ---------------------------------------------------------------------------
# degradation


@dataclass
class DegradationParams:
    blur_sigma: float
    noise_sigma: float
    levels: int


def draw_degradation(cfg: DegradationConfig, rng: np.random.Generator) -> DegradationParams:
    lo, hi = cfg.quantization_levels_range
    return DegradationParams(
        blur_sigma=float(rng.uniform(*cfg.blur_sigma_range)),
        noise_sigma=float(rng.uniform(*cfg.noise_sigma_range)),
        levels=int(rng.integers(lo, hi + 1)) if hi > 0 else 0,
    )


def blur_frames(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Spatial Gaussian blur of a T x C x H x W array, reflect boundary."""
    if sigma <= 0:
        return arr.copy()
    return gaussian_filter(arr, sigma=(0, 0, sigma, sigma), mode="reflect", truncate=3.0)


def area_downsample(arr: np.ndarray, s: int) -> np.ndarray:
    t, c, h, w = arr.shape
    if h % s or w % s:
        raise DimensionError(f"{h}x{w} is not divisible by scale factor {s}")
    return arr.reshape(t, c, h // s, s, w // s, s).mean(axis=(3, 5))


def clean_lr(hr: VideoClip, sigma: float, s: int) -> np.ndarray:
    """Blur + downsample half of the pipeline, without noise or quantization."""
    return area_downsample(blur_frames(hr.to_unit().frames.double().numpy(), sigma), s)


def degrade(hr: VideoClip, cfg: DegradationConfig, seed, params: DegradationParams | None = None) -> VideoClip:
    """blur -> area downsample -> Gaussian noise -> uniform quantization, one parameter draw per clip."""
    cfg.validate()
    s = cfg.scale_factor
    _, _, h, w = hr.shape
    if h % s or w % s:
        raise DimensionError(f"HR size {h}x{w} not divisible by scale factor {s}")
    rng = np.random.default_rng(seed)
    if params is None:
        params = draw_degradation(cfg, rng)
    lr = clean_lr(hr, params.blur_sigma, s)
    if params.noise_sigma > 0:
        lr = lr + rng.normal(0.0, params.noise_sigma, size=lr.shape)
    lr = np.clip(lr, 0.0, 1.0)
    if params.levels:
        q = params.levels - 1
        lr = np.round(lr * q) / q
    return VideoClip(torch.from_numpy(lr.astype(np.float32)), "unit", hr.clip_id)


# ---------------------------------------------------------------------------
# label-set transforms


def shuffle_permutation(t_len: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform permutation of range(t_len); the identity is rejected when t_len >= 3."""
    ident = np.arange(t_len)
    while True:
        perm = rng.permutation(t_len)
        if t_len < 3 or not np.array_equal(perm, ident):
            return perm


def shuffle_frames(clip: VideoClip, seed) -> VideoClip:
    perm = shuffle_permutation(clip.num_frames, np.random.default_rng(seed))
    return VideoClip(clip.frames[torch.from_numpy(perm)], clip.value_range, clip.clip_id + ":shuffled")


def shuffle_batch(frames: torch.Tensor, seed) -> torch.Tensor:
    """Independently permute the frames of every clip in a B x T x ... batch."""
    children = np.random.SeedSequence(seed if not isinstance(seed, (list, tuple)) else list(seed)).spawn(frames.shape[0])
    out = []
    for clip, child in zip(frames, children):
        perm = shuffle_permutation(clip.shape[0], np.random.default_rng(child))
        out.append(clip[torch.from_numpy(perm)])
    return torch.stack(out)


def repeat_image(frame: torch.Tensor, t_len: int, value_range: str = "unit", clip_id: str = "") -> VideoClip:
    if t_len < 1:
        raise ConfigError(f"cannot build a clip of {t_len} frames")
    if frame.ndim != 3:
        raise DimensionError(f"expected a C x H x W frame, got {tuple(frame.shape)}")
    return VideoClip(frame.unsqueeze(0).repeat(t_len, 1, 1, 1), value_range, clip_id)


def assemble_images(frames: Sequence[torch.Tensor], value_range: str = "unit", clip_id: str = "") -> VideoClip:
    if not frames:
        raise DimensionError("assemble_images needs at least one frame")
    shape = frames[0].shape
    for i, f in enumerate(frames):
        if f.shape != shape:
            raise DimensionError(f"frame {i} has shape {tuple(f.shape)}, expected {tuple(shape)}")
    return VideoClip(torch.stack(list(frames)), value_range, clip_id)


# ---------------------------------------------------------------------------
# storage


def save_clip(clip: VideoClip, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    unit = clip.to_unit().frames.clamp(0, 1)
    codes = torch.round(unit * 255).to(torch.uint8).permute(0, 2, 3, 1).numpy()
    for t, img in enumerate(codes):
        Image.fromarray(img, mode="RGB").save(directory / f"frame_{t:04d}.png")
    manifest = {
        "clip_id": clip.clip_id,
        "frames": clip.num_frames,
        "height": clip.shape[2],
        "width": clip.shape[3],
        "value_range": clip.value_range,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return directory


def load_clip(directory: str | Path) -> VideoClip:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.is_file():
        raise FormatError(f"{directory}: missing manifest.json")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
        t_len, h, w = int(manifest["frames"]), int(manifest["height"]), int(manifest["width"])
        value_range = manifest["value_range"]
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"{mpath}: malformed manifest ({exc})") from exc
    files = sorted(directory.glob("frame_*.png"))
    if len(files) != t_len:
        raise FormatError(f"{directory}: manifest declares {t_len} frames but found {len(files)}")
    frames = []
    for t in range(t_len):
        path = directory / f"frame_{t:04d}.png"
        if not path.is_file():
            raise FormatError(f"{directory}: missing {path.name}")
        arr = np.asarray(Image.open(path).convert("RGB"))
        if arr.shape != (h, w, 3):
            raise FormatError(f"{path}: size {arr.shape[:2]} does not match manifest {h}x{w}")
        frames.append(arr)
    unit = torch.from_numpy(np.stack(frames).astype(np.float32) / 255.0).permute(0, 3, 1, 2).contiguous()
    clip = VideoClip(unit, "unit", manifest.get("clip_id", directory.name))
    return clip.to_signed() if value_range == "signed" else clip


def save_flow(flow: FlowField, path: str | Path) -> None:
    disp = flow.displacements.detach().to(torch.float32).contiguous().numpy()
    n, _, h, w = disp.shape
    with open(path, "wb") as fh:
        fh.write(FLOW_HEADER.pack(FLOW_MAGIC, n, h, w))
        fh.write(disp.astype("<f4").tobytes(order="C"))


def load_flow(path: str | Path) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < FLOW_HEADER.size:
        raise FormatError(f"{path}: truncated flow header")
    magic, n, h, w = FLOW_HEADER.unpack_from(raw)
    if magic != FLOW_MAGIC:
        raise FormatError(f"{path}: bad flow magic {magic!r}")
    expected = FLOW_HEADER.size + 4 * n * 2 * h * w
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    disp = np.frombuffer(raw, dtype="<f4", offset=FLOW_HEADER.size).reshape(n, 2, h, w)
    return FlowField.from_displacements(torch.from_numpy(disp.astype(np.float32)))
