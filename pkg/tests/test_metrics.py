import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from oracles import ssim_binary_inverse
from vsrdistill.errors import DimensionError, UsageError
from vsrdistill.metrics import (
    PSNR_CAP,
    MetricReport,
    evaluate,
    psnr,
    save_profile,
    ssim,
    temporal_profile,
    warping_error,
)
from vsrdistill.video import (
    DegradationConfig,
    FlowField,
    ProceduralSpec,
    VideoClip,
    shuffle_frames,
    synth_clip,
)

CLEAN = DegradationConfig(blur_sigma_range=(0.0, 0.0), noise_sigma_range=(0.0, 0.0), quantization_levels_range=(0, 0))


def noise_clip(t=3, size=32, seed=0):
    return VideoClip(torch.rand(t, 3, size, size, generator=torch.Generator().manual_seed(seed)))


def binary_checker(size=32, cell=2):
    y, x = np.mgrid[:size, :size]
    img = (((x // cell) + (y // cell)) % 2).astype(np.float32)
    return torch.from_numpy(np.broadcast_to(img, (1, 3, size, size)).copy())


# psnr


def test_psnr_identical_is_capped():
    x = noise_clip()
    assert psnr(x, x) == PSNR_CAP


def test_psnr_constant_offset():
    # MSE = 0.01 -> exactly 20 dB
    a = VideoClip(torch.full((2, 3, 8, 8), 0.3))
    b = VideoClip(torch.full((2, 3, 8, 8), 0.4))
    assert abs(psnr(a, b) - 20.0) < 1e-6


def test_psnr_matches_direct_formula():
    a, b = noise_clip(seed=1), noise_clip(seed=2)
    x, y = a.frames.double().numpy(), b.frames.double().numpy()
    ref = np.mean([10 * math.log10(1 / np.mean((x[t] - y[t]) ** 2)) for t in range(3)])
    assert abs(psnr(a, b) - ref) < 1e-9


def test_psnr_shape_mismatch():
    with pytest.raises(DimensionError):
        psnr(noise_clip(size=16), noise_clip(size=32))


# ssim


def test_ssim_identity():
    x = noise_clip()
    assert abs(ssim(x, x) - 1.0) < 1e-12


def test_ssim_binary_checker_inverse():
    x = binary_checker()
    val = ssim(VideoClip(x), VideoClip(1 - x))
    assert abs(val - ssim_binary_inverse()) < 1e-9
    assert val < -0.99


def test_ssim_decreases_with_noise():
    clip, _ = synth_clip(ProceduralSpec(motion="static", texture="perlin_like", frames=2, size=(32, 32)), 0)
    gen = torch.Generator().manual_seed(0)
    base = torch.randn(clip.frames.shape, generator=gen)
    vals = [ssim(clip, VideoClip(clip.frames + s * base)) for s in (0.0, 0.02, 0.05, 0.1)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_ssim_window_too_large():
    with pytest.raises(DimensionError):
        ssim(torch.rand(1, 3, 4, 4), torch.rand(1, 3, 4, 4))


@given(seed=st.integers(0, 1000))
def test_fidelity_metrics_invariant_under_joint_permutation(seed):
    a, b = noise_clip(t=4, size=16, seed=seed), noise_clip(t=4, size=16, seed=seed + 1)
    perm = torch.from_numpy(np.random.default_rng(seed).permutation(4))
    pa, pb = VideoClip(a.frames[perm]), VideoClip(b.frames[perm])
    assert abs(psnr(a, b) - psnr(pa, pb)) < 1e-9
    assert abs(ssim(a, b) - ssim(pa, pb)) < 1e-9


# warping error


def test_warping_error_static_zero():
    clip, flow = synth_clip(ProceduralSpec(motion="static", frames=4, size=(32, 32)), 0)
    assert warping_error(clip, flow) == 0.0


@pytest.mark.parametrize("vel", [(1.0, 0.0), (-2.0, 1.0), (0.0, -1.0)])
def test_warping_error_translation_exact(vel):
    clip, flow = synth_clip(ProceduralSpec(velocity=vel, texture="sinusoid_mix", size=(32, 32)), 1)
    assert warping_error(clip, flow) <= 1e-6


def test_warping_error_shuffled_larger():
    clip, flow = synth_clip(ProceduralSpec(velocity=(1.0, 1.0), size=(32, 32)), 2)
    assert warping_error(shuffle_frames(clip, 0), flow) > warping_error(clip, flow)


def test_warping_error_needs_two_frames():
    clip = noise_clip(t=1)
    flow = FlowField(torch.zeros(0, 2, 32, 32), torch.zeros(0, 32, 32, dtype=torch.bool))
    with pytest.raises(UsageError):
        warping_error(clip, flow)


def test_warping_error_flow_length_checked():
    clip, flow = synth_clip(ProceduralSpec(size=(32, 32)), 0)
    with pytest.raises(DimensionError):
        warping_error(VideoClip(clip.frames[:3]), flow)


# temporal profile


def test_profile_static_columns_identical():
    clip, _ = synth_clip(ProceduralSpec(motion="static", frames=5, size=(16, 16)), 0)
    prof = temporal_profile(clip)
    assert prof.shape == (3, 16, 5)
    for t in range(1, 5):
        assert torch.equal(prof[:, :, t], prof[:, :, 0])


def test_profile_translation_is_diagonal():
    clip, _ = synth_clip(ProceduralSpec(velocity=(1.0, 0.0), frames=6, size=(16, 16)), 3)
    prof = temporal_profile(clip, row=4)
    # a 1 px/frame shift to the right: column t is column 0 moved down by t
    for t in range(1, 6):
        assert torch.allclose(prof[:, t:, t], prof[:, :-t, 0], atol=1e-5)


def test_profile_columns_permute_with_frames():
    clip, _ = synth_clip(ProceduralSpec(velocity=(1.0, 0.0), frames=5, size=(16, 16)), 4)
    shuffled = shuffle_frames(clip, 9)
    a, b = temporal_profile(clip), temporal_profile(shuffled)
    cols_a = sorted(tuple(a[:, :, t].flatten().tolist()) for t in range(5))
    cols_b = sorted(tuple(b[:, :, t].flatten().tolist()) for t in range(5))
    assert cols_a == cols_b


def test_profile_row_range():
    with pytest.raises(UsageError):
        temporal_profile(noise_clip(size=16), row=16)


def test_profile_saved_lossless(tmp_path):
    codes = torch.randint(0, 256, (3, 16, 5), generator=torch.Generator().manual_seed(0))
    save_profile(codes / 255.0, tmp_path / "p.png")
    back = np.asarray(Image.open(tmp_path / "p.png"))
    assert np.array_equal(back.transpose(2, 0, 1), codes.numpy().astype(np.uint8))


# evaluate and report


def nearest_upsample(x):
    return x.repeat_interleave(4, dim=-2).repeat_interleave(4, dim=-1)


def test_identity_student_matches_upsample_baseline():
    clips = [synth_clip(ProceduralSpec(velocity=(1.0, 0.0), texture=t, size=(32, 32)), i)[0] for i, t in enumerate(("checker", "perlin_like"))]
    rep = evaluate(nearest_upsample, clips, [None, None], CLEAN)
    refs = []
    for c in clips:
        hr = c.frames.double().numpy()
        t, ch, h, w = hr.shape
        lr = hr.reshape(t, ch, h // 4, 4, w // 4, 4).mean(axis=(3, 5))
        up = np.repeat(np.repeat(lr, 4, axis=2), 4, axis=3)
        refs.append(np.mean([10 * math.log10(1 / np.mean((up[k] - hr[k]) ** 2)) for k in range(t)]))
    assert abs(rep.psnr - float(np.mean(refs))) < 1e-3
    assert rep.e_warp_star is None


def test_evaluate_deterministic(small_dataset):
    clips, flows = small_dataset.val()
    a = evaluate(nearest_upsample, clips, flows, seed=5)
    b = evaluate(nearest_upsample, clips, flows, seed=5)
    assert a.to_json() == b.to_json()
    assert a.e_warp_star is not None


def test_report_round_trip(tmp_path):
    rep = MetricReport(31.5, 0.91, 0.42, [{"clip_id": "c", "psnr": 31.5, "ssim": 0.91, "e_warp_star": None}], {"seed": 1}, "ds", "ck")
    rep.write(tmp_path / "r.json")
    back = MetricReport.from_json((tmp_path / "r.json").read_text())
    assert back == rep
    doc = json.loads(rep.to_json())
    assert set(doc) >= {"dataset", "checkpoint", "metrics", "per_clip"}
    assert set(doc["metrics"]) == {"psnr", "ssim", "e_warp_star"}
