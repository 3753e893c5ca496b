import math
from collections import Counter

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from oracles import central_fd, probe_indices, rel_err, softplus_ref
from vsrdistill.discriminators import DiscriminatorConfig, build_discriminator
from vsrdistill.errors import DimensionError, UsageError
from vsrdistill.losses import (
    CurationConfig,
    LabeledSample,
    LossWeights,
    StructureTextureDistance,
    build_label_set,
    disc_loss,
    dists,
    gen_loss,
    l1,
    softplus,
)
from vsrdistill.student import StudentConfig, build_student
from vsrdistill.teacher import build_encoder, gaussian_blur, reencode_features
from vsrdistill.video import ProceduralSpec, synth_clip

LN2 = math.log(2.0)


def test_l1_examples():
    x = torch.rand(2, 3, 4, 4)
    assert l1(x, x).item() == 0
    assert l1(torch.ones(5), torch.zeros(5)).item() == 1
    with pytest.raises(DimensionError):
        l1(torch.ones(5), torch.ones(4))


@given(seed=st.integers(0, 10_000))
def test_l1_matches_direct_sum(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 7)), rng.normal(size=(3, 7))
    ref = sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert abs(l1(torch.from_numpy(a), torch.from_numpy(b)).item() - ref) <= 1e-9


def test_softplus_examples():
    assert abs(softplus(0.0).item() - LN2) <= 1e-12
    assert softplus(100.0).item() == pytest.approx(100.0)
    tiny = softplus(-100.0).item()
    assert tiny >= 0 and tiny == pytest.approx(3.720075976020836e-44, rel=1e-6)
    assert torch.isfinite(softplus(torch.tensor([1e4, -1e4]))).all()


@given(x=st.floats(-50, 50))
def test_softplus_reference(x):
    assert softplus(x).item() == pytest.approx(softplus_ref(x), rel=1e-12, abs=1e-300)
    # x + softplus(-x) identity
    assert softplus(x).item() == pytest.approx(x + softplus(-x).item(), rel=1e-12, abs=1e-12)


# ---------------------------------------------------------------------------
# structure/texture distance


def checker_clip(t=2, size=32):
    clip, _ = synth_clip(ProceduralSpec(motion="static", texture="checker", frames=t, size=(size, size)), seed=1)
    return clip.to_signed().frames.double()


def test_dists_identity_and_symmetry():
    m = StructureTextureDistance()
    a = checker_clip()
    b = a + 0.1 * torch.randn_like(a)
    assert abs(dists(a, a, m).item()) <= 1e-7
    assert abs(dists(a, b, m).item() - dists(b, a, m).item()) <= 1e-7


def test_dists_negation_is_far():
    m = StructureTextureDistance()
    a = checker_clip()
    a = a - a.mean(dim=(-2, -1), keepdim=True)
    near = dists(a, a + 1e-3 * torch.randn_like(a), m).item()
    far = dists(a, -a, m).item()
    assert far > near
    assert far > 0.5


def test_dists_monotone_under_blur():
    m = StructureTextureDistance()
    a = checker_clip()
    vals = [dists(a, gaussian_blur(a, s) if s else a, m).item() for s in (0, 0.5, 1, 2)]
    assert all(x <= y + 1e-12 for x, y in zip(vals, vals[1:]))


def test_dists_shape_mismatch():
    with pytest.raises(DimensionError):
        dists(torch.zeros(2, 3, 8, 8), torch.zeros(2, 3, 8, 16))


# ---------------------------------------------------------------------------
# generator loss


def test_gen_loss_identity_case():
    x = torch.rand(1, 3, 3, 16, 16, dtype=torch.float64) * 2 - 1
    f = torch.randn(1, 3, 8, 8, 8, dtype=torch.float64)
    zero = torch.zeros(1, dtype=torch.float64)
    total, terms = gen_loss(x, x, f, f, zero, zero)
    assert abs(total.item() - 1.1 * LN2) <= 1e-9
    assert terms["pixel_adv"].item() == pytest.approx(LN2)


def test_gen_loss_without_adv_is_distillation():
    x, y = torch.rand(2, 3, 3, 16, 16, dtype=torch.float64).unbind(0)
    f, g = torch.randn(2, 3, 8, 4, 4, dtype=torch.float64).unbind(0)
    logit = torch.tensor([2.5], dtype=torch.float64)
    total, terms = gen_loss(x, y, f, g, logit, logit, LossWeights(0.1, 1.0, 0.0))
    expected = 0.1 * (l1(x, y) + dists(x, y)) + l1(f, g)
    assert abs(total.item() - expected.item()) <= 1e-12


def test_gen_loss_term_bookkeeping():
    x, y = torch.rand(2, 1, 3, 3, 16, 16, dtype=torch.float64).unbind(0)
    f, g = torch.randn(2, 1, 3, 8, 4, 4, dtype=torch.float64).unbind(0)
    w = LossWeights(0.3, 0.7, 0.5)
    total, t = gen_loss(x, y, f, g, torch.tensor([0.4], dtype=torch.float64), [torch.tensor([-1.0], dtype=torch.float64)], w)
    pixel = t["pixel_l1"] + t["pixel_dists"] + w.lambda_adv * t["pixel_adv"]
    feature = t["feature_l1"] + w.lambda_adv * t["feature_adv"]
    assert abs((w.lambda_pixel * pixel + w.lambda_feature * feature - total).item()) <= 1e-9
    assert all(v.item() >= 0 for v in t.values())


def test_gen_loss_grad_matches_fd():
    torch.manual_seed(0)
    x_s = (torch.rand(1, 3, 3, 8, 8, dtype=torch.float64) * 2 - 1).requires_grad_(True)
    x_t = torch.rand(1, 3, 3, 8, 8, dtype=torch.float64) * 2 - 1
    f_s = torch.randn(1, 3, 4, 4, 4, dtype=torch.float64, requires_grad=True)
    f_t = torch.randn(1, 3, 4, 4, 4, dtype=torch.float64)
    m = StructureTextureDistance()

    def loss():
        return gen_loss(x_s, x_t, f_s, f_t, x_s.mean().view(1), f_s.mean().view(1), metric=m)[0]

    gx, gf = torch.autograd.grad(loss(), (x_s, f_s))
    errs = []
    for idx in probe_indices(x_s.shape, 40, 0):
        errs.append(rel_err(gx[idx].item(), central_fd(loss, x_s.data, idx)))
    for idx in probe_indices(f_s.shape, 40, 1):
        errs.append(rel_err(gf[idx].item(), central_fd(loss, f_s.data, idx)))
    assert np.mean(np.array(errs) <= 1e-3) >= 0.99


# ---------------------------------------------------------------------------
# discriminator loss


class ConstD(torch.nn.Module):
    """Stand-in discriminator returning fixed logits."""

    def __init__(self, domain, detail=0.0, consistency=0.0):
        super().__init__()
        self.domain = domain
        self.detail = torch.nn.Parameter(torch.tensor(float(detail), dtype=torch.float64))
        self.consistency = torch.nn.Parameter(torch.tensor(float(consistency), dtype=torch.float64))

    def forward(self, x):
        from vsrdistill.discriminators import HeadOutputs

        b = x.shape[0]
        d = self.detail.expand(b)
        c = self.consistency.expand(b)
        return HeadOutputs(None, None, d, c)


def test_disc_loss_empty():
    assert disc_loss([], None, None).item() == 0


def test_disc_loss_single_fake():
    s = LabeledSample(torch.zeros(1, 3, 3, 8, 8), "pixel", -1, -1, "student")
    assert abs(disc_loss([s], ConstD("pixel"), None).item() - 2 * LN2) <= 1e-12
    assert abs(disc_loss([s], ConstD("pixel"), None, reduction="sum").item() - 2 * LN2) <= 1e-12


def test_disc_loss_invalid_label():
    with pytest.raises(UsageError):
        LabeledSample(torch.zeros(1), "pixel", 2, 0, "student")
    s = LabeledSample(torch.zeros(1, 3, 3, 8, 8), "pixel", 0, 0, "video")
    s.y_d = 5
    with pytest.raises(UsageError):
        disc_loss([s], ConstD("pixel"), None)


def test_unlabeled_detail_gets_zero_gradient():
    d = ConstD("pixel", detail=1.7, consistency=-0.3)
    s = LabeledSample(torch.zeros(1, 3, 3, 8, 8), "pixel", 0, 1, "video")
    loss = disc_loss([s], d, None)
    g_d, g_c = torch.autograd.grad(loss, (d.detail, d.consistency))
    assert g_d.item() == 0.0
    assert g_c.item() != 0.0
    assert loss.item() == pytest.approx(LN2 + softplus_ref(0.3))


@given(y_d=st.sampled_from([-1, 1]), y_c=st.sampled_from([-1, 1]), x=st.floats(-3, 3))
def test_disc_loss_decreases_toward_label(y_d, y_c, x):
    s = LabeledSample(torch.zeros(1, 2, 3, 8, 8), "pixel", y_d, y_c, "student")
    lo = disc_loss([s], ConstD("pixel", x + 0.1 * y_d, x + 0.1 * y_c), None).item()
    hi = disc_loss([s], ConstD("pixel", x, x), None).item()
    assert lo < hi


def test_disc_loss_sum_vs_mean():
    samples = [LabeledSample(torch.zeros(1, 2, 3, 8, 8), "pixel", y, -y, "student") for y in (-1, 1, 1)]
    d = ConstD("pixel", 0.5, -0.2)
    assert disc_loss(samples, d, None, "sum").item() == pytest.approx(3 * disc_loss(samples, d, None).item())


# ---------------------------------------------------------------------------
# label set


@pytest.fixture(scope="module")
def label_inputs():
    net = build_student(StudentConfig(), 0)
    enc = build_encoder(net, 1)
    b, t = 2, 3
    g = torch.Generator().manual_seed(0)
    x_s = torch.rand(b, t, 3, 16, 16, generator=g) * 2 - 1
    with torch.no_grad():
        f_s = net(torch.rand(b, t, 3, 4, 4, generator=g) * 2 - 1).f_student
    vids = torch.rand(b, t, 3, 16, 16, generator=g) * 2 - 1
    img = torch.rand(b, 3, 16, 16, generator=g) * 2 - 1
    seq = torch.rand(b, t, 3, 16, 16, generator=g) * 2 - 1
    return dict(
        x_student=x_s,
        f_student=f_s,
        video_clip=vids,
        image_frame=img,
        image_frames_t=seq,
        seed=4,
        reencode=lambda p: reencode_features(p, enc, net),
    )


def test_label_set_multiset(label_inputs):
    samples = build_label_set(**label_inputs)
    assert len(samples) == 10
    labels = Counter((s.y_d, s.y_c) for s in samples)
    assert labels == Counter({(-1, -1): 2, (0, 1): 2, (0, -1): 2, (1, 1): 2, (1, -1): 2})
    domains = Counter((s.source_tag, s.domain) for s in samples)
    assert all(v == 1 for v in domains.values()) and len(domains) == 10


def test_label_set_payloads(label_inputs):
    samples = {(s.source_tag, s.domain): s for s in build_label_set(**label_inputs)}
    static = samples[("image_static", "pixel")].payload
    assert torch.equal(static, label_inputs["image_frame"].unsqueeze(1).expand_as(static))
    shuffled = samples[("video_shuffled", "pixel")].payload
    assert not torch.equal(shuffled, label_inputs["video_clip"])
    assert samples[("student", "feature")].payload is label_inputs["f_student"]
    feat = samples[("video", "feature")].payload
    assert feat.shape == label_inputs["f_student"].shape


def test_label_set_static_shuffle_invariant(label_inputs):
    from vsrdistill.video import shuffle_batch

    static = {(s.source_tag, s.domain): s for s in build_label_set(**label_inputs)}[("image_static", "pixel")].payload
    assert torch.equal(shuffle_batch(static, 9), static)


def test_label_set_missing_payload(label_inputs):
    args = dict(label_inputs)
    args["video_clip"] = None
    with pytest.raises(UsageError):
        build_label_set(**args)
    args = dict(label_inputs)
    args["reencode"] = None
    with pytest.raises(UsageError):
        build_label_set(**args)


def test_label_set_curation_ablations(label_inputs):
    cur = CurationConfig(include_shuffled_video=False, include_assembled_images=False)
    samples = build_label_set(**label_inputs, curation=cur)
    assert len(samples) == 6
    assert {s.source_tag for s in samples} == {"student", "video", "image_static"}
    cur = CurationConfig(video_detail_label=1)
    labels = {(s.source_tag, s.y_d) for s in build_label_set(**label_inputs, curation=cur)}
    assert ("video", 1) in labels and ("video_shuffled", 1) in labels


def test_disc_loss_routes_domains(label_inputs):
    net = build_student(StudentConfig(), 0)
    dp = build_discriminator(DiscriminatorConfig("pixel"), 0)
    df = build_discriminator(DiscriminatorConfig("feature"), 0, net)
    samples = build_label_set(**label_inputs)
    full = disc_loss(samples, dp, df)
    assert torch.isfinite(full)
    pixel_only = disc_loss(samples, dp, None)
    assert torch.isfinite(pixel_only) and pixel_only.item() != full.item()
    with pytest.raises(UsageError):
        disc_loss(samples, df, dp)
