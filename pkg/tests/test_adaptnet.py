import numpy as np
import pytest
import torch
import torch.nn.functional as F
import torchvision

from lensid.adaptnet import (
    ABLATION_STAGES,
    AdaptNetConfig,
    CascadePoolingFusion,
    ConfigError,
    ConvBlock,
    FeatureFusionDecision,
    ScaleAdaptiveBlock,
    ShapeAdaptiveBlock,
    SSFModule,
    architecture_summary,
    bilinear_sample,
    build_adaptnet,
    count_parameters,
    deform_conv2d,
)
from lensid.adaptnet.blocks import LayerNorm2d
from lensid.adaptnet.encoder import IMAGENET_MEAN, IMAGENET_STD, TinyEncoder, VGG16Encoder


def block_gradcheck(module, inputs, seed=0):
    """Gradcheck a random scalar projection of ``module(*inputs)`` w.r.t. inputs and weights.

    Float64, central differences; relative tolerance 1e-3.
    """
    module = module.double()
    names = [n for n, _ in module.named_parameters()]
    params = tuple(p.detach().clone().requires_grad_(True) for _, p in module.named_parameters())
    inputs = tuple(x.detach().double().requires_grad_(True) for x in inputs)
    with torch.no_grad():
        out = module(*inputs)
    out = out[0] if isinstance(out, tuple) else out
    proj = torch.randn(out.shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)

    def f(*args):
        ins, ps = args[: len(inputs)], args[len(inputs):]
        y = torch.func.functional_call(module, dict(zip(names, ps)), ins)
        y = y[0] if isinstance(y, tuple) else y
        return (y * proj).sum()

    return torch.autograd.gradcheck(f, inputs + params, eps=1e-6, atol=1e-5, rtol=1e-3)


# --- FFD -------------------------------------------------------------------


def test_ffd_weights_normalize_and_identical_branches_reproduce_shared():
    rng = np.random.default_rng(0)
    for case in range(100):
        torch.manual_seed(case)
        n = int(rng.integers(2, 4))
        d = int(rng.integers(1, 9))
        hw = int(rng.integers(1, 17))
        ffd = FeatureFusionDecision(d)
        branches = [torch.randn(2, d, hw, hw) for _ in range(n)]
        out, weights, shared = ffd.fuse(branches)
        assert out.shape == (2, d, hw, hw)
        assert weights.shape == (2, n, hw, hw)
        assert torch.all(weights >= 0)
        assert torch.allclose(weights.sum(1), torch.ones(2, hw, hw), atol=1e-6, rtol=0)
        same, w_same, s_same = ffd.fuse([branches[0]] * n)
        s1 = ffd.shared(branches[0])
        assert torch.equal(s_same[:, 0], s1)
        assert torch.allclose(w_same, torch.full_like(w_same, 1 / n), atol=1e-7)
        if n == 2:
            assert torch.equal(same, s1)
        else:
            torch.testing.assert_close(same, s1, rtol=1e-6, atol=1e-6)


def test_ffd_saturated_softmax_selects_first_branch():
    ffd = FeatureFusionDecision(2)
    with torch.no_grad():
        ffd.shared.weight.zero_()
        ffd.shared.bias.zero_()
        ffd.shared.weight[0, 0, 1, 1] = 1.0
        ffd.shared.weight[1, 1, 1, 1] = 1.0
        ffd.attention.weight.zero_()
        ffd.attention.bias.zero_()
        ffd.attention.weight[0, 0] = 1e4
    a = torch.zeros(1, 2, 3, 3)
    b = torch.zeros(1, 2, 3, 3)
    a[0, 0, 1, 1], b[0, 0, 1, 1] = 1.0, -1.0
    a[0, 1], b[0, 1] = 3.0, 7.0
    out, weights, shared = ffd.fuse([a, b])
    assert weights[0, 0, 1, 1] == 1.0 and weights[0, 1, 1, 1] == 0.0
    assert torch.equal(out[0, :, 1, 1], shared[0, 0, :, 1, 1])


def test_ffd_shape_errors():
    ffd = FeatureFusionDecision(3)
    with pytest.raises(ValueError):
        ffd([torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 5, 4)])
    with pytest.raises(ValueError):
        ffd([torch.zeros(1, 3, 4, 4)])


# --- deformable convolution -------------------------------------------------


def test_zero_offset_deformable_equals_conv():
    g = torch.Generator().manual_seed(1)
    for _ in range(50):
        b, c, o = (int(v) for v in torch.randint(1, 5, (3,), generator=g))
        h, w = (int(v) for v in torch.randint(3, 13, (2,), generator=g))
        x = torch.randn(b, c, h, w, generator=g)
        weight = torch.randn(o, c, 3, 3, generator=g)
        bias = torch.randn(o, generator=g)
        got = deform_conv2d(x, torch.zeros(b, 18, h, w), weight, bias)
        ref = F.conv2d(x, weight, bias, padding=1)
        assert (got - ref).abs().max() < 1e-5


def test_deformable_matches_torchvision_on_random_offsets():
    g = torch.Generator().manual_seed(2)
    for _ in range(10):
        x = torch.randn(2, 3, 7, 9, generator=g, dtype=torch.float64)
        offset = 3 * torch.randn(2, 18, 7, 9, generator=g, dtype=torch.float64)
        weight = torch.randn(4, 3, 3, 3, generator=g, dtype=torch.float64)
        bias = torch.randn(4, generator=g, dtype=torch.float64)
        ref = torchvision.ops.deform_conv2d(x, offset, weight, bias, padding=1)
        torch.testing.assert_close(deform_conv2d(x, offset, weight, bias), ref, rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("dy,dx", [(1, 0), (0, 1), (-2, 1), (3, -3)])
def test_integer_offsets_match_shift_oracle_exactly(dy, dx):
    # Integer-valued float64 data keeps every product and sum exact.
    g = torch.Generator().manual_seed(3)
    x = torch.randint(-4, 5, (2, 3, 8, 8), generator=g).double()
    weight = torch.randint(-3, 4, (2, 3, 3, 3), generator=g).double()
    offset = torch.zeros(2, 18, 8, 8, dtype=torch.float64)
    offset[:, 0::2] = dy
    offset[:, 1::2] = dx
    got = deform_conv2d(x, offset, weight)
    # Oracle: convolve the zero-extended plane and read it at p + (dy, dx).
    pad = 4
    shifted = F.conv2d(F.pad(x, (pad,) * 4), weight)  # rows/cols -3 .. 10
    start = pad - 1
    oracle = shifted[:, :, start + dy: start + dy + 8, start + dx: start + dx + 8]
    assert torch.equal(got, oracle)
    if (dy, dx) == (1, 0):
        # on interior rows this is the regular conv of the input shifted up by one
        up = torch.zeros_like(x)
        up[:, :, :-1] = x[:, :, 1:]
        assert torch.equal(got[:, :, 1:-1], F.conv2d(up, weight, padding=1)[:, :, 1:-1])


def test_half_pixel_offset_on_ramp_gives_midpoint():
    ramp = torch.arange(8.0).view(1, 1, 1, 8).expand(1, 1, 6, 8).contiguous()
    py = torch.full((1, 6, 7), 2.0)
    px = torch.arange(7.0).view(1, 1, 7).expand(1, 6, 7) + 0.5
    sampled = bilinear_sample(ramp, py, px)
    expected = (ramp[..., :-1] + ramp[..., 1:]) / 2
    assert torch.equal(sampled, expected)


def test_offsets_outside_border_give_bias_only():
    x = torch.randn(1, 2, 5, 5)
    weight = torch.randn(3, 2, 3, 3)
    bias = torch.tensor([0.5, -1.0, 2.0])
    offset = torch.full((1, 18, 5, 5), 100.0)
    out = deform_conv2d(x, offset, weight, bias)
    assert torch.equal(out, bias.view(1, 3, 1, 1).expand_as(out))


def test_deform_offset_shape_error():
    with pytest.raises(ValueError):
        deform_conv2d(torch.zeros(1, 2, 4, 4), torch.zeros(1, 9, 4, 4), torch.zeros(1, 2, 3, 3))


# --- SHA ---------------------------------------------------------------------


def test_sha_zero_init_degenerates_to_structured_conv():
    torch.manual_seed(0)
    sha = ShapeAdaptiveBlock(4)
    x = torch.randn(2, 4, 6, 6)
    assert torch.equal(sha.offsets(x), torch.zeros(2, 18, 6, 6))
    deformable, regular = sha.branches(x)
    assert (deformable - regular).abs().max() < 1e-5
    out, _, shared = sha.fusion.fuse([regular, regular])
    torch.testing.assert_close(sha(x), out, rtol=1e-5, atol=1e-5)
    torch.testing.assert_close(out, sha.fusion.shared(regular))


def test_sha_integer_offset_shifts_input():
    torch.manual_seed(1)
    sha = ShapeAdaptiveBlock(3).double()
    x = torch.randint(-3, 4, (1, 3, 6, 6)).double()
    with torch.no_grad():
        sha.conv.weight.copy_(torch.randint(-2, 3, sha.conv.weight.shape).double())
        sha.conv.bias.zero_()
    offset = torch.zeros(1, 18, 6, 6, dtype=torch.float64)
    offset[:, 1::2] = 1.0  # dx = +1 on every tap
    deformable, _ = sha.branches(x, offset)
    left = torch.zeros_like(x)
    left[..., :-1] = x[..., 1:]
    # interior columns see no border effects from the shift
    assert torch.equal(deformable[..., 1:-1], sha.conv(left)[..., 1:-1])


def test_sha_offsets_are_bounded():
    torch.manual_seed(2)
    sha = ShapeAdaptiveBlock(4, offset_bound=3.0)
    with torch.no_grad():
        sha.offset.weight.normal_(0, 10.0)
    off = sha.offsets(torch.randn(2, 4, 8, 8) * 10)
    assert off.abs().max() <= 3.0
    assert off.abs().max() == 3.0  # the clamp is reached


# --- scale-adaptive block ----------------------------------------------------


def _identity_kernels(block, channels):
    with torch.no_grad():
        for cb in block.blocks:
            conv = cb[0]
            conv.weight.zero_()
            conv.bias.zero_()
            for c in range(channels):
                conv.weight[c, c, 1, 1] = 1.0


def test_scale_adaptive_identity_kernel_oracle_without_norm():
    sab = ScaleAdaptiveBlock(3, depth=2, norm=False)
    _identity_kernels(sab, 3)
    x = torch.randn(2, 3, 5, 5)
    f1, f2 = sab.cascade(x)
    assert torch.equal(f1, x.relu()) and torch.equal(f2, x.relu())
    assert torch.equal(sab(x), sab.fusion.shared(x.relu()))


def test_scale_adaptive_identity_kernel_oracle_with_layer_norm():
    # Layer norm is not the identity: F1 = relu(LN(x)), F2 = relu(LN(F1)).
    sab = ScaleAdaptiveBlock(3, depth=2)
    _identity_kernels(sab, 3)
    x = torch.randn(2, 3, 5, 5)
    ln = LayerNorm2d(3)
    f1_ref = ln(x).relu()
    f2_ref = ln(f1_ref).relu()
    f1, f2 = sab.cascade(x)
    torch.testing.assert_close(f1, f1_ref)
    torch.testing.assert_close(f2, f2_ref)
    torch.testing.assert_close(sab(x), sab.fusion([f1_ref, f2_ref]))


@pytest.mark.parametrize("depth", [2, 3, 4])
def test_scale_adaptive_shape_and_receptive_field(depth):
    torch.manual_seed(depth)
    sab = ScaleAdaptiveBlock(2, depth=depth, norm=False).double()
    # positive weights and inputs keep every ReLU active, so the footprint is exact
    with torch.no_grad():
        for p in sab.blocks.parameters():
            p.abs_()
    x = torch.rand(1, 2, 21, 21, dtype=torch.float64) + 0.1
    assert sab(x).shape == x.shape
    y = x.clone()
    y[0, 0, 10, 10] += 1.0
    a, b = sab.cascade(x)[-1], sab.cascade(y)[-1]
    changed = ((a - b).abs().sum(1)[0] > 0).numpy()
    expected = np.zeros_like(changed)
    expected[10 - depth: 11 + depth, 10 - depth: 11 + depth] = True
    np.testing.assert_array_equal(changed, expected)


def test_scale_adaptive_depth_error():
    with pytest.raises(ValueError):
        ScaleAdaptiveBlock(4, depth=1)


# --- CPF ---------------------------------------------------------------------


def test_cpf_interleave_index_oracle():
    g = torch.Generator().manual_seed(5)
    branches = [torch.randn(2, 8, 16, 16, generator=g) for _ in range(5)]
    inter = CascadePoolingFusion.interleave(branches)
    assert inter.shape == (2, 40, 16, 16)
    for c in range(8):
        for j in range(5):
            assert torch.equal(inter[:, 5 * c + j], branches[j][:, c])


def test_cpf_pooled_branches_are_cascaded_averages():
    cpf = CascadePoolingFusion(4)
    x = torch.randn(1, 4, 16, 16, dtype=torch.float64)
    ups = cpf.pooled_branches(x)
    p1 = x.reshape(1, 4, 8, 2, 8, 2).mean((3, 5))
    p2 = p1.reshape(1, 4, 4, 2, 4, 2).mean((3, 5))
    p3 = p2.reshape(1, 4, 2, 2, 2, 2).mean((3, 5))
    for up, p in zip(ups, (p1, p2, p3)):
        ref = F.interpolate(p, size=(16, 16), mode="bilinear", align_corners=False)
        torch.testing.assert_close(up, ref)
    torch.testing.assert_close(ups[3], x.mean((2, 3), keepdim=True).expand_as(x))


def test_cpf_constant_input_degeneracy():
    torch.manual_seed(6)
    cpf = CascadePoolingFusion(8)
    x = torch.randn(2, 8, 1, 1).expand(2, 8, 16, 16).contiguous()
    ups = cpf.pooled_branches(x)
    for up in ups:
        assert (up - x).abs().max() < 1e-5
    with torch.no_grad():
        intra = F.relu(cpf.intra(cpf.interleave([x] * 5)))
        shared = F.relu(torch.cat([cpf.shared(x)] * 4, dim=1))
        ref = F.relu(cpf.inter(torch.cat([intra, shared], dim=1)))
        assert (cpf(x) - ref).abs().max() < 1e-5


def test_cpf_channel_arithmetic_at_vgg_width():
    cpf = CascadePoolingFusion(512)
    assert cpf.intra.in_channels == 2560 and cpf.intra.groups == 512
    assert cpf.shared.out_channels == 128
    with torch.no_grad():
        assert cpf(torch.randn(1, 512, 32, 32)).shape == (1, 512, 32, 32)


def test_cpf_tiny_bottleneck_and_channel_error():
    with torch.no_grad():
        assert CascadePoolingFusion(8)(torch.randn(1, 8, 4, 4)).shape == (1, 8, 4, 4)
    with pytest.raises(ValueError):
        CascadePoolingFusion(6)


# --- SSF -----------------------------------------------------------------------


def test_ssf_shape_contract():
    ssf = SSFModule(512, 512, 256)
    with torch.no_grad():
        out = ssf(torch.randn(1, 512, 32, 32), torch.randn(1, 512, 64, 64))
    assert out.shape == (1, 256, 64, 64)


def test_ssf_ablation_and_errors():
    ssf = SSFModule(4, 4, 4, enable_ssf=True, enable_sha=False)
    assert isinstance(ssf.shape, torch.nn.Identity)
    base = SSFModule(4, 4, 4, enable_ssf=False, enable_sha=False)
    assert isinstance(base.scale, torch.nn.Identity) and isinstance(base.shape, torch.nn.Identity)
    x, skip = torch.randn(1, 4, 4, 4), torch.randn(1, 4, 8, 8)
    ref = base.reduce(torch.cat([F.interpolate(x, size=(8, 8), mode="bilinear"), skip], 1))
    torch.testing.assert_close(base(x, skip), ref)
    with pytest.raises(ValueError):
        SSFModule(4, 4, 4, enable_ssf=False, enable_sha=True)
    with pytest.raises(ValueError):
        ssf(x, torch.randn(1, 4, 6, 6))


# --- gradient checks -------------------------------------------------------


def _randomize_offsets(sha, seed):
    # generic offsets avoid the bilinear kinks at integer coordinates
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        sha.offset.weight.copy_(0.3 * torch.randn(sha.offset.weight.shape, generator=g))
        sha.offset.bias.copy_(0.3 * torch.randn(sha.offset.bias.shape, generator=g))


def offset_margin(sha, run):
    """Distance of the instance from the sampler's kinks, over one ``run()`` forward pass.

    Central differences are only meaningful where the function is smooth:
    unsaturated offsets must stay away from integers (bilinear floor) and
    offset logits away from the hardtanh knees at +-1.  Saturated offsets are
    constant under perturbation and are ignored.
    """
    seen = []
    handle = sha.register_forward_pre_hook(lambda m, args: seen.append(args[0].detach()))
    try:
        with torch.no_grad():
            run()
            margins = []
            for x in seen:
                z = sha.offset(x)
                off = sha.offset_bound * z
                free = z.abs() < 1
                margins.append((z.abs() - 1).abs().min())
                if free.any():
                    margins.append((off - off.round()).abs()[free].min())
    finally:
        handle.remove()
    return min(float(m) for m in margins)


def generic_instance(make, seed, margin=1e-4, attempts=20):
    """First ``(module, sha, inputs)`` from ``make(seed + k)`` that is ``margin`` away from kinks."""
    for k in range(attempts):
        module, sha, inputs = make(seed + k)
        if offset_margin(sha.double(), lambda: module.double()(*(x.double() for x in inputs))) >= margin:
            return module, inputs
    raise AssertionError(f"no kink-free instance in {attempts} draws")


def test_gradcheck_ffd():
    torch.manual_seed(10)
    branches = [torch.randn(1, 3, 6, 6) for _ in range(3)]

    class Wrap(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.ffd = FeatureFusionDecision(3)

        def forward(self, *xs):
            return self.ffd(list(xs))

    assert block_gradcheck(Wrap(), branches)


def test_gradcheck_cpf():
    torch.manual_seed(11)
    assert block_gradcheck(CascadePoolingFusion(4), [torch.randn(1, 4, 8, 8)])


def _sha_instance(seed, size=6):
    torch.manual_seed(seed)
    sha = ShapeAdaptiveBlock(3)
    _randomize_offsets(sha, seed)
    return sha, sha, [torch.randn(1, 3, size, size)]


def _ssf_instance(seed):
    torch.manual_seed(seed)
    ssf = SSFModule(4, 4, 4)
    _randomize_offsets(ssf.shape, seed)
    return ssf, ssf.shape, [torch.randn(1, 4, 4, 4), torch.randn(1, 4, 8, 8)]


def test_gradcheck_sha():
    assert block_gradcheck(*generic_instance(_sha_instance, 12))


def test_offset_margin_flags_near_integer_offsets():
    sha, _, (x,) = _sha_instance(12)
    with torch.no_grad():
        sha.offset.weight.zero_()
        sha.offset.bias.fill_(1.0 / 3.0 + 1e-7)  # offset 1 + 3e-7 pixels, unsaturated
    assert offset_margin(sha, lambda: sha(x)) < 1e-6


def test_gradcheck_scale_adaptive():
    torch.manual_seed(13)
    assert block_gradcheck(ScaleAdaptiveBlock(3, depth=3), [torch.randn(1, 3, 8, 8)])


def test_gradcheck_ssf():
    assert block_gradcheck(*generic_instance(_ssf_instance, 14))


def test_gradcheck_deformable_offsets():
    g = torch.Generator().manual_seed(15)
    x = torch.randn(1, 2, 5, 5, generator=g, dtype=torch.float64, requires_grad=True)
    off = (0.2 + 0.6 * torch.rand(1, 18, 5, 5, generator=g, dtype=torch.float64)).requires_grad_()
    w = torch.randn(2, 2, 3, 3, generator=g, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda a, b, c: deform_conv2d(a, b, c), (x, off, w), rtol=1e-3)


# --- encoder and full network ----------------------------------------------------


def test_vgg16_encoder_strides_and_channels():
    enc = VGG16Encoder()
    with torch.no_grad():
        bottleneck, skips = enc(torch.rand(1, 3, 64, 64))
    assert bottleneck.shape == (1, 512, 4, 4)
    assert [tuple(s.shape[1:]) for s in skips] == [
        (64, 64, 64), (128, 32, 32), (256, 16, 16), (512, 8, 8)
    ]


def test_tiny_encoder_bottleneck_at_four():
    with torch.no_grad():
        bottleneck, skips = TinyEncoder()(torch.rand(2, 3, 64, 64))
    assert bottleneck.shape == (2, 64, 4, 4)
    assert [s.shape[-1] for s in skips] == [64, 32, 16, 8]


def test_encoder_zero_bias_on_mean_image_gives_zero_features():
    # the encoder standardizes first, so the mean image is its "zero" input
    enc = VGG16Encoder()
    with torch.no_grad():
        for m in enc.modules():
            if isinstance(m, torch.nn.Conv2d):
                m.bias.zero_()
        img = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1).expand(1, 3, 32, 32)
        bottleneck, skips = enc(img)
    assert torch.count_nonzero(bottleneck) == 0
    assert all(torch.count_nonzero(s) == 0 for s in skips)
    assert len(IMAGENET_STD) == 3


def test_ablation_ladder_parameter_counts_strictly_increase():
    counts = []
    for stage in ABLATION_STAGES:
        model = build_adaptnet(AdaptNetConfig().ablation(stage))
        counts.append(count_parameters(model))
        with torch.no_grad():
            assert model.eval()(torch.rand(1, 3, 32, 32)).shape == (1, 2, 32, 32)
    assert all(a < b for a, b in zip(counts, counts[1:])), counts


def test_full_adaptnet_accepts_512():
    model = build_adaptnet(AdaptNetConfig()).eval()
    with torch.no_grad():
        logits = model(torch.rand(1, 3, 512, 512))
    assert logits.shape == (1, 2, 512, 512)
    probs = logits.softmax(1)
    assert torch.allclose(probs.sum(1), torch.ones(1, 512, 512), atol=1e-6)


def test_baseline_is_plain_unet():
    model = build_adaptnet(AdaptNetConfig.tiny().ablation("baseline"))
    assert isinstance(model.cpf, torch.nn.Identity)
    for stage in model.decoder:
        assert isinstance(stage.scale, torch.nn.Identity)
        assert all(isinstance(b, ConvBlock) for b in stage.reduce)


def test_adaptnet_config_errors():
    with pytest.raises(ConfigError):
        AdaptNetConfig(enable_ssf=False, enable_sha=True)
    with pytest.raises(ConfigError):
        AdaptNetConfig(encoder="ResNet")
    with pytest.raises(ConfigError):
        AdaptNetConfig(decoder_channels=(8, 8))
    with pytest.raises(ValueError):
        build_adaptnet(AdaptNetConfig.tiny())(torch.rand(1, 3, 40, 40))


def test_architecture_summary_rows():
    model = build_adaptnet(AdaptNetConfig.tiny())
    rows = architecture_summary(model, 64)
    names = [r[0] for r in rows]
    assert names == ["encoder", "cpf", "ssf1", "ssf2", "ssf3", "ssf4", "head"]
    assert rows[-1][1] == (2, 64, 64)
    assert sum(r[2] for r in rows) == count_parameters(model)
