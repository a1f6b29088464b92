import numpy as np
import pytest
import torch

from crossview import checkpoint as ckpt
from crossview.data import PairedBatch
from crossview.networks import (PatchDiscriminator, UnetGenerator,
                                build_discriminator, build_image_generator,
                                build_semantic_generator, count_parameters,
                                default_unet_depth, discriminate,
                                forward_stage1, init_weights)

from gradcheck import compare_gradients


def unet_param_oracle(in_ch, out_ch, base, depth):
    """Independent layer arithmetic: sum k*k*c_in*c_out + c_out per conv."""
    filters = [base * min(2 ** k, 8) for k in range(depth)]
    total = 0
    c_in = in_ch
    for k in range(depth):
        total += 4 * 4 * c_in * filters[k] + filters[k]
        c_in = filters[k]
    for k in range(depth - 1, -1, -1):
        c_out = base if k == 0 else filters[k - 1]
        c_in = filters[k] if k == depth - 1 else filters[k] + filters[k]
        total += 4 * 4 * c_in * c_out + c_out
    total += 3 * 3 * base * out_ch + out_ch
    return total


def patchgan_param_oracle(in_ch, base=64):
    chans = [(in_ch, base), (base, base * 2), (base * 2, base * 4),
             (base * 4, base * 8), (base * 8, 1)]
    return sum(4 * 4 * a * b + b for a, b in chans)


def patchgan_size_oracle(n):
    # three k4/s2/p1 convolutions then two k4/s1/p1 convolutions
    for _ in range(3):
        n = (n + 2 * 1 - 4) // 2 + 1
    for _ in range(2):
        n = (n + 2 * 1 - 4) // 1 + 1
    return n


def make_batch(b=1, h=64, w=64, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    def rand():
        return (torch.rand((b, 3, h, w), generator=g) * 2 - 1).to(dtype)
    return PairedBatch(rand(), rand(), rand(), [f"s{i}" for i in range(b)])


class TestImageGenerator:
    def test_shapes_and_feature_channels(self):
        gi = build_image_generator(64, 6, 3, depth=4,
                                   generator=torch.Generator().manual_seed(0))
        x = torch.randn(1, 6, 64, 64)
        out, feat = gi(x)
        assert out.shape == (1, 3, 64, 64)
        assert feat.shape == (1, 64, 64, 64)

    def test_zero_input_output_bounded(self):
        gi = build_image_generator(64, 6, 3, depth=4,
                                   generator=torch.Generator().manual_seed(1))
        out, _ = gi(torch.zeros(1, 6, 64, 64))
        assert torch.isfinite(out).all()
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_parameter_count_matches_oracle(self):
        gi = UnetGenerator(6, 3, base_filters=64, depth=4)
        assert count_parameters(gi) == unet_param_oracle(6, 3, 64, 4)

    @pytest.mark.parametrize("in_ch,out_ch,base,depth", [
        (3, 3, 4, 2), (6, 3, 64, 4), (3, 3, 8, 3), (6, 3, 16, 5),
    ])
    def test_parameter_count_parametrized(self, in_ch, out_ch, base, depth):
        net = UnetGenerator(in_ch, out_ch, base_filters=base, depth=depth)
        assert count_parameters(net) == unet_param_oracle(in_ch, out_ch, base, depth)

    def test_rejects_bad_sizes(self):
        gi = UnetGenerator(6, 3, base_filters=8, depth=4)
        with pytest.raises(ValueError):
            gi(torch.zeros(1, 6, 60, 64))
        with pytest.raises(ValueError):
            UnetGenerator(0, 3)
        with pytest.raises(ValueError):
            UnetGenerator(3, -1)

    def test_output_range_random_weights(self):
        gi = build_image_generator(16, 6, 3, depth=3,
                                   generator=torch.Generator().manual_seed(3))
        out, _ = gi(torch.randn(2, 6, 32, 32) * 5)
        assert out.min() >= -1.0 and out.max() <= 1.0


class TestSemanticGenerator:
    def test_shapes(self):
        gs = build_semantic_generator(4, 3, 3,
                                      generator=torch.Generator().manual_seed(0))
        out, feat = gs(torch.randn(1, 3, 64, 64))
        assert out.shape == (1, 3, 64, 64)
        assert feat.shape == (1, 4, 64, 64)

    def test_forward_deterministic(self):
        gs = build_semantic_generator(4, 3, 3,
                                      generator=torch.Generator().manual_seed(5))
        x = torch.randn(2, 3, 32, 32)
        a, fa = gs(x)
        b, fb = gs(x)
        assert torch.equal(a, b) and torch.equal(fa, fb)

    def test_parameter_count(self):
        gs = build_semantic_generator(4, 3, 3)
        assert count_parameters(gs) == unet_param_oracle(3, 3, 4, 2)


class TestDiscriminator:
    def test_patch_grid_256(self):
        d = build_discriminator(6, generator=torch.Generator().manual_seed(0))
        logits = d(torch.randn(1, 6, 256, 256))
        n = patchgan_size_oracle(256)
        assert n == 30
        assert logits.shape == (1, 1, 30, 30)

    def test_patch_grid_64(self):
        d = build_discriminator(6, generator=torch.Generator().manual_seed(0))
        logits = d(torch.randn(1, 6, 64, 64))
        n = patchgan_size_oracle(64)
        assert n == 6
        assert logits.shape == (1, 1, 6, 6)

    def test_parameter_count(self):
        d = PatchDiscriminator(6)
        assert count_parameters(d) == patchgan_param_oracle(6)

    def test_zero_weights_zero_logits(self):
        d = PatchDiscriminator(6)
        for p in d.parameters():
            with torch.no_grad():
                p.zero_()
        logits = d(torch.randn(1, 6, 64, 64))
        assert torch.equal(logits, torch.zeros_like(logits))
        assert torch.allclose(torch.sigmoid(logits),
                              torch.full_like(logits, 0.5))

    def test_too_small_input_rejected(self):
        d = PatchDiscriminator(6)
        with pytest.raises(ValueError):
            d(torch.randn(1, 6, 8, 8))

    def test_discriminate_shape_mismatch(self):
        d = PatchDiscriminator(6)
        with pytest.raises(ValueError):
            discriminate(d, torch.randn(1, 3, 64, 64), torch.randn(1, 3, 32, 32))

    def test_discriminate_candidate_order_matters(self):
        d = build_discriminator(6, generator=torch.Generator().manual_seed(2))
        a = torch.randn(1, 3, 64, 64)
        b = torch.randn(1, 3, 64, 64)
        assert not torch.equal(discriminate(d, a, b), discriminate(d, b, a))


class TestStageOne:
    def test_bounds_and_shapes(self):
        g = torch.Generator().manual_seed(0)
        gi = build_image_generator(16, 6, 3, depth=3, generator=g)
        gs = build_semantic_generator(4, 3, 3, generator=g)
        batch = make_batch(2, 32, 32)
        out = forward_stage1(gi, gs, batch)
        for t in (out.coarse_image, out.recon_semantic):
            assert t.shape == (2, 3, 32, 32)
            assert t.min() >= -1.0 and t.max() <= 1.0
        assert out.image_features.shape == (2, 16, 32, 32)
        assert out.semantic_features.shape == (2, 4, 32, 32)

    def test_deterministic(self):
        g = torch.Generator().manual_seed(1)
        gi = build_image_generator(8, 6, 3, depth=2, generator=g)
        gs = build_semantic_generator(4, 3, 3, generator=g)
        batch = make_batch(1, 16, 16, seed=4)
        a = forward_stage1(gi, gs, batch)
        b = forward_stage1(gi, gs, batch)
        assert torch.equal(a.coarse_image, b.coarse_image)
        assert torch.equal(a.recon_semantic, b.recon_semantic)

    def test_input_assembly_requires_source(self):
        g = torch.Generator().manual_seed(1)
        gi = build_image_generator(8, 6, 3, depth=2, generator=g)
        batch = make_batch(1, 16, 16)
        with pytest.raises(ValueError):
            forward_stage1(gi, None, batch, use_condition=False, use_semantic=False)


class TestGradients:
    def test_stage1_gradients_match_finite_differences(self):
        g = torch.Generator().manual_seed(7)
        gi = build_image_generator(8, 6, 3, depth=2, generator=g).double()
        gs = build_semantic_generator(4, 3, 3, generator=g).double()
        batch = make_batch(1, 8, 8, seed=9, dtype=torch.float64)

        def loss_fn():
            out = forward_stage1(gi, gs, batch)
            return out.coarse_image.mean() + out.recon_semantic.mean()

        named = list(gi.named_parameters()) + list(gs.named_parameters())
        n, max_rel = compare_gradients(loss_fn, named, n_samples=48, seed=0)
        assert max_rel <= 1e-3

    def test_discriminator_gradient_wrt_candidate(self):
        d = build_discriminator(6, generator=torch.Generator().manual_seed(3)).double()
        cond = torch.randn(1, 3, 24, 24, dtype=torch.float64)
        cand = torch.randn(1, 3, 24, 24, dtype=torch.float64, requires_grad=True)

        def loss_fn():
            return discriminate(d, cond, cand).mean()

        n, max_rel = compare_gradients(loss_fn, [("candidate", cand)],
                                       n_samples=32, seed=1)
        assert max_rel <= 1e-3


class TestInitAndCheckpoint:
    def test_init_statistics(self):
        gi = UnetGenerator(6, 3, base_filters=64, depth=4)
        init_weights(gi, std=0.2, generator=torch.Generator().manual_seed(0))
        w = gi.encoders[1][0].weight.detach()
        assert abs(float(w.mean())) < 0.01
        assert abs(float(w.std()) - 0.2) < 0.01
        bias = gi.head.bias.detach()
        assert torch.equal(bias, torch.zeros_like(bias))

    def test_init_deterministic_from_seed(self):
        a = build_image_generator(8, 6, 3, depth=2,
                                  generator=torch.Generator().manual_seed(42))
        b = build_image_generator(8, 6, 3, depth=2,
                                  generator=torch.Generator().manual_seed(42))
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_archive_roundtrip_bitwise(self, tmp_path):
        gi = build_image_generator(8, 6, 3, depth=2,
                                   generator=torch.Generator().manual_seed(1))
        path = tmp_path / "net.ckpt"
        ckpt.save_archive(path, ckpt.module_tensors("gi", gi), meta={"tag": 1})
        tensors, meta = ckpt.load_archive(path)
        assert meta == {"tag": 1}
        fresh = UnetGenerator(6, 3, base_filters=8, depth=2)
        ckpt.load_module("gi", fresh, tensors)
        for (na, pa), (nb, pb) in zip(gi.state_dict().items(),
                                      fresh.state_dict().items()):
            assert na == nb
            assert torch.equal(pa, pb)

    def test_archive_bytes_deterministic(self, tmp_path):
        gi = build_image_generator(8, 6, 3, depth=2,
                                   generator=torch.Generator().manual_seed(1))
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        ckpt.save_archive(p1, ckpt.module_tensors("gi", gi), meta={"k": "v"})
        ckpt.save_archive(p2, ckpt.module_tensors("gi", gi), meta={"k": "v"})
        assert p1.read_bytes() == p2.read_bytes()


def test_default_depth_rule():
    assert default_unet_depth(64, 64) == 4
    assert default_unet_depth(256, 256) == 6
    assert default_unet_depth(2048, 2048) == 8  # capped
    assert default_unet_depth(8, 8) == 1
