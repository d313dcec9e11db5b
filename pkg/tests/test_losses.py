import numpy as np
import pytest
import torch
from torch import nn

from rainrig.derain_model import DiscriminatorSpec, build_discriminator
from rainrig.errors import ConfigurationError, ShapeError
from rainrig.losses import (
    GenLoss,
    LossWeights,
    PerceptualExtractor,
    adv_gen_loss,
    disc_loss,
    make_extractor,
    ms_feature_loss,
    perceptual_loss,
    seeded_random_extractor,
    total_gen_loss,
    vgg16_extractor,
)

ATOL = 1e-9


class ScaledTapsExtractor(nn.Module):
    """Stub whose layer-i output is the input scaled by i (i = 1..n)."""

    def __init__(self, n):
        super().__init__()
        self.n = n

    def forward(self, x):
        return [x * (i + 1) for i in range(self.n)]


class TestAdvGenLoss:
    def test_perfect_fool_is_zero(self):
        assert adv_gen_loss(torch.ones(1, 1, 4, 4)).item() == pytest.approx(0.0, abs=ATOL)

    def test_all_zero_patches(self):
        assert adv_gen_loss(torch.zeros(1, 1, 4, 4)).item() == pytest.approx(1.0, abs=ATOL)

    def test_hand_computed_mixed_patches(self):
        patches = torch.tensor([0.5, 1.5])
        assert adv_gen_loss(patches).item() == pytest.approx(0.25, abs=ATOL)

    def test_scales_are_averaged(self):
        scales = [torch.zeros(1, 1, 2, 2), torch.ones(1, 1, 2, 2)]
        assert adv_gen_loss(scales).item() == pytest.approx(0.5, abs=ATOL)


class TestDiscLoss:
    def test_perfect_discriminator_is_zero(self):
        assert disc_loss(torch.ones(2, 1, 3, 3), torch.zeros(2, 1, 3, 3)).item() == pytest.approx(0.0, abs=ATOL)

    def test_worst_case_at_swapped_outputs(self):
        assert disc_loss(torch.zeros(4), torch.ones(4)).item() == pytest.approx(2.0, abs=ATOL)

    def test_hand_computed_half_values(self):
        half = torch.full((3, 3), 0.5)
        assert disc_loss(half, half).item() == pytest.approx(0.5, abs=ATOL)


class TestPerceptualLoss:
    def test_identical_images_zero(self):
        w = LossWeights(n_vgg=3)
        ext = seeded_random_extractor(n_layers=3, seed=1)
        img = torch.rand(1, 3, 32, 32)
        assert perceptual_loss(ext, img, img, w).item() == pytest.approx(0.0, abs=ATOL)

    def test_divisor_schedule_for_four_layers(self):
        w = LossWeights(n_vgg=4)
        assert w.perceptual_divisors() == [8.0, 4.0, 2.0, 1.0]

    def test_closed_form_with_scaled_taps_stub(self):
        w = LossWeights(n_vgg=4)
        a = torch.zeros(1, 3, 8, 8, dtype=torch.float64)
        b = torch.full((1, 3, 8, 8), 0.1, dtype=torch.float64)
        # stub: per-layer mean abs diff is i*0.1 -> sum_i i*0.1 / 2^(4-i)
        expected = sum((i * 0.1) / 2 ** (4 - i) for i in range(1, 5))
        got = perceptual_loss(ScaledTapsExtractor(4), a, b, w).item()
        assert got == pytest.approx(expected, abs=ATOL)
        assert expected == pytest.approx(0.6125, abs=ATOL)

    def test_shape_mismatch_rejected(self):
        w = LossWeights(n_vgg=2)
        with pytest.raises(ShapeError):
            perceptual_loss(ScaledTapsExtractor(2), torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 4), w)

    def test_tap_count_mismatch_rejected(self):
        w = LossWeights(n_vgg=4)
        img = torch.rand(1, 3, 8, 8)
        with pytest.raises(ConfigurationError):
            perceptual_loss(ScaledTapsExtractor(3), img, img, w)


class TestMsFeatureLoss:
    def test_identical_stacks_zero(self):
        w = LossWeights(n_adv=4)
        stack = [torch.rand(1, 2, 4, 4) for _ in range(4)]
        assert ms_feature_loss(stack, [t.clone() for t in stack], w).item() == pytest.approx(0.0, abs=ATOL)

    def test_deepest_layer_weighs_fully(self):
        w = LossWeights(n_adv=4)
        real = [torch.zeros(2, 2, dtype=torch.float64) for _ in range(4)]
        fake = [torch.zeros(2, 2, dtype=torch.float64) for _ in range(3)] + [
            torch.full((2, 2), 0.2, dtype=torch.float64)
        ]
        assert ms_feature_loss(real, fake, w).item() == pytest.approx(0.2, abs=ATOL)

    def test_shallowest_layer_weighs_one_eighth(self):
        w = LossWeights(n_adv=4)
        real = [torch.zeros(2, 2, dtype=torch.float64) for _ in range(4)]
        fake = [torch.full((2, 2), 0.2, dtype=torch.float64)] + [
            torch.zeros(2, 2, dtype=torch.float64) for _ in range(3)
        ]
        assert ms_feature_loss(real, fake, w).item() == pytest.approx(0.025, abs=ATOL)

    def test_structure_mismatch_rejected(self):
        w = LossWeights(n_adv=2)
        with pytest.raises(ShapeError):
            ms_feature_loss([torch.zeros(2)], [torch.zeros(2), torch.zeros(2)], w)


class TestTotalGenLoss:
    def test_weighted_sum(self):
        w = LossWeights(lambda_adv=1.0, lambda_perc=10.0, lambda_msadv=10.0)
        out = total_gen_loss(0.25, 0.1, 0.05, w)
        assert out.total == pytest.approx(1.75, abs=ATOL)
        assert (out.adv, out.perc, out.msadv) == (0.25, 0.1, 0.05)

    def test_zero_weights_zero_total(self):
        w = LossWeights(lambda_adv=0.0, lambda_perc=0.0, lambda_msadv=0.0)
        assert total_gen_loss(3.0, 4.0, 5.0, w).total == pytest.approx(0.0, abs=ATOL)

    def test_single_term_identity(self):
        w = LossWeights(lambda_adv=1.0, lambda_perc=0.0, lambda_msadv=0.0)
        assert total_gen_loss(0.77, 0.0, 0.0, w).total == pytest.approx(0.77, abs=ATOL)


class TestLossInvariants:
    def test_zero_at_identity(self):
        w = LossWeights(n_vgg=3, n_adv=2)
        ext = seeded_random_extractor(n_layers=3, seed=2)
        clear = torch.rand(1, 3, 32, 32)
        stack = [torch.rand(1, 4, 8, 8), torch.rand(1, 8, 4, 4)]
        ones = torch.ones(1, 1, 4, 4)
        parts = total_gen_loss(
            adv_gen_loss(ones),
            perceptual_loss(ext, clear, clear.clone(), w),
            ms_feature_loss(stack, [t.clone() for t in stack], w),
            w,
        )
        assert float(parts.total) == pytest.approx(0.0, abs=ATOL)

    def test_non_negativity(self):
        w = LossWeights(n_vgg=2, n_adv=2)
        rng = torch.Generator().manual_seed(3)
        for _ in range(20):
            d_out = torch.randn(1, 1, 3, 3, generator=rng) * 5
            assert adv_gen_loss(d_out).item() >= 0
            assert disc_loss(d_out, -d_out).item() >= 0
            a, b = torch.randn(1, 3, 8, 8, generator=rng), torch.randn(1, 3, 8, 8, generator=rng)
            assert perceptual_loss(ScaledTapsExtractor(2), a, b, w).item() >= 0

    def test_layer_weight_doubles_with_depth(self):
        for n in (2, 3, 4, 5, 8):
            w = LossWeights(n_vgg=n, n_adv=n)
            for divs in (w.perceptual_divisors(), w.feature_divisors()):
                for i in range(len(divs) - 1):
                    # multiplier 1/div doubles at each deeper layer
                    assert divs[i] == pytest.approx(2.0 * divs[i + 1], abs=ATOL)

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(4)
        w = LossWeights(lambda_adv=1.0, lambda_perc=10.0, lambda_msadv=10.0, n_vgg=3, n_adv=2)
        ext = seeded_random_extractor(n_layers=3, seed=5).double()
        d = build_discriminator(DiscriminatorSpec(num_scales=1, layers_per_scale=2, base_channels=4)).double()
        clear = torch.rand(1, 3, 16, 16, dtype=torch.float64)
        with torch.no_grad():
            real_maps, real_feats = d(clear)

        def loss_of(x):
            fake_maps, fake_feats = d(x)
            return total_gen_loss(
                adv_gen_loss(fake_maps),
                perceptual_loss(ext, clear, x, w),
                ms_feature_loss(real_feats, fake_feats, w),
                w,
            ).total

        x = torch.rand(1, 3, 16, 16, dtype=torch.float64, requires_grad=True)
        analytic = torch.autograd.grad(loss_of(x), x)[0]
        rng = np.random.default_rng(6)
        step = 1e-5
        rel_errors = []
        for _ in range(40):
            c, i, j = rng.integers(0, 3), rng.integers(0, 16), rng.integers(0, 16)
            xp, xm = x.detach().clone(), x.detach().clone()
            xp[0, c, i, j] += step
            xm[0, c, i, j] -= step
            with torch.no_grad():
                fd = (loss_of(xp) - loss_of(xm)).item() / (2 * step)
            an = analytic[0, c, i, j].item()
            rel_errors.append(abs(fd - an) / max(abs(an), 1e-8))
        rel_errors = np.array(rel_errors)
        assert np.mean(rel_errors < 1e-3) >= 0.95
        assert np.median(rel_errors) < 1e-4

    def test_extractor_is_frozen_and_deterministic(self):
        ext = make_extractor("random", n_layers=3, seed=7)
        assert all(not p.requires_grad for p in ext.parameters())
        x = torch.rand(1, 3, 24, 24)
        a = [t.clone() for t in ext(x)]
        ext.train()  # must stay in eval mode
        b = ext(x)
        assert all(torch.equal(u, v) for u, v in zip(a, b))
        ext2 = make_extractor("random", n_layers=3, seed=7)
        c = ext2(x)
        assert all(torch.equal(u, v) for u, v in zip(a, c))

    def test_vgg16_without_weights_raises_helpfully(self):
        with pytest.raises(ConfigurationError, match="random"):
            vgg16_extractor()
