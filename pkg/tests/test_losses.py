import math

import numpy as np
import pytest
import torch

from unshadow.losses import (
    LossError,
    LossWeights,
    exclusion_loss,
    gaussian_pyramid_t,
    intrinsic_loss,
    lighting_loss,
    output_loss,
    pyramid_loss,
    recomposition_loss,
    shadow_seg_loss,
    sparse_gradient_loss,
    spatial_gradient_t,
)

W = LossWeights()


def rand(shape, seed, lo=0.1, hi=1.0):
    rng = np.random.default_rng(seed)
    return torch.tensor(rng.uniform(lo, hi, shape), dtype=torch.float64)


def rand_mask(seed, shape=(8, 8), p=0.6):
    rng = np.random.default_rng(seed)
    m = (rng.uniform(size=shape) < p).astype(np.float64)
    m[3, 3] = 1.0
    return torch.tensor(m)


def fd_gradient(fn, x, eps=1e-4):
    """Central finite differences of scalar fn w.r.t. tensor x."""
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = fn().item()
        flat[i] = orig - eps
        lo = fn().item()
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * eps)
    return g


def check_gradient(fn, *tensors, tol=1e-3):
    """Autograd vs central differences, relative error below tol."""
    for t in tensors:
        t.requires_grad_(True)
        if t.grad is not None:
            t.grad = None
    loss = fn()
    loss.backward()
    for t in tensors:
        ga = t.grad.clone()
        t.requires_grad_(False)
        gf = fd_gradient(fn, t.detach())
        denom = max(ga.norm().item(), gf.norm().item(), 1e-8)
        rel = (ga - gf).norm().item() / denom
        assert rel < tol, f"gradient mismatch: rel err {rel}"


class TestShadowSegLoss:
    def test_perfect_prediction_near_zero(self):
        eps = 1e-4
        rng = np.random.default_rng(0)
        hard = torch.tensor((rng.uniform(size=(8, 8)) < 0.4).astype(np.float64))
        pred = hard.clamp(eps, 1 - eps)
        mask = torch.ones(8, 8, dtype=torch.float64)
        val = shadow_seg_loss(pred, hard, mask, LossWeights(seg=1.0, seg_grad=0.0))
        assert val.item() < 1e-3

    def test_constant_images_zero_gradient_term(self):
        pred = torch.full((8, 8), 0.3, dtype=torch.float64)
        target = torch.full((8, 8), 0.7, dtype=torch.float64)
        mask = rand_mask(1)
        val = shadow_seg_loss(pred, target, mask, LossWeights(seg=0.0, seg_grad=5.0))
        assert val.item() == 0.0

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(2)
        pred = torch.tensor(rng.uniform(0.05, 0.95, (8, 8)))
        target = torch.tensor(rng.uniform(0.0, 1.0, (8, 8)))
        mask = rand_mask(3)
        got = shadow_seg_loss(pred, target, mask, LossWeights(seg=1.0, seg_grad=0.0))
        num_p = den_p = num_n = den_n = 0.0
        for y in range(8):
            for x in range(8):
                m = mask[y, x].item()
                s_hat = target[y, x].item()
                s = min(max(pred[y, x].item(), 1e-6), 1.0)
                num_p += m * s_hat * math.log(s)
                den_p += m * s_hat
                s1 = min(max(1 - pred[y, x].item(), 1e-6), 1.0)
                num_n += m * (1 - s_hat) * math.log(s1)
                den_n += m * (1 - s_hat)
        expected = -num_p / max(den_p, 1.0) - num_n / max(den_n, 1.0)
        assert got.item() == pytest.approx(expected, abs=1e-6)

    def test_empty_receiver_rejected(self):
        with pytest.raises(LossError):
            shadow_seg_loss(torch.rand(4, 4), torch.rand(4, 4),
                            torch.zeros(4, 4), W)

    def test_gradient_check(self):
        pred = rand((8, 8), 4, 0.1, 0.9)
        target = rand((8, 8), 5, 0.0, 1.0)
        mask = rand_mask(6)
        check_gradient(lambda: shadow_seg_loss(pred, target, mask, W), pred)

    def test_masking_soundness(self):
        pred = rand((8, 8), 7, 0.1, 0.9)
        target = rand((8, 8), 8, 0.0, 1.0)
        mask = rand_mask(9)
        base = shadow_seg_loss(pred, target, mask, W).item()
        outside = (mask == 0).nonzero()[0]
        pred2 = pred.clone()
        pred2[outside[0], outside[1]] += 0.05
        assert shadow_seg_loss(pred2, target, mask, W).item() == base


class TestPyramidLoss:
    def test_identical_zero(self):
        x = rand((3, 8, 8), 10)
        assert pyramid_loss(x, x.clone(), torch.ones(8, 8, dtype=torch.float64)).item() == 0.0

    def test_constant_offset_closed_form(self):
        # full mask: a constant offset survives every blur, contributing c^2
        # per level
        x = rand((3, 8, 8), 11)
        c = 0.1
        got = pyramid_loss(x, x + c, torch.ones(8, 8, dtype=torch.float64), levels=4)
        assert got.item() == pytest.approx(4 * c * c, rel=1e-9)

    def test_zero_mask_zero(self):
        x = rand((3, 8, 8), 12)
        y = rand((3, 8, 8), 13)
        assert pyramid_loss(x, y, torch.zeros(8, 8, dtype=torch.float64)).item() == 0.0

    def test_torch_pyramid_matches_numpy(self):
        from unshadow.imaging import ImageBuffer, gaussian_pyramid

        rng = np.random.default_rng(14)
        img = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
        np_levels = gaussian_pyramid(ImageBuffer(img), 4)
        t_levels = gaussian_pyramid_t(torch.tensor(img.transpose(2, 0, 1),
                                                   dtype=torch.float64), 4)
        for a, b in zip(np_levels, t_levels):
            np.testing.assert_allclose(a.data.transpose(2, 0, 1),
                                       b.numpy(), atol=1e-6)

    def test_gradient_check(self):
        x = rand((3, 8, 8), 15)
        y = rand((3, 8, 8), 16)
        mask = rand_mask(17)
        check_gradient(lambda: pyramid_loss(x, y, mask), x)

    def test_masking_soundness(self):
        x = rand((3, 8, 8), 18)
        y = rand((3, 8, 8), 19)
        mask = rand_mask(20)
        base = pyramid_loss(x, y, mask).item()
        outside = (mask == 0).nonzero()[0]
        x2 = x.clone()
        x2[:, outside[0], outside[1]] = 99.0
        assert pyramid_loss(x2, y, mask).item() == base


class TestExclusionLoss:
    def test_constant_lighting_zero(self):
        t = rand((3, 8, 8), 21)
        l = torch.full((3, 8, 8), 0.5, dtype=torch.float64)
        assert exclusion_loss(t, l).item() == 0.0

    def test_constant_texture_zero(self):
        t = torch.full((3, 8, 8), 0.7, dtype=torch.float64)
        l = rand((3, 8, 8), 22)
        assert exclusion_loss(t, l).item() == 0.0

    def test_constant_with_partial_mask_zero(self):
        t = rand((3, 8, 8), 23)
        l = torch.full((3, 8, 8), 0.5, dtype=torch.float64)
        assert exclusion_loss(t, l, rand_mask(24)).item() == 0.0

    def test_coincident_edges_cost_more_than_disjoint(self):
        t = torch.full((3, 8, 8), 0.2, dtype=torch.float64)
        t[:, :, 4:] = 0.8  # vertical edge
        l_disjoint = torch.full((3, 8, 8), 0.2, dtype=torch.float64)
        l_disjoint[:, 4:, :] = 0.8  # horizontal edge
        l_coincident = t.clone()
        disjoint = exclusion_loss(t, l_disjoint).item()
        coincident = exclusion_loss(t, l_coincident).item()
        assert disjoint < coincident

    def test_symmetry_under_swap(self):
        t = rand((3, 8, 8), 25)
        l = rand((3, 8, 8), 26)
        assert exclusion_loss(t, l).item() == pytest.approx(
            exclusion_loss(l, t).item(), rel=1e-12)

    def test_gradient_check(self):
        t = rand((3, 8, 8), 27)
        l = rand((3, 8, 8), 28)
        mask = rand_mask(29)
        check_gradient(lambda: exclusion_loss(t, l, mask), t, l)

    def test_masking_soundness(self):
        t = rand((3, 8, 8), 30)
        l = rand((3, 8, 8), 31)
        mask = rand_mask(32)
        base = exclusion_loss(t, l, mask).item()
        outside = (mask == 0).nonzero()[0]
        t2 = t.clone()
        t2[:, outside[0], outside[1]] = 5.0
        assert exclusion_loss(t2, l, mask).item() == base


class TestRecompositionLoss:
    def test_exact_recomposition_zero(self):
        l = rand((3, 8, 8), 33)
        t = rand((3, 8, 8), 34)
        img = l * t
        assert recomposition_loss(img, l, t, torch.ones(8, 8, dtype=torch.float64)).item() == 0.0

    def test_constant_offset(self):
        l = rand((3, 8, 8), 35)
        t = rand((3, 8, 8), 36)
        img = l * t - 0.2
        got = recomposition_loss(img, l, t, torch.ones(8, 8, dtype=torch.float64))
        assert got.item() == pytest.approx(0.2, rel=1e-9)

    def test_scalar_loop_oracle(self):
        rng = np.random.default_rng(37)
        l = torch.tensor(rng.uniform(0.1, 1, (3, 4, 4)))
        t = torch.tensor(rng.uniform(0.1, 1, (3, 4, 4)))
        img = torch.tensor(rng.uniform(0.1, 1, (3, 4, 4)))
        mask = rand_mask(38, (4, 4))
        got = recomposition_loss(img, l, t, mask)
        acc = 0.0
        for c in range(3):
            for y in range(4):
                for x in range(4):
                    acc += mask[y, x].item() * abs(
                        img[c, y, x].item() - l[c, y, x].item() * t[c, y, x].item())
        assert got.item() == pytest.approx(acc / (3 * 16), rel=1e-9)

    def test_gradient_check(self):
        l = rand((3, 8, 8), 39)
        t = rand((3, 8, 8), 40)
        img = rand((3, 8, 8), 41)
        mask = rand_mask(42)
        check_gradient(lambda: recomposition_loss(img, l, t, mask), l, t)


class TestSparseGradientLoss:
    def test_constant_zero(self):
        l = torch.full((3, 8, 8), 0.4, dtype=torch.float64)
        assert sparse_gradient_loss(l, rand_mask(43)).item() == 0.0

    def test_ramp_closed_form(self):
        w = 8
        ramp = torch.arange(w, dtype=torch.float64).repeat(w, 1) * 0.05
        l = ramp.unsqueeze(0).repeat(3, 1, 1)
        got = sparse_gradient_loss(l, torch.ones(w, w, dtype=torch.float64))
        # w-1 interior x-entries per row carry |s|; y-gradients are zero
        expected = 0.05 * (w - 1) * w * 3 / (6 * w * w)
        assert got.item() == pytest.approx(expected, rel=1e-9)

    def test_matches_finite_difference_oracle(self):
        rng = np.random.default_rng(44)
        l = torch.tensor(rng.uniform(0, 1, (1, 4, 4)))
        mask = torch.ones(4, 4, dtype=torch.float64)
        acc = 0.0
        for y in range(4):
            for x in range(4):
                if x < 3:
                    acc += abs(l[0, y, x + 1].item() - l[0, y, x].item())
                if y < 3:
                    acc += abs(l[0, y + 1, x].item() - l[0, y, x].item())
        assert sparse_gradient_loss(l, mask).item() == pytest.approx(
            acc / 32, rel=1e-9)

    def test_gradient_check(self):
        l = rand((3, 8, 8), 45)
        check_gradient(lambda: sparse_gradient_loss(l, rand_mask(46)), l)


class TestIntrinsicLoss:
    def test_ground_truth_fixed_point(self):
        t_gt = rand((3, 8, 8), 47)
        l_gt = torch.full((3, 8, 8), 0.6, dtype=torch.float64)
        img = l_gt * t_gt
        mask = rand_mask(48)
        val = intrinsic_loss(l_gt.clone(), t_gt.clone(), l_gt, t_gt, img, mask, W)
        assert val.item() == 0.0

    def test_zero_weights_zero(self):
        zero = LossWeights(seg=0, seg_grad=0, decomp=0, excl=0, recompose=0,
                           light_smooth=0, target_light=0, target_recompose=0)
        val = intrinsic_loss(rand((3, 8, 8), 49), rand((3, 8, 8), 50),
                             rand((3, 8, 8), 51), rand((3, 8, 8), 52),
                             rand((3, 8, 8), 53), rand_mask(54), zero)
        assert val.item() == 0.0

    def test_sum_of_parts(self):
        l, t = rand((3, 8, 8), 55), rand((3, 8, 8), 56)
        l_gt, t_gt = rand((3, 8, 8), 57), rand((3, 8, 8), 58)
        img = rand((3, 8, 8), 59)
        mask = rand_mask(60)
        got = intrinsic_loss(l, t, l_gt, t_gt, img, mask, W)
        expected = (W.decomp * (pyramid_loss(l, l_gt, mask) + pyramid_loss(t, t_gt, mask))
                    + W.excl * exclusion_loss(t, l, mask)
                    + W.recompose * recomposition_loss(img, l, t, mask)
                    + W.light_smooth * sparse_gradient_loss(l, mask))
        assert got.item() == pytest.approx(expected.item(), rel=1e-12)

    def test_gradient_check(self):
        l, t = rand((3, 8, 8), 61), rand((3, 8, 8), 62)
        l_gt, t_gt = rand((3, 8, 8), 63), rand((3, 8, 8), 64)
        img = rand((3, 8, 8), 65)
        mask = rand_mask(66)
        check_gradient(lambda: intrinsic_loss(l, t, l_gt, t_gt, img, mask, W), l, t)


class TestLightingLoss:
    def test_perfect_predictions_zero(self):
        tgt = rand((3, 8, 8), 67)
        mr, mo = rand_mask(68), rand_mask(69, p=0.2)
        mo = mo * (1 - mr)
        val = lighting_loss(tgt.clone(), tgt.clone(), tgt, mr, mo, W)
        assert val.item() == 0.0

    def test_hole_term_vanishes_without_mask(self):
        tgt = rand((3, 8, 8), 70)
        pred = rand((3, 8, 8), 71)
        arbitrary = rand((3, 8, 8), 72) * 17.0
        mr = torch.ones(8, 8, dtype=torch.float64)
        mo = torch.zeros(8, 8, dtype=torch.float64)
        a = lighting_loss(pred, arbitrary, tgt, mr, mo, W)
        b = lighting_loss(pred, arbitrary * 2, tgt, mr, mo, W)
        assert a.item() == b.item()

    def test_two_term_oracle(self):
        removed, hole = rand((3, 8, 8), 73), rand((3, 8, 8), 74)
        tgt = rand((3, 8, 8), 75)
        mr, mo = rand_mask(76), rand_mask(77, p=0.3)
        got = lighting_loss(removed, hole, tgt, mr, mo, W)
        expected = W.target_light * (
            pyramid_loss(removed, tgt, mr * (1 - mo))
            + pyramid_loss(hole, tgt, mo))
        assert got.item() == pytest.approx(expected.item(), rel=1e-12)

    def test_gradient_check(self):
        removed, hole = rand((3, 8, 8), 78), rand((3, 8, 8), 79)
        tgt = rand((3, 8, 8), 80)
        mr, mo = rand_mask(81), rand_mask(82, p=0.3)
        check_gradient(lambda: lighting_loss(removed, hole, tgt, mr, mo, W),
                       removed, hole)


class TestOutputLoss:
    def test_fixed_point_zero(self):
        l, t = rand((3, 8, 8), 83), rand((3, 8, 8), 84)
        tgt = l * t
        assert output_loss(tgt, l, t, torch.ones(8, 8, dtype=torch.float64), W).item() == 0.0

    def test_constant_offset(self):
        l, t = rand((3, 8, 8), 85), rand((3, 8, 8), 86)
        tgt = l * t + 0.2
        got = output_loss(tgt, l, t, torch.ones(8, 8, dtype=torch.float64), W)
        assert got.item() == pytest.approx(W.target_recompose * 0.2, rel=1e-9)

    def test_gradient_check(self):
        l, t = rand((3, 8, 8), 87), rand((3, 8, 8), 88)
        tgt = rand((3, 8, 8), 89)
        check_gradient(lambda: output_loss(tgt, l, t, rand_mask(90), W), l, t)


class TestWeights:
    def test_negative_rejected(self):
        with pytest.raises(LossError):
            LossWeights(seg=-1.0)
