import numpy as np
import pytest
import torch

from dynrecon import losses
from dynrecon.losses import LossWeights, camera_loss, dynamic_loss

from oracles import ref_ssim_map


def imgs(rng, size=16):
    return (rng.uniform(0, 1, (size, size, 3)),
            rng.uniform(0, 1, (size, size, 3)))


def checker_mask(size=16):
    m = np.zeros((size, size), dtype=np.uint8)
    m[::2, ::2] = 1
    return m


# -- atoms -----------------------------------------------------------------


def test_l1_trivial_values():
    a = np.zeros((12, 12, 3))
    b = np.full((12, 12, 3), 0.25)
    assert float(losses.l1(a, b)) == pytest.approx(0.25, abs=1e-12)
    assert float(losses.l1(a, a)) == 0.0


def test_l1_masked_vs_manual(rng):
    a, b = imgs(rng)
    m = checker_mask()
    want = np.abs(a - b)[m > 0].mean()
    assert float(losses.l1(a, b, m)) == pytest.approx(want, abs=1e-12)


def test_l1_linear_along_interpolation(rng):
    a, b = imgs(rng)
    base = float(losses.l1(a, b))
    for t in (0.25, 0.5, 0.75):
        mid = a + t * (b - a)
        assert float(losses.l1(mid, b)) == pytest.approx((1 - t) * base, abs=1e-12)


def test_l1_shape_mismatch(rng):
    with pytest.raises(ValueError):
        losses.l1(np.zeros((4, 4, 3)), np.zeros((5, 5, 3)))


def test_ssim_identical_is_one(rng):
    a, _ = imgs(rng)
    smap = losses.ssim_map(a, a)
    assert np.allclose(smap.numpy(), 1.0, atol=1e-12)


def test_ssim_constant_shift_closed_form():
    """Constant images: only the luminance term differs from 1."""
    mu_x, mu_y = 0.3, 0.5
    a = np.full((16, 16, 3), mu_x)
    b = np.full((16, 16, 3), mu_y)
    want = (2 * mu_x * mu_y + losses.SSIM_C1) / (mu_x**2 + mu_y**2 + losses.SSIM_C1)
    assert np.allclose(losses.ssim_map(a, b).numpy(), want, atol=1e-10)


def test_ssim_matches_scipy_oracle(rng):
    a, b = imgs(rng, 20)
    got = losses.ssim_map(a, b).numpy()
    want = ref_ssim_map(a, b)
    assert np.abs(got - want).max() < 1e-8


def test_ssim_window_size_guard():
    a = np.zeros((8, 8, 3))
    with pytest.raises(ValueError):
        losses.ssim_map(a, a)


def test_masked_ssim_mean_vs_manual(rng):
    a, b = imgs(rng)
    m = checker_mask()
    smap = losses.ssim_map(a, b).numpy()
    want = smap[m > 0].mean()
    assert float(losses.masked_ssim_mean(a, b, m)) == pytest.approx(want, abs=1e-12)


def test_perceptual_proxy_zero_on_identical(rng):
    a, _ = imgs(rng)
    assert float(losses.perceptual_proxy(a, a)) == 0.0


def test_perceptual_proxy_invariant_to_constant_bias(rng):
    """Gradient-based: adding a constant must not change the distance."""
    a, b = imgs(rng)
    assert float(losses.perceptual_proxy(a + 0.2, b)) == pytest.approx(
        float(losses.perceptual_proxy(a, b)), abs=1e-10)


def test_perceptual_proxy_detects_blur(rng):
    from scipy import ndimage
    a, _ = imgs(rng, 32)
    blurred = ndimage.gaussian_filter(a, sigma=(2, 2, 0))
    assert float(losses.perceptual_proxy(a, blurred)) > \
        10 * float(losses.perceptual_proxy(a, a + 1e-6))


# -- composites ------------------------------------------------------------


def test_dynamic_loss_component_sum(rng):
    a, b = imgs(rng)
    m = checker_mask()
    w = LossWeights(lambda_p=0.1, lambda_s=0.1)
    rep = dynamic_loss(a, b, m, w)
    c = rep.components
    want = float(c["l1"]) + 0.1 * float(c["perceptual"]) + 0.1 * float(c["ssim"])
    assert rep.total_float() == pytest.approx(want, abs=1e-12)
    assert rep.masked_pixel_count == int(m.sum())
    assert not rep.empty_mask


def test_camera_loss_full_image(rng):
    a, b = imgs(rng)
    rep = camera_loss(a, b)
    assert rep.masked_pixel_count == a.shape[0] * a.shape[1]
    assert rep.total_float() > 0


def test_composite_symmetry(rng):
    a, b = imgs(rng)
    m = checker_mask()
    assert dynamic_loss(a, b, m).total_float() == pytest.approx(
        dynamic_loss(b, a, m).total_float(), abs=1e-12)


def test_composite_zero_on_identical(rng):
    a, _ = imgs(rng)
    rep = camera_loss(a, a)
    assert rep.total_float() == pytest.approx(0.0, abs=1e-12)


def test_empty_mask_flagged(rng):
    a, b = imgs(rng)
    rep = dynamic_loss(a, b, np.zeros((16, 16), dtype=np.uint8))
    assert rep.empty_mask and rep.total_float() == 0.0
    assert rep.masked_pixel_count == 0


def test_dynamic_loss_rejects_non_binary_mask(rng):
    a, b = imgs(rng)
    m = np.full((16, 16), 7, dtype=np.uint8)
    with pytest.raises(ValueError):
        dynamic_loss(a, b, m)


def test_composite_differentiable(rng):
    a, _ = imgs(rng)
    pred = torch.tensor(rng.uniform(0, 1, (16, 16, 3)), requires_grad=True)
    rep = dynamic_loss(a, pred, checker_mask())
    rep.total.backward()
    assert torch.all(torch.isfinite(pred.grad))
    assert float(pred.grad.abs().sum()) > 0


def test_loss_report_to_dict(rng):
    a, b = imgs(rng)
    d = camera_loss(a, b).to_dict()
    assert set(d["components"]) == {"l1", "perceptual", "ssim"}
    assert isinstance(d["total"], float)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda_p=-0.1)
    assert LossWeights().lambda_p == 0.1
    assert LossWeights().lambda_s == 0.1
