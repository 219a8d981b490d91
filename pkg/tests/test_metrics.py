import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from avatargen.errors import ConfigError, ShapeError
from avatargen.metrics import (
    PSNR_CAP, LossWeights, PerceptualNet, evaluate_images, mse, perceptual, psnr, psnr_from_mse, ssim,
    total_loss_stage2,
)


@pytest.fixture(scope="module")
def net():
    return PerceptualNet()


def img(seed, shape=(2, 24, 24, 3)):
    return torch.rand(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def checkerboard(n=16):
    i, j = np.indices((n, n))
    return torch.as_tensor(((i + j) % 2).astype(np.float64))[..., None].expand(n, n, 3)


# --- mse / psnr --------------------------------------------------------------------------


def test_mse_examples():
    z = torch.zeros(4, 8, 8, 3, dtype=torch.float64)
    assert mse(z, z) == 0
    assert mse(z, torch.ones_like(z)) == 1
    assert abs(float(mse(z, torch.full_like(z, 0.1))) - 0.01) < 1e-15


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        mse(torch.zeros(2, 8, 8, 3), torch.zeros(1, 8, 8, 3))


def test_psnr_examples():
    assert psnr_from_mse(0.01) == 20.0
    x = img(0)
    assert psnr(x, x) == PSNR_CAP
    # closed form at MSE 0.0052
    assert abs(psnr_from_mse(0.0052) - 22.84) < 0.005


@settings(max_examples=100)
@given(st.floats(1e-9, 1.0), st.floats(1e-9, 1.0))
def test_psnr_decreases_with_mse(a, b):
    if a < b:
        assert psnr_from_mse(a) >= psnr_from_mse(b)
        if psnr_from_mse(a) < PSNR_CAP:
            assert psnr_from_mse(a) > psnr_from_mse(b)


# --- ssim ----------------------------------------------------------------------------------


def ssim_oracle(a, b, size=11, sigma=1.5):
    """Direct per-window SSIM on grayscale channel means."""
    ga, gb = a.mean(-1).numpy(), b.mean(-1).numpy()
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for i in range(ga.shape[0] - size + 1):
        for j in range(ga.shape[1] - size + 1):
            pa, pb = ga[i:i + size, j:j + size], gb[i:i + size, j:j + size]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va, vb = (w * (pa - ma) ** 2).sum(), (w * (pb - mb) ** 2).sum()
            cv = (w * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cv + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_ssim_identity():
    x = img(1)
    assert abs(float(ssim(x, x)) - 1.0) < 1e-12


def test_ssim_constant_half_vs_its_inverse():
    a = torch.full((16, 16, 3), 0.5, dtype=torch.float64)
    assert abs(float(ssim(a, 1 - a)) - 1.0) < 1e-12


def test_ssim_checkerboard_inverted_is_negative():
    a = checkerboard()
    s = float(ssim(a, 1 - a))
    assert s < 0
    assert abs(s - ssim_oracle(a, 1 - a)) < 1e-9


def test_ssim_matches_direct_windows():
    a, b = img(2, (20, 17, 3)), img(3, (20, 17, 3))
    assert abs(float(ssim(a, b)) - ssim_oracle(a, b)) < 1e-9


def test_ssim_window_too_large():
    with pytest.raises(ShapeError):
        ssim(torch.zeros(8, 8, 3), torch.zeros(8, 8, 3))


# --- perceptual ----------------------------------------------------------------------------


def test_perceptual_identity_and_symmetry(net):
    a, b = img(4).float(), img(5).float()
    assert float(perceptual(a, a, net)) == 0.0
    assert float(perceptual(a, b, net)) == float(perceptual(b, a, net))


def test_perceptual_positive_for_brightened(net):
    a = img(6).float()
    assert float(perceptual(a, (a + 0.5).clamp(0, 1), net)) > 1e-3


def test_perceptual_net_is_seeded():
    a, b = PerceptualNet(seed=3), PerceptualNet(seed=3)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
        assert not pa.requires_grad
    assert not torch.equal(a.stages[0].weight, PerceptualNet(seed=4).stages[0].weight)


def test_perceptual_batch_order_invariant(net):
    a, b = img(7, (4, 24, 24, 3)).float(), img(8, (4, 24, 24, 3)).float()
    p = torch.tensor([2, 0, 3, 1])
    torch.testing.assert_close(perceptual(a, b, net), perceptual(a[p], b[p], net), atol=1e-6, rtol=1e-6)


# --- stage-2 loss ---------------------------------------------------------------------------


def test_loss_weights_nonnegative():
    with pytest.raises(ConfigError):
        LossWeights(lambda_rgb=-1.0)


def test_total_loss_examples(net):
    v, f = img(9).float(), img(10, (1, 16, 16, 3)).float()
    assert float(total_loss_stage2(v, v, f, f, LossWeights(), net)) == 0.0
    pf = img(11, (1, 16, 16, 3)).float()
    face_only = total_loss_stage2(img(12).float(), v, pf, f, LossWeights(0, 0, 1), net)
    assert float(face_only) == float(perceptual(pf, f, net))
    zeros = torch.zeros(2, 16, 16, 3, dtype=torch.float64)
    rgb = total_loss_stage2(zeros, torch.full_like(zeros, 0.2), None, None, LossWeights(1, 0, 0), net)
    assert abs(float(rgb) - 0.04) < 1e-15


def test_total_loss_is_exact_weighted_sum(net):
    pv, tv, pf, tf = img(13).float(), img(14).float(), img(15, (1, 16, 16, 3)).float(), img(16, (1, 16, 16, 3)).float()
    w = LossWeights(0.7, 0.2, 0.4)
    expect = 0.7 * mse(pv, tv) + 0.2 * perceptual(pv, tv, net) + 0.4 * perceptual(pf, tf, net)
    torch.testing.assert_close(total_loss_stage2(pv, tv, pf, tf, w, net), expect)


# --- evaluation report ------------------------------------------------------------------------


def test_evaluate_identical_report(net):
    x = img(17, (3, 24, 24, 3))
    rep = evaluate_images(x, x, net)
    assert len(rep["per_view"]) == 3
    assert rep["aggregate"] == {"mse": 0.0, "psnr": PSNR_CAP, "ssim": pytest.approx(1.0, abs=1e-12),
                                "perceptual": 0.0}
