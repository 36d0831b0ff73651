import numpy as np
import pytest
import torch

import oracles
from guidedfusion.losses import (
    LossWeights,
    loss_consist,
    loss_grad,
    loss_max,
    loss_ssim,
    sobel_grad,
    ssim,
    strongest_gradient,
    total_loss,
)

TERMS = {"max": loss_max, "grad": loss_grad, "ssim": loss_ssim, "consist": loss_consist}


def planes():
    yy, xx = np.mgrid[0:32, 0:40].astype(float)
    vi = 0.5 + 0.4 * np.sin(xx / 3) * np.cos(yy / 5)
    ir = np.clip(0.2 + 0.6 * np.exp(-((xx - 20) ** 2 + (yy - 16) ** 2) / 60), 0, 1)
    return 0.5 * (vi + ir), vi, ir


def t4(a):
    return torch.from_numpy(np.ascontiguousarray(a))[None, None]


@pytest.mark.parametrize(
    "name,expected",
    # DERIVED: loop oracles on closed-form planes, frozen
    [("max", 0.13660486411482886), ("grad", 0.35016895021043304),
     ("ssim", 0.9233746931045728), ("consist", 0.2732097282296577)],
)
def test_frozen_values(name, expected):
    f, vi, ir = (t4(p) for p in planes())
    assert float(TERMS[name](f, vi, ir)) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_terms_match_loop_oracles(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(11, 20, size=2)
    f, vi, ir = rng.random((3, h, w))
    for name, fn in TERMS.items():
        ref = getattr(oracles, f"loss_{name}")(f, vi, ir)
        assert float(fn(t4(f), t4(vi), t4(ir))) == pytest.approx(ref, abs=1e-10), name


def test_batch_mean():
    rng = np.random.default_rng(9)
    f, vi, ir = (torch.from_numpy(rng.random((3, 1, 12, 12))) for _ in range(3))
    for fn in TERMS.values():
        each = [float(fn(f[i : i + 1], vi[i : i + 1], ir[i : i + 1])) for i in range(3)]
        assert float(fn(f, vi, ir)) == pytest.approx(np.mean(each), rel=1e-12)


def test_sobel_step_response():
    x = torch.zeros(1, 1, 5, 6, dtype=torch.float64)
    x[..., 3:] = 1.0
    g = sobel_grad(x)
    assert torch.allclose(g[0, 0, :, 2:4], torch.tensor(4.0, dtype=torch.float64))
    assert g[0, 1].abs().max() == 0


def test_strongest_gradient_keeps_sign_and_prefers_visible():
    vi = torch.tensor([1.0, -3.0, 2.0])
    ir = torch.tensor([-2.0, 1.0, -2.0])
    assert strongest_gradient(vi, ir).tolist() == [-2.0, -3.0, 2.0]


def test_zero_when_sources_agree():
    rng = np.random.default_rng(4)
    x = t4(rng.random((16, 16)))
    for fn in TERMS.values():
        assert float(fn(x, x, x)) == pytest.approx(0.0, abs=1e-12)
    assert float(ssim(x, x)) == pytest.approx(1.0, abs=1e-12)


def test_total_is_weighted_sum():
    f, vi, ir = (t4(p) for p in planes())
    w = LossWeights(2.0, 0.5, 0.25, 3.0)
    parts = total_loss(f, vi, ir, w)
    expect = 2.0 * parts.l_max + 0.5 * parts.l_grad + 0.25 * parts.l_ssim + 3.0 * parts.l_consist
    assert float(parts.total) == pytest.approx(float(expect), rel=1e-12)
    assert set(parts.floats()) == {"total", "l_max", "l_grad", "l_ssim", "l_consist"}


def test_default_weights():
    assert LossWeights().as_tuple() == (1.0, 1.0, 0.5, 0.1)


@pytest.mark.parametrize("bad", [(-1, 1, 1, 1), (float("nan"), 1, 1, 1), (0, 0, 0, 0)])
def test_weight_validation(bad):
    with pytest.raises(ValueError):
        LossWeights(*bad)


def test_input_validation():
    with pytest.raises(ValueError, match="shape mismatch"):
        loss_max(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5), torch.zeros(1, 1, 4, 4))
    with pytest.raises(ValueError):
        loss_consist(torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 4, 4))
    with pytest.raises(ValueError, match="11x11"):
        loss_ssim(*(torch.zeros(1, 1, 10, 16) for _ in range(3)))


@pytest.mark.parametrize("name", list(TERMS))
def test_gradcheck(name):
    rng = np.random.default_rng(11)
    vi, ir = (t4(rng.random((12, 13))) for _ in range(2))
    # keep f away from vi, ir and max(vi, ir) so |.| stays differentiable under perturbation
    f = t4(rng.random((12, 13)) * 0.8 + 0.1).requires_grad_(True)
    ok = torch.autograd.gradcheck(lambda x: TERMS[name](x, vi, ir), (f,), eps=1e-7, atol=1e-5, nondet_tol=0)
    assert ok


def const(v, h=16, w=16):
    return torch.full((1, 1, h, w), float(v), dtype=torch.float64)


def test_constant_plane_arithmetic():
    assert float(loss_max(const(0.5), const(0.2), const(0.6))) == pytest.approx(0.1)
    for t in (0.0, 0.3, 1.0):
        assert float(loss_consist(const(t), const(0.0), const(1.0))) == pytest.approx(1.0)


def test_sobel_on_constant_and_ramp():
    assert sobel_grad(const(0.7)).abs().max() < 1e-12
    ramp = torch.arange(8, dtype=torch.float64).repeat(6, 1)[None, None] * 0.1
    g = sobel_grad(ramp)
    # stencil weights 1+2+1 on a slope of 2 * 0.1 per centred difference
    assert torch.allclose(g[0, 0, :, 1:-1], torch.tensor(0.8, dtype=torch.float64))
    assert g[0, 1, 1:-1, 1:-1].abs().max() < 1e-12


def test_grad_loss_ignores_flat_infrared():
    rng = np.random.default_rng(2)
    vi = t4(rng.random((12, 12)))
    assert float(loss_grad(vi, vi, const(0.4, 12, 12))) == pytest.approx(0.0, abs=1e-12)


def test_ssim_closed_forms():
    half = torch.zeros(1, 1, 16, 16, dtype=torch.float64)
    half[..., 8:] = 1.0
    assert float(ssim(half, 1 - half)) < 0
    assert float(ssim(half, 1 - half)) == pytest.approx(oracles.ssim(half[0, 0].numpy(), 1 - half[0, 0].numpy()), abs=1e-12)
    c1 = 0.01**2
    mx, my = 0.3, 0.4
    assert float(ssim(const(mx), const(my))) == pytest.approx((2 * mx * my + c1) / (mx**2 + my**2 + c1), abs=1e-12)


def test_ssim_loss_reduces_to_one_term_and_is_bounded():
    rng = np.random.default_rng(8)
    vi, ir = t4(rng.random((14, 14))), t4(rng.random((14, 14)))
    assert float(loss_ssim(vi, vi, ir)) == pytest.approx(1 - float(ssim(vi, ir)), abs=1e-12)
    assert 0 <= float(loss_ssim(1 - vi, vi, ir)) <= 4
