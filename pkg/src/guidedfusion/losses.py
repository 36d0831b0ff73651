"""Unsupervised fusion objective.

Every term takes the fused luminance ``f_y`` and the two source planes as
``(N, 1, H, W)`` tensors and returns a differentiable scalar averaged over
the batch. No ground-truth fused image is involved anywhere.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

LAMBDA_NAMES = ("lambda_max", "lambda_grad", "lambda_ssim", "lambda_consist")


@dataclass(frozen=True)
class LossWeights:
    # Shipped defaults; tune with the grid search.
    lambda_max: float = 1.0
    lambda_grad: float = 1.0
    lambda_ssim: float = 0.5
    lambda_consist: float = 0.1

    def __post_init__(self):
        vals = self.as_tuple()
        if not all(math.isfinite(v) and v >= 0 for v in vals):
            raise ValueError(f"loss weights must be finite and >= 0, got {vals}")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.lambda_max, self.lambda_grad, self.lambda_ssim, self.lambda_consist)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    l_max: torch.Tensor
    l_grad: torch.Tensor
    l_ssim: torch.Tensor
    l_consist: torch.Tensor

    def floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def _check(*xs: torch.Tensor) -> None:
    shapes = {tuple(x.shape) for x in xs}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")
    if xs[0].ndim != 4 or xs[0].shape[1] != 1:
        raise ValueError(f"expected (N, 1, H, W) planes, got {tuple(xs[0].shape)}")


def loss_max(f_y, vi_y, ir) -> torch.Tensor:
    _check(f_y, vi_y, ir)
    return (f_y - torch.maximum(vi_y, ir)).abs().mean()


def sobel_grad(img: torch.Tensor) -> torch.Tensor:
    """Horizontal and vertical (unnormalised) Sobel responses, reflected borders."""
    if img.ndim != 4 or img.shape[1] != 1:
        raise ValueError(f"expected (N, 1, H, W), got {tuple(img.shape)}")
    if img.shape[-2] < 3 or img.shape[-1] < 3:
        raise ValueError(f"Sobel needs at least 3x3 input, got {tuple(img.shape[-2:])}")
    kx = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]], dtype=img.dtype, device=img.device)
    weight = torch.stack([kx, kx.t()])[:, None]
    return F.conv2d(F.pad(img, (1, 1, 1, 1), mode="reflect"), weight)


def strongest_gradient(g_vi: torch.Tensor, g_ir: torch.Tensor) -> torch.Tensor:
    """Per pixel and orientation, the response with the larger magnitude, sign kept.

    The visible response wins ties.
    """
    return torch.where(g_vi.abs() >= g_ir.abs(), g_vi, g_ir)


def loss_grad(f_y, vi_y, ir) -> torch.Tensor:
    _check(f_y, vi_y, ir)
    target = strongest_gradient(sobel_grad(vi_y), sobel_grad(ir))
    diff = (sobel_grad(f_y) - target).abs()
    # L1 over both orientations, normalised by pixel count
    return diff.sum(dim=1).mean()


def _gauss(dtype, device) -> torch.Tensor:
    r = torch.arange(SSIM_WINDOW, dtype=dtype, device=device) - (SSIM_WINDOW - 1) / 2
    g = torch.exp(-(r**2) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


def _filter(x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    x = F.conv2d(x, g.view(1, 1, 1, -1))
    return F.conv2d(x, g.view(1, 1, -1, 1))


def ssim(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean SSIM over all fully contained 11x11 Gaussian windows, batch-averaged."""
    _check(x, y)
    if x.shape[-2] < SSIM_WINDOW or x.shape[-1] < SSIM_WINDOW:
        raise ValueError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {tuple(x.shape[-2:])}")
    g = _gauss(x.dtype, x.device)
    mx, my = _filter(x, g), _filter(y, g)
    sxx = _filter(x * x, g) - mx * mx
    syy = _filter(y * y, g) - my * my
    sxy = _filter(x * y, g) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return (num / den).mean()


def loss_ssim(f_y, vi_y, ir) -> torch.Tensor:
    _check(f_y, vi_y, ir)
    return (1 - ssim(f_y, vi_y)) + (1 - ssim(f_y, ir))


def loss_consist(f_y, vi_y, ir) -> torch.Tensor:
    _check(f_y, vi_y, ir)
    return (f_y - vi_y).abs().mean() + (f_y - ir).abs().mean()


def total_loss(f_y, vi_y, ir, w: LossWeights | None = None) -> LossBreakdown:
    w = w or LossWeights()
    terms = {
        "l_max": loss_max(f_y, vi_y, ir),
        "l_grad": loss_grad(f_y, vi_y, ir),
        "l_ssim": loss_ssim(f_y, vi_y, ir),
        "l_consist": loss_consist(f_y, vi_y, ir),
    }
    total = (
        w.lambda_max * terms["l_max"]
        + w.lambda_grad * terms["l_grad"]
        + w.lambda_ssim * terms["l_ssim"]
        + w.lambda_consist * terms["l_consist"]
    )
    return LossBreakdown(total=total, **terms)
