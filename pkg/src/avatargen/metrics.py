"""Image losses and evaluation metrics.

Images are channel-last float tensors in [0, 1] shaped (..., H, W, C).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

PSNR_CAP = 100.0


@dataclass(frozen=True)
class LossWeights:
    lambda_rgb: float = 1.0
    lambda_lpips: float = 1.0
    lambda_face: float = 0.5

    def __post_init__(self):
        for name in ("lambda_rgb", "lambda_lpips", "lambda_face"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


def _check(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check(a, b)
    return ((a - b) ** 2).mean()


def psnr_from_mse(m: float, peak: float = 1.0) -> float:
    if m <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / m))


def psnr(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0) -> float:
    return psnr_from_mse(float(mse(a, b)), peak)


def _gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a: torch.Tensor, b: torch.Tensor, window: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Mean SSIM of the channel-mean grayscale images over valid 11x11 windows."""
    _check(a, b)
    ga = a.mean(-1).reshape(-1, 1, a.shape[-3], a.shape[-2])
    gb = b.mean(-1).reshape(-1, 1, b.shape[-3], b.shape[-2])
    if ga.shape[-1] < window or ga.shape[-2] < window:
        raise ShapeError(f"image smaller than the {window}x{window} SSIM window")
    w = _gaussian_window(window, sigma, ga.dtype).to(ga.device)[None, None]
    c1, c2 = 0.01**2, 0.03**2
    mu_a, mu_b = F.conv2d(ga, w), F.conv2d(gb, w)
    var_a = F.conv2d(ga * ga, w) - mu_a**2
    var_b = F.conv2d(gb * gb, w) - mu_b**2
    cov = F.conv2d(ga * gb, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return (num / den).mean()


class PerceptualNet(nn.Module):
    """Fixed random-feature conv pyramid used as a perceptual distance.

    Weights come from a seeded generator and are never trained.
    """

    def __init__(self, seed: int = 0, widths=(16, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers, cin = [], 3
        for i, cout in enumerate(widths):
            conv = nn.Conv2d(cin, cout, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (cin * 9)))
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.1)
            layers.append(conv)
            cin = cout
        self.stages = nn.ModuleList(layers)
        self.requires_grad_(False)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """x: (..., H, W, 3) in [0, 1] -> per-stage unit-normalized features."""
        h = x.reshape(-1, *x.shape[-3:]).permute(0, 3, 1, 2).to(self.stages[0].weight.dtype) * 2 - 1
        feats = []
        for conv in self.stages:
            h = F.leaky_relu(conv(h), 0.2)
            feats.append(h / (h.norm(dim=1, keepdim=True) + 1e-10))
        return feats


def perceptual(a: torch.Tensor, b: torch.Tensor, net: PerceptualNet) -> torch.Tensor:
    """Mean squared distance between normalized features, averaged over stages."""
    _check(a, b)
    fa, fb = net.features(a), net.features(b)
    return torch.stack([((x - y) ** 2).sum(1).mean() for x, y in zip(fa, fb)]).mean()


def total_loss_stage2(pred_views, target_views, pred_face, target_face, weights: LossWeights,
                      net: PerceptualNet) -> torch.Tensor:
    """rgb MSE + perceptual distance on full views + perceptual distance on face crops.

    Terms with a zero weight are not evaluated; ``pred_face=None`` drops the
    face term.
    """
    loss = pred_views.new_zeros(())
    if weights.lambda_rgb:
        loss = loss + weights.lambda_rgb * mse(pred_views, target_views)
    if weights.lambda_lpips:
        loss = loss + weights.lambda_lpips * perceptual(pred_views, target_views, net)
    if weights.lambda_face and pred_face is not None:
        loss = loss + weights.lambda_face * perceptual(pred_face, target_face, net)
    return loss


def evaluate_images(pred: torch.Tensor, gt: torch.Tensor, net: PerceptualNet | None = None) -> dict:
    """Per-view and mean metrics for (N, H, W, 3) image stacks."""
    _check(pred, gt)
    net = net or PerceptualNet()
    pred, gt = pred.double(), gt.double()
    per_view = []
    with torch.no_grad():
        for p, g in zip(pred, gt):
            m = float(mse(p, g))
            per_view.append({
                "mse": m,
                "psnr": psnr_from_mse(m),
                "ssim": float(ssim(p, g)),
                "perceptual": float(perceptual(p.float(), g.float(), net)),
            })
    agg = {k: sum(v[k] for v in per_view) / max(len(per_view), 1) for k in ("mse", "psnr", "ssim", "perceptual")}
    return {"per_view": per_view, "aggregate": agg}
