"""Differentiable EWA splatting of 3D Gaussians with front-to-back compositing.

The rasterizer works on sparse (pixel, primitive) pairs: each projected
Gaussian only touches pixels inside its 3-sigma ellipse, pairs are ordered
per pixel by depth, packed into a (pixels x max_depth_complexity) table and
composited with a cumulative product. Everything downstream of the integer
bookkeeping is plain autograd.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .gaussians import GaussianCloud, covariance
from .geometry import NEAR_PLANE, CameraParams

BLUR = 0.3
SIGMA_CUTOFF = 3.0
MIN_WEIGHT = 1e-4
WHITE = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class ProjectedGaussians:
    mean2d: torch.Tensor  # (M, 2) pixels
    cov2d: torch.Tensor  # (M, 2, 2) pixels^2
    depth: torch.Tensor  # (M,) camera z
    colors: torch.Tensor  # (M, 3)
    opacities: torch.Tensor  # (M,)
    visible: torch.Tensor  # (M,) bool
    texel_index: torch.Tensor  # (M,) tie-break key

    def __len__(self) -> int:
        return self.mean2d.shape[0]


@dataclass(frozen=True)
class RenderOutput:
    rgb: torch.Tensor  # (H, W, 3)
    alpha: torch.Tensor  # (H, W)
    transmittance: torch.Tensor  # (H, W)
    weight_sum: torch.Tensor  # (H, W) sum_i w_i T_i


def _camera_tensors(camera: CameraParams, dtype, device):
    rot = torch.as_tensor(camera.rotation, dtype=dtype, device=device)
    trans = torch.as_tensor(camera.translation, dtype=dtype, device=device)
    return rot, trans


def project_gaussians(cloud: GaussianCloud, camera: CameraParams, blur: float = BLUR,
                      near: float = NEAR_PLANE) -> ProjectedGaussians:
    """Perspective means and EWA screen covariances J W Sigma W^T J^T + blur I."""
    dtype, device = cloud.means.dtype, cloud.means.device
    rot, trans = _camera_tensors(camera, dtype, device)
    p = cloud.means @ rot.T + trans
    z = p[:, 2]
    visible = z > near
    z_safe = torch.where(visible, z, torch.ones_like(z))
    x, y = p[:, 0], p[:, 1]
    u = camera.fx * x / z_safe + camera.cx
    v = camera.fy * y / z_safe + camera.cy
    zeros = torch.zeros_like(z)
    jac = torch.stack(
        [
            torch.stack([camera.fx / z_safe, zeros, -camera.fx * x / z_safe**2], -1),
            torch.stack([zeros, camera.fy / z_safe, -camera.fy * y / z_safe**2], -1),
        ],
        dim=-2,
    )  # (M, 2, 3)
    sigma = covariance(cloud.rotations, cloud.scales)
    t = jac @ rot
    cov2d = t @ sigma @ t.transpose(-1, -2)
    cov2d = cov2d + blur * torch.eye(2, dtype=dtype, device=device)
    finite = torch.isfinite(cov2d).all(dim=(-1, -2)) & torch.isfinite(u) & torch.isfinite(v)
    return ProjectedGaussians(
        mean2d=torch.stack([u, v], -1),
        cov2d=cov2d,
        depth=z,
        colors=cloud.colors,
        opacities=cloud.opacities,
        visible=visible & finite,
        texel_index=cloud.texel_index,
    )


def _candidate_pairs(mean2d, radius, width, height):
    """(gaussian, pixel) candidates inside each square footprint, grouped by radius."""
    device = mean2d.device
    center = torch.round(mean2d).long()
    gs, pix = [], []
    remaining = torch.ones(len(radius), dtype=torch.bool, device=device)
    bound = 1
    while bool(remaining.any()):
        sel = torch.nonzero(remaining & (radius <= bound)).squeeze(1)
        if len(sel):
            rng = torch.arange(-bound, bound + 1, device=device)
            dy, dx = torch.meshgrid(rng, rng, indexing="ij")
            px = center[sel, 0:1] + dx.reshape(1, -1)
            py = center[sel, 1:2] + dy.reshape(1, -1)
            ok = (px >= 0) & (px < width) & (py >= 0) & (py < height)
            g = sel.unsqueeze(1).expand_as(px)
            gs.append(g[ok])
            pix.append((py * width + px)[ok])
            remaining[sel] = False
        bound *= 2
    if not gs:
        empty = torch.zeros(0, dtype=torch.long, device=device)
        return empty, empty
    return torch.cat(gs), torch.cat(pix)


def rasterize(projected: ProjectedGaussians, width: int, height: int, background=WHITE) -> RenderOutput:
    """Front-to-back alpha compositing of projected Gaussians.

    Ties in depth are broken by source texel index. Pairs beyond 3 sigma or
    with weight below 1e-4 are skipped.
    """
    dtype, device = projected.mean2d.dtype, projected.mean2d.device
    bg = torch.as_tensor(background, dtype=dtype, device=device)
    npix = width * height
    rgb = bg.expand(npix, 3)
    trans = torch.ones(npix, dtype=dtype, device=device)
    weight_sum = torch.zeros(npix, dtype=dtype, device=device)

    vis = torch.nonzero(projected.visible).squeeze(1)
    if len(vis):
        mean2d = projected.mean2d[vis]
        cov = projected.cov2d[vis]
        a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
        det = a * c - b * b
        conic = torch.stack([c / det, -b / det, a / det], -1)
        with torch.no_grad():
            lam = 0.5 * (a + c) + torch.sqrt((0.5 * (a - c)) ** 2 + b * b)
            radius = torch.ceil(SIGMA_CUTOFF * torch.sqrt(lam)).long().clamp(min=1)
            order = _depth_rank(projected.depth[vis], projected.texel_index[vis])
            g, pix = _candidate_pairs(mean2d.detach(), radius, width, height)
        px = (pix % width).to(dtype)
        py = torch.div(pix, width, rounding_mode="floor").to(dtype)
        dx = px - mean2d[g, 0]
        dy = py - mean2d[g, 1]
        ca, cb, cc = conic[g, 0], conic[g, 1], conic[g, 2]
        maha = ca * dx * dx + 2 * cb * dx * dy + cc * dy * dy
        w = projected.opacities[vis][g] * torch.exp(-0.5 * maha)
        with torch.no_grad():
            keep = (maha <= SIGMA_CUTOFF**2) & (w >= MIN_WEIGHT)
        g, pix, w = g[keep], pix[keep], w[keep]
        if len(g):
            with torch.no_grad():
                key = pix * len(vis) + order[g]
                perm = torch.argsort(key, stable=True)
                pix_sorted = pix[perm]
                uniq, inverse, counts = torch.unique_consecutive(pix_sorted, return_inverse=True, return_counts=True)
                starts = torch.cumsum(counts, 0) - counts
                slot = torch.arange(len(perm), device=device) - starts[inverse]
                depth_max = int(counts.max())
                flat = inverse * depth_max + slot
            table = torch.zeros(len(uniq) * depth_max, dtype=dtype, device=device)
            table = table.index_put((flat,), w[perm]).reshape(len(uniq), depth_max)
            col = torch.zeros(len(uniq) * depth_max, 3, dtype=dtype, device=device)
            col = col.index_put((flat,), projected.colors[vis][g[perm]]).reshape(len(uniq), depth_max, 3)
            t_incl = torch.cumprod(1.0 - table, dim=1)
            t_excl = torch.cat([torch.ones_like(t_incl[:, :1]), t_incl[:, :-1]], dim=1)
            contrib = table * t_excl
            t_final = t_incl[:, -1]
            px_rgb = (contrib.unsqueeze(-1) * col).sum(1) + t_final.unsqueeze(-1) * bg
            rgb = rgb.index_put((uniq,), px_rgb)
            trans = trans.index_put((uniq,), t_final)
            weight_sum = weight_sum.index_put((uniq,), contrib.sum(1))
    return RenderOutput(
        rgb=rgb.reshape(height, width, 3),
        alpha=(1.0 - trans).reshape(height, width),
        transmittance=trans.reshape(height, width),
        weight_sum=weight_sum.reshape(height, width),
    )


def _depth_rank(depth: torch.Tensor, texel: torch.Tensor) -> torch.Tensor:
    by_texel = torch.argsort(texel, stable=True)
    by_depth = by_texel[torch.argsort(depth[by_texel], stable=True)]
    rank = torch.empty_like(by_depth)
    rank[by_depth] = torch.arange(len(by_depth), device=depth.device)
    return rank


def render(cloud: GaussianCloud, camera: CameraParams, background=WHITE, blur: float = BLUR) -> RenderOutput:
    return rasterize(project_gaussians(cloud, camera, blur=blur), camera.width, camera.height, background)


def render_views(cloud: GaussianCloud, cameras, background=WHITE) -> torch.Tensor:
    """Stacked (N, H, W, 3) renders of one cloud."""
    return torch.stack([render(cloud, cam, background).rgb for cam in cameras])

