"""Feedforward multi-view to UV-Gaussian reconstruction transformer."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
from einops import rearrange

from ..errors import ConfigError, ShapeError
from ..gaussians import NUM_CHANNELS, GaussianCloud, UVBases, UVGaussianMap, decode_uv_map
from ..layers import MLP, Attention


@dataclass(frozen=True)
class ReconConfig:
    image_size: int = 64
    patch: int = 8
    dim: int = 256
    heads: int = 4
    mvbf_blocks: int = 2
    decoder_layers: int = 8
    uv_resolution: int = 64
    uv_patch: int = 8
    face_resolution: int = 32
    face_dim: int = 128

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ConfigError(f"image size {self.image_size} is not divisible by patch size {self.patch}")
        if self.uv_resolution % self.uv_patch:
            raise ConfigError("uv_resolution must be divisible by uv_patch")
        if self.face_resolution % 8:
            raise ConfigError("face_resolution must be divisible by 8")

    @property
    def tokens_per_view(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def injection_layers(self) -> list[int]:
        """1-based decoder layers that receive face features (the latter half)."""
        half = math.ceil(self.decoder_layers / 2)
        return list(range(half + 1, self.decoder_layers + 1))

    def to_dict(self) -> dict:
        return asdict(self)


def camera_vector(camera) -> np.ndarray:
    return np.concatenate([camera.rotation.ravel(), camera.translation])


class ViewEncoder(nn.Module):
    """Patch embedding + learned 2D positional embedding + per-view camera embedding."""

    def __init__(self, cfg: ReconConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(3, cfg.dim, cfg.patch, stride=cfg.patch)
        self.pos_embed = nn.Parameter(torch.randn(cfg.tokens_per_view, cfg.dim) * 0.02)
        self.camera_embed = nn.Linear(12, cfg.dim)

    def forward(self, views: torch.Tensor, cameras: torch.Tensor) -> torch.Tensor:
        """views: (B, N, H, W, 3); cameras: (B, N, 12) -> tokens (B, N, P, D)."""
        b, n, h, w, _ = views.shape
        if h % self.cfg.patch or w % self.cfg.patch:
            raise ShapeError(f"view size {h}x{w} is not divisible by patch size {self.cfg.patch}")
        x = rearrange(views, "b n h w c -> (b n) c h w")
        tok = rearrange(self.patch_embed(x * 2 - 1), "(b n) d gh gw -> b n (gh gw) d", b=b)
        if tok.shape[2] != self.pos_embed.shape[0]:
            raise ShapeError("view resolution does not match the configured image size")
        return tok + self.pos_embed + self.camera_embed(cameras.to(tok.dtype)).unsqueeze(2)


class MVBFBlock(nn.Module):
    """Parallel per-view spatial attention and cross-view attention, fused by a gate.

    View attention runs over the N tokens sharing a spatial index. The fused
    feature goes through a zero-initialized projection, so a fresh block is
    the identity.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.spatial = Attention(dim, heads)
        self.view = Attention(dim, heads)
        self.gate = nn.Linear(2 * dim, dim)
        self.proj = nn.Linear(dim, dim)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, p, d = x.shape
        f_spat = self.spatial(x.reshape(b * n, p, d)).reshape(b, n, p, d)
        xv = rearrange(x, "b n p d -> (b p) n d")
        f_view = rearrange(self.view(xv), "(b p) n d -> b n p d", b=b)
        g = torch.sigmoid(self.gate(torch.cat([f_spat, f_view], dim=-1)))
        return x + self.proj(g * f_spat + (1 - g) * f_view)


class FaceEncoder(nn.Module):
    """Conv encoder: (B, F, F, 3) face crop -> (B, (F/8)^2, face_dim) tokens."""

    def __init__(self, face_dim: int, bias: bool = True):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 32, 3, 2, 1, bias=bias), nn.SiLU(),
            nn.Conv2d(32, 64, 3, 2, 1, bias=bias), nn.SiLU(),
            nn.Conv2d(64, face_dim, 3, 2, 1, bias=bias),
        )

    def forward(self, face: torch.Tensor) -> torch.Tensor:
        x = self.net(face.permute(0, 3, 1, 2) * 2 - 1)
        return rearrange(x, "b d h w -> b (h w) d")


class IdAdapterR(nn.Module):
    """Face encoder, feature expansion to UV width, and per-site tanh-gated cross-attention."""

    def __init__(self, cfg: ReconConfig):
        super().__init__()
        self.encoder = FaceEncoder(cfg.face_dim)
        self.expand = nn.Sequential(nn.Linear(cfg.face_dim, cfg.dim), nn.GELU(), nn.Linear(cfg.dim, cfg.dim))
        self.sites = nn.ModuleDict({str(i): Attention(cfg.dim, cfg.heads) for i in cfg.injection_layers})
        self.gammas = nn.ParameterDict({str(i): nn.Parameter(torch.zeros(())) for i in cfg.injection_layers})

    def features(self, face: torch.Tensor) -> torch.Tensor:
        return self.expand(self.encoder(face))

    def inject(self, layer: int, x: torch.Tensor, face_feats: torch.Tensor) -> torch.Tensor:
        key = str(layer)
        return x + torch.tanh(self.gammas[key]) * self.sites[key](x, face_feats)

    def gate_values(self) -> dict[int, float]:
        return {int(k): float(torch.tanh(g.detach())) for k, g in self.gammas.items()}


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.self_attn = Attention(dim, heads)
        self.cross_attn = Attention(dim, heads, norm_kv=True)
        self.mlp = MLP(dim)


class UVDecoder(nn.Module):
    def __init__(self, cfg: ReconConfig):
        super().__init__()
        self.cfg = cfg
        n_query = (cfg.uv_resolution // cfg.uv_patch) ** 2
        self.queries = nn.Parameter(torch.randn(n_query, cfg.dim) * 0.02)
        self.layers = nn.ModuleList([DecoderLayer(cfg.dim, cfg.heads) for _ in range(cfg.decoder_layers)])


class UVHead(nn.Module):
    """Affine head emitting the 14 UV channels for each UV patch; zero-initialized."""

    def __init__(self, cfg: ReconConfig):
        super().__init__()
        self.cfg = cfg
        self.norm = nn.LayerNorm(cfg.dim)
        self.linear = nn.Linear(cfg.dim, NUM_CHANNELS * cfg.uv_patch**2)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        g = self.cfg.uv_resolution // self.cfg.uv_patch
        y = self.linear(self.norm(x))
        return rearrange(y, "b (gh gw) (c ph pw) -> b c (gh ph) (gw pw)", gh=g, gw=g, c=NUM_CHANNELS,
                         ph=self.cfg.uv_patch, pw=self.cfg.uv_patch)


class ReconModel(nn.Module):
    """encode views -> MVBF blocks -> UV decoder (face injection in the latter half) -> UV channels."""

    def __init__(self, cfg: ReconConfig = ReconConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoder = ViewEncoder(cfg)
        self.mvbf = nn.ModuleList([MVBFBlock(cfg.dim, cfg.heads) for _ in range(cfg.mvbf_blocks)])
        self.uv_decoder = UVDecoder(cfg)
        self.id_adapter_r = IdAdapterR(cfg)
        self.head = UVHead(cfg)

    def groups(self) -> dict[str, nn.Module]:
        return {"encoder": self.encoder, "mvbf": self.mvbf, "uv_decoder": self.uv_decoder,
                "id_adapter_r": self.id_adapter_r, "head": self.head}

    def encode_views(self, views, cameras) -> torch.Tensor:
        return self.encoder(views, cameras)

    def fuse(self, tokens: torch.Tensor) -> torch.Tensor:
        for block in self.mvbf:
            tokens = block(tokens)
        return tokens

    def decode(self, tokens: torch.Tensor, face: torch.Tensor | None) -> torch.Tensor:
        """Fused view tokens (B, N, P, D) -> UV channel maps (B, 14, R, R)."""
        b = tokens.shape[0]
        ctx = tokens.reshape(b, -1, tokens.shape[-1])
        x = self.uv_decoder.queries.unsqueeze(0).expand(b, -1, -1)
        face_feats = None if face is None else self.id_adapter_r.features(face)
        for i, layer in enumerate(self.uv_decoder.layers, start=1):
            x = x + layer.self_attn(x)
            x = x + layer.cross_attn(x, ctx)
            if face_feats is not None and str(i) in self.id_adapter_r.sites:
                x = self.id_adapter_r.inject(i, x, face_feats)
            x = x + layer.mlp(x)
        return self.head(x)

    def forward(self, views: torch.Tensor, cameras: torch.Tensor, face: torch.Tensor | None) -> torch.Tensor:
        return self.decode(self.fuse(self.encode_views(views, cameras)), face)


def predict_uv_map(model: ReconModel, views, cameras, face, bases: UVBases) -> UVGaussianMap:
    """Single-sample convenience wrapper: (N, H, W, 3) views -> UVGaussianMap."""
    cam = torch.as_tensor(np.stack([camera_vector(c) for c in cameras]), dtype=views.dtype)
    out = model(views.unsqueeze(0), cam.unsqueeze(0), None if face is None else face.unsqueeze(0))
    return UVGaussianMap(out[0], bases.mask)


def reconstruct_cloud(model: ReconModel, views, cameras, face, bases: UVBases) -> GaussianCloud:
    return decode_uv_map(predict_uv_map(model, views, cameras, face, bases), bases)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())

