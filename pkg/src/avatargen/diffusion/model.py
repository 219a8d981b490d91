"""Multi-view pixel-space denoiser with pose, reference, face and text adapters.

Images and latents are channel-first inside the model: views (B, N, C, H, W).
The backbone is a small 4-stage UNet (strides 1, 2, 4, 8). Attention sites
sit at the configured strides in the encoder and decoder and in the middle
block. Every site runs

    h_out = SelfAttn(h) + GlobalCross(h, h_ref) + LocalCross(h, h_face) + RowWise(h) + h

followed by text cross-attention and an MLP. Only SelfAttn and the MLP belong
to the backbone; every other branch has a zero-initialized output projection.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from ..data import VOCAB
from ..errors import ConfigError, ShapeError
from ..layers import MLP, Attention, timestep_embedding


@dataclass(frozen=True)
class DiffusionConfig:
    image_size: int = 64
    widths: tuple = (32, 64, 96, 128)
    attn_strides: tuple = (4, 8)
    heads: int = 4
    ctx_dim: int = 128
    time_dim: int = 128
    face_resolution: int = 32
    face_tokens: int = 8
    vocab_size: int = len(VOCAB)
    max_text_len: int = 32
    pose_window: int = 8
    pose_bias: bool = True
    face_bias: bool = True

    def __post_init__(self):
        if len(self.widths) != 4:
            raise ConfigError("the denoiser has exactly 4 stages")
        if self.image_size % 8:
            raise ConfigError("image_size must be divisible by 8")
        if self.face_resolution % 8:
            raise ConfigError("face_resolution must be divisible by 8")
        if any(s not in (1, 2, 4, 8) for s in self.attn_strides):
            raise ConfigError("attn_strides must be among 1, 2, 4, 8")
        if any(w % 8 for w in self.widths):
            raise ConfigError("stage widths must be multiples of 8 (group norm)")

    @property
    def site_names(self) -> list[str]:
        enc = [f"enc{i}" for i in range(4) if 2**i in self.attn_strides]
        dec = [f"dec{i}" for i in reversed(range(4)) if 2**i in self.attn_strides]
        return enc + ["mid"] + dec

    def site_width(self, name: str) -> int:
        return self.widths[3] if name == "mid" else self.widths[int(name[3])]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionConfig":
        d = dict(d)
        for k in ("widths", "attn_strides"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class ConditionSet:
    """Batched conditions. Images are channel-first in [0, 1].

    text: (B, L) token ids (0 = padding); reference: (B, 3, H, W);
    face: (B, 3, F, F); geometry: (B, N, 3, H, W); skeleton: (B, N, 1, H, W).
    Drop flags are (B,) booleans; None means "keep".
    """

    text: torch.Tensor
    reference: torch.Tensor
    face: torch.Tensor
    geometry: torch.Tensor
    skeleton: torch.Tensor
    drop_text: torch.Tensor | None = None
    drop_reference: torch.Tensor | None = None
    drop_face: torch.Tensor | None = None
    drop_pose: torch.Tensor | None = None

    def __post_init__(self):
        if self.geometry.shape[:2] != self.skeleton.shape[:2]:
            raise ShapeError("geometry and skeleton maps must share batch and view counts")
        if self.geometry.shape[-2:] != self.skeleton.shape[-2:]:
            raise ShapeError("geometry and skeleton maps must share resolution")

    @property
    def batch(self) -> int:
        return self.reference.shape[0]

    @property
    def views(self) -> int:
        return self.geometry.shape[1]

    def _flag(self, name: str) -> torch.Tensor:
        f = getattr(self, name)
        return torch.zeros(self.batch, dtype=torch.bool) if f is None else f.bool()

    def with_drops(self, text=None, reference=None, face=None, pose=None) -> "ConditionSet":
        return ConditionSet(self.text, self.reference, self.face, self.geometry, self.skeleton,
                            text, reference, face, pose)

    def dropped_all(self) -> "ConditionSet":
        on = torch.ones(self.batch, dtype=torch.bool)
        return self.with_drops(on, on, on, on)


# ---------------------------------------------------------------------------
# backbone


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class BackboneSite(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.self_attn = Attention(dim, heads)
        self.mlp = MLP(dim)


class UNetBackbone(nn.Module):
    def __init__(self, cfg: DiffusionConfig):
        super().__init__()
        c = cfg.widths
        self.cfg = cfg
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(),
                                      nn.Linear(cfg.time_dim, cfg.time_dim))
        self.conv_in = nn.Conv2d(3, c[0], 3, padding=1)
        self.enc = nn.ModuleList([ResBlock(c[max(i - 1, 0)], c[i], cfg.time_dim) for i in range(4)])
        self.down = nn.ModuleList([nn.Conv2d(c[i], c[i], 3, stride=2, padding=1) for i in range(3)])
        self.mid1 = ResBlock(c[3], c[3], cfg.time_dim)
        self.mid2 = ResBlock(c[3], c[3], cfg.time_dim)
        self.dec = nn.ModuleList([ResBlock(2 * c[i], c[i], cfg.time_dim) for i in range(4)])
        self.up = nn.ModuleList([nn.Conv2d(c[i + 1], c[i], 3, padding=1) for i in range(3)])
        self.out_norm = nn.GroupNorm(8, c[0])
        self.out_conv = nn.Conv2d(c[0], 3, 3, padding=1)
        self.sites = nn.ModuleDict({n: BackboneSite(cfg.site_width(n), cfg.heads) for n in cfg.site_names})

    def run(self, x: torch.Tensor, t: torch.Tensor, site_fn, pose_feats=None) -> torch.Tensor:
        """x: (M, 3, H, W) with M = batch * views; t: (M,) timesteps.

        ``site_fn(name, tokens (M, HW, C), (h, w))`` computes each attention
        site; ``pose_feats`` are four (M, C_i, H_i, W_i) maps added after
        the encoder resblocks.
        """
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim).to(x.dtype))

        def site(name, h):
            if name not in self.sites:
                return h
            hw = h.shape[-2:]
            tok = site_fn(name, rearrange(h, "m c h w -> m (h w) c"), hw)
            return rearrange(tok, "m (h w) c -> m c h w", h=hw[0])

        h = self.conv_in(x)
        skips = []
        for i in range(4):
            h = self.enc[i](h, temb)
            if pose_feats is not None:
                h = h + pose_feats[i]
            h = site(f"enc{i}", h)
            skips.append(h)
            if i < 3:
                h = self.down[i](h)
        h = self.mid2(site("mid", self.mid1(h, temb)), temb)
        for i in reversed(range(4)):
            h = self.dec[i](torch.cat([h, skips[i]], dim=1), temb)
            h = site(f"dec{i}", h)
            if i > 0:
                h = self.up[i - 1](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.out_conv(F.silu(self.out_norm(h)))

    def plain_site(self, name: str, h: torch.Tensor) -> torch.Tensor:
        s = self.sites[name]
        h = s.self_attn(h) + h
        return h + s.mlp(h)


# ---------------------------------------------------------------------------
# adapters


class WindowAttention(nn.Module):
    """Residual self-attention inside non-overlapping square windows."""

    def __init__(self, dim: int, heads: int, window: int, bias: bool = True):
        super().__init__()
        self.window = window
        self.attn = Attention(dim, heads, bias=bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _, _, h, w = x.shape
        ws = min(self.window, h, w)
        if h % ws or w % ws:
            raise ShapeError(f"feature map {h}x{w} is not divisible by window {ws}")
        tok = rearrange(x, "m c (gh wh) (gw ww) -> (m gh gw) (wh ww) c", wh=ws, ww=ws)
        tok = tok + self.attn(tok)
        return rearrange(tok, "(m gh gw) (wh ww) c -> m c (gh wh) (gw ww)", gh=h // ws, gw=w // ws, wh=ws)


class PoseBranch(nn.Module):
    def __init__(self, cin: int, cfg: DiffusionConfig):
        super().__init__()
        c, b = cfg.widths, cfg.pose_bias
        self.convs = nn.ModuleList([nn.Conv2d(cin if i == 0 else c[i - 1], c[i], 3, stride=1 if i == 0 else 2,
                                              padding=1, bias=b) for i in range(4)])
        self.attn = nn.ModuleList([WindowAttention(c[i], cfg.heads, cfg.pose_window, bias=b) for i in range(4)])

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for conv, attn in zip(self.convs, self.attn):
            x = attn(F.silu(conv(x)))
            feats.append(x)
        return feats


class PoseAdapter(nn.Module):
    """Geometry and skeleton maps -> four-scale feature pyramid matching the encoder widths."""

    def __init__(self, cfg: DiffusionConfig):
        super().__init__()
        self.geometry = PoseBranch(3, cfg)
        self.skeleton = PoseBranch(1, cfg)
        self.proj = nn.ModuleList([nn.Conv2d(w, w, 1, bias=cfg.pose_bias) for w in cfg.widths])
        for p in self.proj:
            nn.init.zeros_(p.weight)
            if p.bias is not None:
                nn.init.zeros_(p.bias)

    def forward(self, geometry: torch.Tensor, skeleton: torch.Tensor) -> list[torch.Tensor]:
        """geometry: (M, 3, H, W), skeleton: (M, 1, H, W) -> 4 maps at strides 1, 2, 4, 8."""
        if geometry.shape[0] != skeleton.shape[0]:
            raise ShapeError("geometry and skeleton view counts differ")
        fg, fs = self.geometry(geometry), self.skeleton(skeleton)
        return [proj(a + b) for proj, a, b in zip(self.proj, fg, fs)]


class TextEncoder(nn.Module):
    """Token embedding + one self-attention layer; also owns the per-site text cross-attention."""

    def __init__(self, cfg: DiffusionConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.ctx_dim)
        self.pos = nn.Parameter(torch.randn(cfg.max_text_len, cfg.ctx_dim) * 0.02)
        self.attn = Attention(cfg.ctx_dim, cfg.heads)
        self.mlp = MLP(cfg.ctx_dim)
        self.norm = nn.LayerNorm(cfg.ctx_dim)
        self.null = nn.Parameter(torch.randn(1, cfg.ctx_dim) * 0.02)
        self.cross = nn.ModuleDict({n: Attention(cfg.site_width(n), cfg.heads, kv_dim=cfg.ctx_dim, zero_init=True,
                                                 norm_kv=True) for n in cfg.site_names})

    def forward(self, tokens: torch.Tensor, drop: torch.Tensor | None = None):
        """tokens: (B, L) ids -> (embeddings (B, L', D), key mask (B, L')).

        Rows that are dropped or contain no tokens get the learned null
        embedding as their single valid key.
        """
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        if tokens.ndim != 2:
            raise ShapeError("tokens must be (B, L)")
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.cfg.vocab_size):
            raise ValueError("token id outside the vocabulary")
        if tokens.shape[1] > self.cfg.max_text_len:
            raise ShapeError(f"text longer than {self.cfg.max_text_len} tokens")
        b, n = tokens.shape
        valid = tokens != 0
        if drop is not None:
            valid = valid & ~drop.bool()[:, None]
        use_null = ~valid.any(dim=1)
        if n == 0:
            tokens = tokens.new_zeros(b, 1)
            valid = torch.zeros(b, 1, dtype=torch.bool)
        x = self.embed(tokens) + self.pos[: tokens.shape[1]]
        x = x + self.attn(x, mask=valid | use_null[:, None])
        x = self.norm(x + self.mlp(x))
        # null rows: a single null key in slot 0
        null_row = torch.cat([self.null, self.null.new_zeros(tokens.shape[1] - 1, self.cfg.ctx_dim)])
        x = torch.where(use_null[:, None, None], null_row.expand_as(x), x)
        first = torch.zeros_like(valid)
        first[:, 0] = True
        mask = torch.where(use_null[:, None], first, valid)
        return x, mask


class FaceEncoder(nn.Module):
    """Conv encoder -> pooled feature -> K tokens at the context width."""

    def __init__(self, cfg: DiffusionConfig):
        super().__init__()
        self.cfg = cfg
        b = cfg.face_bias
        self.convs = nn.Sequential(
            nn.Conv2d(3, 32, 3, 2, 1, bias=b), nn.SiLU(),
            nn.Conv2d(32, 64, 3, 2, 1, bias=b), nn.SiLU(),
            nn.Conv2d(64, 128, 3, 2, 1, bias=b),
        )
        self.proj = nn.Linear(128, cfg.face_tokens * cfg.ctx_dim)
        self.null = nn.Parameter(torch.randn(cfg.face_tokens, cfg.ctx_dim) * 0.02)

    def features(self, face: torch.Tensor) -> torch.Tensor:
        """(B, 3, F, F) in [0, 1] -> (B, 128) pre-projection features."""
        r = self.cfg.face_resolution
        if face.shape[-3:] != (3, r, r):
            raise ShapeError(f"face image must be 3x{r}x{r}, got {tuple(face.shape[-3:])}")
        return self.convs(face).mean(dim=(2, 3))

    def forward(self, face: torch.Tensor, drop: torch.Tensor | None = None) -> torch.Tensor:
        tok = self.proj(self.features(face)).view(face.shape[0], self.cfg.face_tokens, self.cfg.ctx_dim)
        if drop is None:
            return tok
        return torch.where(drop.bool()[:, None, None], self.null.expand_as(tok), tok)


class MVAttention(nn.Module):
    """Reference cross-attention and row-wise cross-view attention of one site."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.global_cross = Attention(dim, heads, zero_init=True, norm_kv=True)
        self.row_wise = Attention(dim, heads, zero_init=True)


def row_wise_attention(attn: Attention, h: torch.Tensor, views: int, hw) -> torch.Tensor:
    """Joint attention over all tokens sharing a row index across the N views.

    h: (B*N, H*W, C) -> same shape.
    """
    rows = rearrange(h, "(b n) (h w) c -> (b h) (n w) c", n=views, h=hw[0])
    out = attn(rows)
    return rearrange(out, "(b h) (n w) c -> (b n) (h w) c", n=views, h=hw[0])


def mv_attention_block(site: BackboneSite, mv: MVAttention | None, local_cross: Attention | None,
                       h_in: torch.Tensor, views: int, hw, h_ref=None, h_face=None) -> torch.Tensor:
    """SelfAttn + GlobalCross(ref) + LocalCross(face) + RowWise + h_in.

    h_in: (B*N, L, C); h_ref: (B*N, L_ref, C); h_face: (B*N, K, D).
    ``mv``/``local_cross`` None means the backbone-only path.
    """
    if views < 1:
        raise ShapeError("need at least one view")
    out = site.self_attn(h_in)
    if mv is not None:
        if h_ref is not None:
            out = out + mv.global_cross(h_in, h_ref)
        if h_face is not None and local_cross is not None:
            out = out + local_cross(h_in, h_face)
        out = out + row_wise_attention(mv.row_wise, h_in, views, hw)
    return out + h_in


# ---------------------------------------------------------------------------
# full model


@dataclass
class EncodedConditions:
    text: torch.Tensor
    text_mask: torch.Tensor
    face: torch.Tensor  # (B, K, D)
    h_ref: dict = field(default_factory=dict)  # site -> (B, L, C)
    pose: list | None = None  # four (B*N, C, H, W) maps, zero where dropped


class MultiViewDenoiser(nn.Module):
    def __init__(self, cfg: DiffusionConfig = DiffusionConfig()):
        super().__init__()
        self.cfg = cfg
        self.backbone = UNetBackbone(cfg)
        self.reference_net = copy.deepcopy(self.backbone)
        self.reference_net.requires_grad_(False)
        self.pose_adapter = PoseAdapter(cfg)
        self.text_encoder = TextEncoder(cfg)
        self.face_encoder = FaceEncoder(cfg)
        self.id_adapter_g = nn.ModuleDict({n: Attention(cfg.site_width(n), cfg.heads, kv_dim=cfg.ctx_dim,
                                                        zero_init=True, norm_kv=True) for n in cfg.site_names})
        self.mv_attention = nn.ModuleDict({n: MVAttention(cfg.site_width(n), cfg.heads) for n in cfg.site_names})

    ADAPTER_GROUPS = ("pose_adapter", "id_adapter_g", "text_encoder", "face_encoder", "mv_attention")

    def groups(self) -> dict[str, nn.Module]:
        return {name: getattr(self, name) for name in ("backbone", "reference_net") + self.ADAPTER_GROUPS}

    def adapter_parameters(self) -> list[nn.Parameter]:
        return [p for name in self.ADAPTER_GROUPS for p in getattr(self, name).parameters()]

    def freeze_backbone(self) -> None:
        """Mirror the backbone into the reference net and freeze both."""
        self.reference_net.load_state_dict(self.backbone.state_dict())
        self.backbone.requires_grad_(False)
        self.reference_net.requires_grad_(False)

    # conditions -------------------------------------------------------------

    def encode_reference(self, reference: torch.Tensor) -> dict:
        """Run the mirrored backbone on clean reference images at t = 0; collect each site's h_in."""
        captured = {}

        def site_fn(name, h, hw):
            captured[name] = h
            return self.reference_net.plain_site(name, h)

        t = torch.zeros(reference.shape[0], dtype=torch.long)
        self.reference_net.run(reference * 2 - 1, t, site_fn)
        return captured

    def encode_conditions(self, c: ConditionSet) -> EncodedConditions:
        b, n = c.batch, c.views
        text, mask = self.text_encoder(c.text, c._flag("drop_text"))
        face = self.face_encoder(c.face, c._flag("drop_face"))
        drop_ref = c._flag("drop_reference")
        ref = torch.where(drop_ref[:, None, None, None], torch.zeros_like(c.reference), c.reference)
        h_ref = self.encode_reference(ref)
        pose = None
        keep = ~c._flag("drop_pose")
        if bool(keep.any()):
            geo = rearrange(c.geometry, "b n c h w -> (b n) c h w")
            skel = rearrange(c.skeleton, "b n c h w -> (b n) c h w")
            keep_m = keep.repeat_interleave(n)[:, None, None, None]
            pose = [torch.where(keep_m, f, torch.zeros_like(f)) for f in self.pose_adapter(geo, skel)]
        return EncodedConditions(text, mask, face, h_ref, pose)

    # denoising --------------------------------------------------------------

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, cond: EncodedConditions | None) -> torch.Tensor:
        """z_t: (B, N, 3, H, W); t: (B,). ``cond=None`` runs the backbone alone."""
        if z_t.ndim != 5 or z_t.shape[2] != 3:
            raise ShapeError(f"expected (B, N, 3, H, W), got {tuple(z_t.shape)}")
        b, n = z_t.shape[:2]
        if z_t.shape[-1] % 8 or z_t.shape[-2] % 8:
            raise ShapeError("spatial size must be divisible by 8")
        x = rearrange(z_t, "b n c h w -> (b n) c h w")
        tm = torch.as_tensor(t).reshape(b).repeat_interleave(n)

        if cond is None:
            site_fn = lambda name, h, hw: self.backbone.plain_site(name, h)  # noqa: E731
            out = self.backbone.run(x, tm, site_fn)
            return rearrange(out, "(b n) c h w -> b n c h w", b=b)

        text = cond.text.repeat_interleave(n, dim=0)
        text_mask = cond.text_mask.repeat_interleave(n, dim=0)
        face = cond.face.repeat_interleave(n, dim=0)

        def site_fn(name, h, hw):
            h_ref = cond.h_ref[name].repeat_interleave(n, dim=0) if name in cond.h_ref else None
            h = mv_attention_block(self.backbone.sites[name], self.mv_attention[name], self.id_adapter_g[name],
                                   h, n, hw, h_ref=h_ref, h_face=face)
            h = h + self.text_encoder.cross[name](h, text, mask=text_mask)
            return h + self.backbone.sites[name].mlp(h)

        if cond.pose is not None and cond.pose[0].shape[0] != x.shape[0]:
            raise ShapeError("pose map view count does not match the latent view count")
        out = self.backbone.run(x, tm, site_fn, pose_feats=cond.pose)
        return rearrange(out, "(b n) c h w -> b n c h w", b=b)

    def denoise(self, z_t, t, c: ConditionSet) -> torch.Tensor:
        return self(z_t, t, self.encode_conditions(c))
