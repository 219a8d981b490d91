"""UV-plane Gaussian attribute maps, decoding to 3D Gaussians, and LBS deformation."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DecodeError, DeformationError, ShapeError
from .geometry import BodyTemplate, PoseParams, lbs_transforms, vertex_normals
from .rotations import matrix_to_quat_np, polar_rotation, quat_multiply, quat_to_matrix

NUM_CHANNELS = 14
OFFSET, OPACITY, ROTATION, SCALE, COLOR = slice(0, 3), slice(3, 4), slice(4, 8), slice(8, 11), slice(11, 14)

MAX_OFFSET = 0.05
S_MIN = 1e-4
S_MAX = 0.1
UNIT_SCALE = 0.01
DET_EPS = 1e-12
SH_C0 = 0.28209479177387814


@dataclass(frozen=True)
class UVBases:
    """Per-texel canonical surface samples for one template at one UV resolution.

    Arrays are indexed by covered texel, in row-major texel order.
    """
    resolution: int
    mask: np.ndarray  # (R, R) bool
    texel_index: np.ndarray  # (M,) flat row-major index
    points: np.ndarray  # (M, 3)
    frames: np.ndarray  # (M, 3, 3) columns: tangent-u, bitangent, normal
    skin_weights: np.ndarray  # (M, J)
    footprint: np.ndarray  # (M, 2) surface length of one texel along the frame x / y axes

    def __len__(self) -> int:
        return len(self.texel_index)

    @property
    def frame_quats(self) -> np.ndarray:
        return matrix_to_quat_np(self.frames)


@dataclass(frozen=True)
class UVGaussianMap:
    channels: torch.Tensor  # (14, R, R)
    texel_mask: np.ndarray  # (R, R) bool

    def __post_init__(self):
        if self.channels.ndim != 3 or self.channels.shape[0] != NUM_CHANNELS:
            raise ShapeError(f"UV map must have shape (14, R, R), got {tuple(self.channels.shape)}")
        if tuple(self.channels.shape[1:]) != tuple(self.texel_mask.shape):
            raise ShapeError("texel mask does not match map resolution")

    @property
    def resolution(self) -> int:
        return self.channels.shape[-1]


@dataclass(frozen=True)
class GaussianCloud:
    means: torch.Tensor  # (M, 3)
    opacities: torch.Tensor  # (M,)
    rotations: torch.Tensor  # (M, 4) unit quaternions
    scales: torch.Tensor  # (M, 3)
    colors: torch.Tensor  # (M, 3)
    texel_index: torch.Tensor  # (M,) long

    def __len__(self) -> int:
        return self.means.shape[0]

    def replace(self, **kw) -> "GaussianCloud":
        d = {k: getattr(self, k) for k in ("means", "opacities", "rotations", "scales", "colors", "texel_index")}
        d.update(kw)
        return GaussianCloud(**d)

    def detach(self) -> "GaussianCloud":
        return GaussianCloud(self.means.detach(), self.opacities.detach(), self.rotations.detach(),
                             self.scales.detach(), self.colors.detach(), self.texel_index)

    def to(self, dtype=None, device=None) -> "GaussianCloud":
        f = lambda t: t.to(dtype=dtype, device=device)  # noqa: E731
        return GaussianCloud(f(self.means), f(self.opacities), f(self.rotations), f(self.scales), f(self.colors),
                             self.texel_index.to(device=device))

    def check(self, tol: float = 1e-6) -> None:
        if not torch.all((self.opacities >= 0) & (self.opacities <= 1)):
            raise ValueError("opacity outside [0, 1]")
        if torch.any((self.rotations.norm(dim=-1) - 1).abs() > tol):
            raise ValueError("rotation is not a unit quaternion")
        if torch.any(self.scales <= 0):
            raise ValueError("scales must be positive")
        if len(torch.unique(self.texel_index)) != len(self):
            raise ValueError("duplicate source texel")


# ---------------------------------------------------------------------------
# UV sampling


def _perpendicular(n: np.ndarray) -> np.ndarray:
    a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t = a - (a @ n) * n
    return t / np.linalg.norm(t)


def uv_base_points(template: BodyTemplate, resolution: int) -> UVBases:
    """Surface point, skinning weights and local frame under every covered texel center.

    Texel (i, j) has its center at uv = ((j + 0.5) / R, (i + 0.5) / R). When a
    center lies on a shared edge the first triangle in face order wins.
    """
    if resolution < 4:
        raise ConfigError(f"UV resolution must be >= 4, got {resolution}")
    r = resolution
    uv = template.uv_coords
    verts = template.vertices
    normals = vertex_normals(verts, template.faces)
    owner = np.full(r * r, -1, dtype=np.int64)
    bary = np.zeros((r * r, 3))
    for fi, f in enumerate(template.faces):
        tu = uv[f] * r - 0.5  # texel-index coordinates of the triangle corners
        j0, j1 = int(np.ceil(tu[:, 0].min())), int(np.floor(tu[:, 0].max()))
        i0, i1 = int(np.ceil(tu[:, 1].min())), int(np.floor(tu[:, 1].max()))
        j0, i0 = max(j0, 0), max(i0, 0)
        j1, i1 = min(j1, r - 1), min(i1, r - 1)
        if j0 > j1 or i0 > i1:
            continue
        gi, gj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
        x, y = gj.astype(np.float64), gi.astype(np.float64)
        (ax, ay), (bx, by), (cx, cy) = tu
        area = (bx - ax) * (cy - ay) - (cx - ax) * (by - ay)
        if abs(area) < 1e-14:
            continue
        b0 = ((bx - x) * (cy - y) - (cx - x) * (by - y)) / area
        b1 = ((cx - x) * (ay - y) - (ax - x) * (cy - y)) / area
        b2 = ((ax - x) * (by - y) - (bx - x) * (ay - y)) / area
        inside = (b0 >= -1e-12) & (b1 >= -1e-12) & (b2 >= -1e-12)
        flat = (gi * r + gj)[inside]
        free = owner[flat] < 0
        flat = flat[free]
        owner[flat] = fi
        bary[flat] = np.stack([b0[inside][free], b1[inside][free], b2[inside][free]], axis=1)
    texels = np.nonzero(owner >= 0)[0]
    faces = template.faces[owner[texels]]
    b = bary[texels]
    points = np.einsum("mk,mkd->md", b, verts[faces])
    skin = np.einsum("mk,mkj->mj", b, template.skin_weights[faces])
    skin = skin / skin.sum(1, keepdims=True)
    frames = np.zeros((len(texels), 3, 3))
    footprint = np.zeros((len(texels), 2))
    for m, f in enumerate(faces):
        p, t = verts[f], uv[f]
        n = b[m] @ normals[f]
        if np.linalg.norm(n) < 1e-12:
            n = np.cross(p[1] - p[0], p[2] - p[0])
        n = n / max(np.linalg.norm(n), 1e-12)
        # surface Jacobian dP/d(uv) from the triangle edges
        duv = np.stack([t[1] - t[0], t[2] - t[0]], axis=1)  # (2, 2)
        dp = np.stack([p[1] - p[0], p[2] - p[0]], axis=1)  # (3, 2)
        jac = dp @ np.linalg.inv(duv)
        tu = jac[:, 0] - (jac[:, 0] @ n) * n
        tu = tu / np.linalg.norm(tu) if np.linalg.norm(tu) > 1e-9 else _perpendicular(n)
        tv = np.cross(n, tu)
        frames[m] = np.stack([tu, tv, n], axis=1)
        footprint[m] = np.abs(frames[m][:, :2].T @ jac).sum(1) / r
    mask = np.zeros(r * r, dtype=bool)
    mask[texels] = True
    return UVBases(r, mask.reshape(r, r), texels, points, frames, skin, footprint)


# ---------------------------------------------------------------------------
# decoding


def decode_uv_map(uv_map: UVGaussianMap, bases: UVBases, max_offset: float = MAX_OFFSET,
                  s_min: float = S_MIN, s_max: float = S_MAX, unit_scale: float = UNIT_SCALE) -> GaussianCloud:
    """Decode per-texel channels into canonical-pose Gaussians (row-major texel order)."""
    if uv_map.resolution != bases.resolution or not np.array_equal(uv_map.texel_mask, bases.mask):
        raise ShapeError("UV map does not match the base points")
    ch = uv_map.channels
    raw = ch.reshape(NUM_CHANNELS, -1)[:, torch.as_tensor(bases.texel_index, device=ch.device)].T  # (M, 14)
    finite = torch.isfinite(raw).all(dim=1)
    if not bool(finite.all()):
        flat = int(bases.texel_index[int(torch.nonzero(~finite)[0])])
        row, col = divmod(flat, bases.resolution)
        raise DecodeError(f"non-finite channel value at texel ({row}, {col})")
    dtype, device = raw.dtype, raw.device
    base = torch.as_tensor(bases.points, dtype=dtype, device=device)
    frames = torch.as_tensor(bases.frames, dtype=dtype, device=device)
    offset = max_offset * torch.tanh(raw[:, OFFSET])
    means = base + torch.einsum("mab,mb->ma", frames, offset)
    opac = torch.sigmoid(raw[:, OPACITY].squeeze(-1))
    ident = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=dtype, device=device)
    q_local = raw[:, ROTATION] + ident
    q_local = q_local / q_local.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    q_frame = torch.as_tensor(bases.frame_quats, dtype=dtype, device=device)
    rot = quat_multiply(q_frame, q_local)
    scales = torch.clamp(s_min + unit_scale * torch.exp(raw[:, SCALE]), max=s_max)
    colors = torch.sigmoid(raw[:, COLOR])
    return GaussianCloud(means, opac, rot, scales, colors, torch.as_tensor(bases.texel_index, device=device))


def zero_uv_map(bases: UVBases, dtype=torch.float32) -> UVGaussianMap:
    r = bases.resolution
    return UVGaussianMap(torch.zeros(NUM_CHANNELS, r, r, dtype=dtype), bases.mask)


def encode_uv_channels(bases: UVBases, opacity=None, scales=None, colors=None, dtype=torch.float32) -> UVGaussianMap:
    """Inverse of the decode activations for zero offset and zero local rotation.

    Attributes are given per covered texel; omitted ones stay at the zero channel.
    """
    r, m = bases.resolution, len(bases)
    raw = np.zeros((m, NUM_CHANNELS))
    if opacity is not None:
        a = np.clip(np.asarray(opacity, dtype=np.float64), 1e-6, 1 - 1e-6)
        raw[:, OPACITY] = np.log(a / (1 - a)).reshape(m, 1)
    if scales is not None:
        s = np.clip(np.asarray(scales, dtype=np.float64), S_MIN + 1e-9, S_MAX)
        raw[:, SCALE] = np.log((s - S_MIN) / UNIT_SCALE)
    if colors is not None:
        c = np.clip(np.asarray(colors, dtype=np.float64), 1e-4, 1 - 1e-4)
        raw[:, COLOR] = np.log(c / (1 - c))
    full = np.zeros((NUM_CHANNELS, r * r))
    full[:, bases.texel_index] = raw.T
    return UVGaussianMap(torch.as_tensor(full.reshape(NUM_CHANNELS, r, r), dtype=dtype), bases.mask)


def covariance(rotations: torch.Tensor, scales: torch.Tensor) -> torch.Tensor:
    """Sigma = R diag(s)^2 R^T for (..., 4) quaternions and (..., 3) scales."""
    rot = quat_to_matrix(rotations)
    m = rot * scales.unsqueeze(-2)
    return m @ m.transpose(-1, -2)


# ---------------------------------------------------------------------------
# deformation


def deform(cloud: GaussianCloud, skin_weights: np.ndarray, template: BodyTemplate, pose: PoseParams) -> GaussianCloud:
    """Pose a canonical cloud: positions and rotations follow the blended LBS transform.

    ``skin_weights`` holds one row per primitive. Opacity, scale and color
    tensors are passed through untouched.
    """
    skin_weights = np.asarray(skin_weights)
    if skin_weights.shape[0] != len(cloud):
        raise ShapeError("need one skin weight row per primitive")
    transforms = lbs_transforms(template, pose, skin_weights)
    linear = transforms[:, :3, :3]
    det = np.linalg.det(linear)
    bad = np.nonzero(det <= DET_EPS)[0]  # round-off keeps an exact zero from showing as 0
    if len(bad):
        texel = int(cloud.texel_index[bad[0]])
        raise DeformationError(f"degenerate blended transform (det={det[bad[0]]:.3g}) at texel {texel}")
    rot_q = matrix_to_quat_np(polar_rotation(linear))
    dtype, device = cloud.means.dtype, cloud.means.device
    lin = torch.as_tensor(linear, dtype=dtype, device=device)
    trans = torch.as_tensor(transforms[:, :3, 3], dtype=dtype, device=device)
    means = torch.einsum("mab,mb->ma", lin, cloud.means) + trans
    rots = quat_multiply(torch.as_tensor(rot_q, dtype=dtype, device=device), cloud.rotations)
    return cloud.replace(means=means, rotations=rots)


# ---------------------------------------------------------------------------
# PLY (community 3DGS layout)

_PLY_FIELDS = (
    ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity"]
    + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)]
)
_PLY_DTYPE = np.dtype([(n, "<f4") for n in _PLY_FIELDS] + [("texel", "<i4")])


def cloud_to_ply_bytes(cloud: GaussianCloud) -> bytes:
    """Binary little-endian PLY; opacity stored as a logit, scales as logs, color as SH DC."""
    m = len(cloud)
    arr = np.zeros(m, dtype=_PLY_DTYPE)
    means = cloud.means.detach().double().cpu().numpy()
    a = cloud.opacities.detach().double().cpu().numpy().clip(1e-7, 1 - 1e-7)
    s = cloud.scales.detach().double().cpu().numpy()
    q = cloud.rotations.detach().double().cpu().numpy()
    c = cloud.colors.detach().double().cpu().numpy()
    arr["x"], arr["y"], arr["z"] = means.T
    arr["opacity"] = np.log(a / (1 - a))
    for i in range(3):
        arr[f"scale_{i}"] = np.log(s[:, i])
        arr[f"f_dc_{i}"] = (c[:, i] - 0.5) / SH_C0
    for i in range(4):
        arr[f"rot_{i}"] = q[:, i]
    arr["texel"] = cloud.texel_index.cpu().numpy()
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {m}"]
    header += [f"property float {n}" for n in _PLY_FIELDS] + ["property int texel", "end_header"]
    return ("\n".join(header) + "\n").encode("ascii") + arr.tobytes()


def cloud_from_ply_bytes(data: bytes, dtype=torch.float32) -> GaussianCloud:
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    count = next(int(line.split()[-1]) for line in header if line.startswith("element vertex"))
    props = [line.split()[-1] for line in header if line.startswith("property")]
    if props != _PLY_FIELDS + ["texel"]:
        raise ValueError("unsupported PLY property layout")
    arr = np.frombuffer(data[end:], dtype=_PLY_DTYPE, count=count)

    def col(*names):
        return torch.as_tensor(np.stack([arr[n] for n in names], axis=-1).astype(np.float32), dtype=dtype)

    rot = col("rot_0", "rot_1", "rot_2", "rot_3")
    return GaussianCloud(
        means=col("x", "y", "z"),
        opacities=torch.sigmoid(col("opacity").squeeze(-1)),
        rotations=rot / rot.norm(dim=-1, keepdim=True),
        scales=torch.exp(col("scale_0", "scale_1", "scale_2")),
        colors=(0.5 + SH_C0 * col("f_dc_0", "f_dc_1", "f_dc_2")).clamp(0.0, 1.0),
        texel_index=torch.as_tensor(arr["texel"].astype(np.int64)),
    )


def write_ply(cloud: GaussianCloud, path) -> None:
    Path(path).write_bytes(cloud_to_ply_bytes(cloud))


def read_ply(path, dtype=torch.float32) -> GaussianCloud:
    return cloud_from_ply_bytes(Path(path).read_bytes(), dtype=dtype)
