"""Procedural articulated body template, kinematics, skinning and cameras.

The template is a low-poly capsule humanoid standing in for a parametric body
model. It carries joints, a kinematic tree, skinning weights and a per-part
rectangular UV atlas. Cameras follow the OpenCV convention (x right, y down,
z forward) and map world points with ``x_cam = R @ x_world + t``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, HeadNotVisibleError, ShapeError
from .rotations import quat_identity, quat_to_matrix_np

NEAR_PLANE = 1e-2
# geometry map channel 0 is clip(DEPTH_REF / z, 0, 1)
DEPTH_REF = 1.0
SKELETON_HALF_WIDTH = 1.0

JOINT_NAMES = (
    "pelvis", "spine", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)
PARENTS = (-1, 0, 1, 2, 1, 4, 5, 1, 7, 8, 0, 10, 11, 0, 13, 14)
HEAD_JOINT = 3

# part name -> UV rectangle (u0, v0, u1, v1)
ATLAS = {
    "torso": (0.02, 0.02, 0.58, 0.46),
    "head": (0.62, 0.02, 0.98, 0.30),
    "l_upperarm": (0.02, 0.50, 0.24, 0.66),
    "r_upperarm": (0.26, 0.50, 0.48, 0.66),
    "l_forearm": (0.02, 0.70, 0.24, 0.84),
    "r_forearm": (0.26, 0.70, 0.48, 0.84),
    "l_thigh": (0.52, 0.34, 0.74, 0.62),
    "r_thigh": (0.76, 0.34, 0.98, 0.62),
    "l_shin": (0.52, 0.66, 0.74, 0.94),
    "r_shin": (0.76, 0.66, 0.98, 0.94),
}


@dataclass(frozen=True)
class BodyTemplate:
    vertices: np.ndarray  # (V, 3) canonical, meters
    faces: np.ndarray  # (F, 3) int
    joints: np.ndarray  # (J, 3) rest positions
    parent: np.ndarray  # (J,) int, -1 for the root
    skin_weights: np.ndarray  # (V, J)
    uv_coords: np.ndarray  # (V, 2) in [0, 1]^2
    head_joint: int

    @property
    def num_joints(self) -> int:
        return len(self.joints)

    def validate(self) -> None:
        v, j = len(self.vertices), len(self.joints)
        if self.vertices.shape != (v, 3) or self.joints.shape != (j, 3):
            raise ShapeError("vertices and joints must be (n, 3)")
        if self.skin_weights.shape != (v, j):
            raise ShapeError(f"skin_weights must be ({v}, {j}), got {self.skin_weights.shape}")
        if self.uv_coords.shape != (v, 2):
            raise ShapeError("uv_coords must be (V, 2)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ShapeError("faces must be (F, 3)")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= v):
            raise ShapeError("face index out of range")
        if np.any(self.skin_weights < 0) or np.any(np.abs(self.skin_weights.sum(1) - 1.0) > 1e-6):
            raise ShapeError("skin weight rows must be nonnegative and sum to 1")
        if np.any(self.uv_coords < 0) or np.any(self.uv_coords > 1):
            raise ShapeError("uv_coords must lie in [0, 1]^2")
        if not 0 <= self.head_joint < j:
            raise ShapeError("head_joint out of range")
        joint_order(self.parent)

    def to_json(self) -> str:
        return json.dumps(
            {
                "vertices": self.vertices.tolist(),
                "faces": self.faces.tolist(),
                "joints": self.joints.tolist(),
                "parent": [None if p < 0 else int(p) for p in self.parent],
                "skin_weights": self.skin_weights.tolist(),
                "uv_coords": self.uv_coords.tolist(),
                "head_joint": int(self.head_joint),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "BodyTemplate":
        d = json.loads(text)
        t = cls(
            vertices=np.asarray(d["vertices"], dtype=np.float64),
            faces=np.asarray(d["faces"], dtype=np.int64).reshape(-1, 3),
            joints=np.asarray(d["joints"], dtype=np.float64),
            parent=np.asarray([-1 if p is None else p for p in d["parent"]], dtype=np.int64),
            skin_weights=np.asarray(d["skin_weights"], dtype=np.float64),
            uv_coords=np.asarray(d["uv_coords"], dtype=np.float64),
            head_joint=int(d["head_joint"]),
        )
        t.validate()
        return t

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "BodyTemplate":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class PoseParams:
    joint_rotations: np.ndarray  # (J, 4) unit quaternions (w, x, y, z)
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.joint_rotations, dtype=np.float64)
        object.__setattr__(self, "joint_rotations", q)
        object.__setattr__(self, "root_translation", np.asarray(self.root_translation, dtype=np.float64))
        if q.ndim != 2 or q.shape[1] != 4:
            raise ShapeError("joint_rotations must be (J, 4)")
        if np.any(np.abs(np.linalg.norm(q, axis=1) - 1.0) > 1e-6):
            raise ShapeError("joint rotations must be unit quaternions")

    @classmethod
    def identity(cls, num_joints: int) -> "PoseParams":
        return cls(quat_identity(num_joints), np.zeros(3))

    def to_dict(self) -> dict:
        return {"joint_rotations": self.joint_rotations.tolist(), "root_translation": self.root_translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PoseParams":
        return cls(np.asarray(d["joint_rotations"]), np.asarray(d.get("root_translation", [0.0, 0.0, 0.0])))


@dataclass(frozen=True)
class CameraParams:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3, 3) world -> camera
    translation: np.ndarray  # (3,)
    width: int
    height: int

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("focal lengths must be positive")
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-6 or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ConfigError("camera rotation must be orthonormal with det +1")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def image_size(self) -> tuple[int, int]:
        return self.width, self.height

    def extrinsics(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def look_at(cls, eye, target, focal: float, width: int, height: int, up=(0.0, 1.0, 0.0)) -> "CameraParams":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, rot, -rot @ eye, width, height)

    @classmethod
    def orbit(cls, azimuth_deg: float, elevation_deg: float, distance: float, target, focal: float,
              width: int, height: int) -> "CameraParams":
        """Camera on a ring around the y axis; azimuth 0 looks at the body front (+z)."""
        az, el = np.deg2rad(azimuth_deg), np.deg2rad(elevation_deg)
        offset = distance * np.array([np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)])
        return cls.look_at(np.asarray(target) + offset, target, focal, width, height)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraParams":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], np.asarray(d["rotation"]),
                   np.asarray(d["translation"]), int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class FaceBox:
    x0: int
    y0: int
    side: int

    def slices(self):
        return slice(self.y0, self.y0 + self.side), slice(self.x0, self.x0 + self.side)


def joint_order(parent) -> list[int]:
    """Topological order of the kinematic tree (parents first)."""
    parent = np.asarray(parent)
    roots = [j for j, p in enumerate(parent) if p < 0]
    if len(roots) != 1:
        raise ShapeError(f"kinematic tree needs exactly one root, found {len(roots)}")
    children: dict[int, list[int]] = {}
    for j, p in enumerate(parent):
        if p >= 0:
            if p >= len(parent):
                raise ShapeError(f"joint {j} has invalid parent {p}")
            children.setdefault(int(p), []).append(j)
    order, stack = [], [roots[0]]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(children.get(j, [])))
    if len(order) != len(parent):
        raise ShapeError("kinematic tree contains a cycle or disconnected joints")
    return order


# ---------------------------------------------------------------------------
# kinematics and skinning


def _pivot(rot: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Rotation ``rot`` about ``center`` as a 4x4; exact identity for rot = I."""
    m = np.eye(4)
    m[:3, :3] = rot
    m[:3, 3] = center - rot @ center
    return m


def joint_relative_transforms(template: BodyTemplate, pose: PoseParams) -> np.ndarray:
    """Per-joint ``T_posed @ inv(T_rest)`` as (J, 4, 4), built without inverting."""
    if pose.joint_rotations.shape[0] != template.num_joints:
        raise ShapeError(
            f"pose has {pose.joint_rotations.shape[0]} rotations, template has {template.num_joints} joints"
        )
    rots = quat_to_matrix_np(pose.joint_rotations)
    out = np.zeros((template.num_joints, 4, 4))
    for j in joint_order(template.parent):
        local = _pivot(rots[j], template.joints[j])
        p = template.parent[j]
        if p < 0:
            root = np.eye(4)
            root[:3, 3] = pose.root_translation
            out[j] = root @ local
        else:
            out[j] = out[p] @ local
    return out


def forward_kinematics(template: BodyTemplate, pose: PoseParams) -> np.ndarray:
    """World transforms (J, 4, 4) of the posed joint frames.

    The rest transform of joint j is a pure translation to its rest position.
    """
    rel = joint_relative_transforms(template, pose)
    rest = np.tile(np.eye(4), (template.num_joints, 1, 1))
    rest[:, :3, 3] = template.joints
    return rel @ rest


def blend_transforms(weights: np.ndarray, joint_transforms: np.ndarray) -> np.ndarray:
    """A_v = sum_j w_vj A_j, evaluated as I + sum_j w_vj (A_j - I).

    The offset form keeps identity joints exactly identity regardless of how
    closely each weight row sums to one.
    """
    delta = joint_transforms - np.eye(4)
    return np.eye(4) + np.einsum("vj,jab->vab", np.asarray(weights, dtype=np.float64), delta)


def lbs_transforms(template: BodyTemplate, pose: PoseParams, weights: np.ndarray | None = None) -> np.ndarray:
    """Per-vertex (or per-row of ``weights``) blended 4x4 transforms."""
    rel = joint_relative_transforms(template, pose)
    return blend_transforms(template.skin_weights if weights is None else weights, rel)


def apply_transforms(transforms: np.ndarray, points: np.ndarray) -> np.ndarray:
    return np.einsum("vab,vb->va", transforms[:, :3, :3], points) + transforms[:, :3, 3]


def posed_vertices(template: BodyTemplate, pose: PoseParams) -> np.ndarray:
    return apply_transforms(lbs_transforms(template, pose), template.vertices)


def posed_joints(template: BodyTemplate, pose: PoseParams) -> np.ndarray:
    return forward_kinematics(template, pose)[:, :3, 3]


# ---------------------------------------------------------------------------
# projection


def project(camera: CameraParams, points, near: float = NEAR_PLANE):
    """Perspective projection of (..., 3) world points.

    Returns ``(pixels (..., 2), depth (...), visible (...))``. Points at or
    behind the near plane get NaN pixels and ``visible = False``.
    """
    pts = np.asarray(points, dtype=np.float64)
    cam = pts @ camera.rotation.T + camera.translation
    z = cam[..., 2]
    visible = z > near
    safe = np.where(visible, z, np.nan)
    u = camera.fx * cam[..., 0] / safe + camera.cx
    v = camera.fy * cam[..., 1] / safe + camera.cy
    return np.stack([u, v], axis=-1), z, visible


def unproject(camera: CameraParams, pixels, depth) -> np.ndarray:
    pix = np.asarray(pixels, dtype=np.float64)
    z = np.asarray(depth, dtype=np.float64)
    x = (pix[..., 0] - camera.cx) / camera.fx * z
    y = (pix[..., 1] - camera.cy) / camera.fy * z
    cam = np.stack([x, y, z], axis=-1)
    return (cam - camera.translation) @ camera.rotation


# ---------------------------------------------------------------------------
# conditioning maps


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    tri = vertices[faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    vn = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(vn, faces[:, k], fn)
    norm = np.linalg.norm(vn, axis=1, keepdims=True)
    return vn / np.maximum(norm, 1e-12)


def _rasterize_geometry(cam_verts: np.ndarray, cam_normals: np.ndarray, faces: np.ndarray,
                        camera: CameraParams) -> np.ndarray:
    w, h = camera.width, camera.height
    out = np.zeros((h, w, 3))
    zbuf = np.full((h, w), np.inf)
    z = cam_verts[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = camera.fx * cam_verts[:, 0] / z + camera.cx
        py = camera.fy * cam_verts[:, 1] / z + camera.cy
    for f in faces:
        if np.any(z[f] <= NEAR_PLANE):
            continue
        xs, ys = px[f], py[f]
        x0, x1 = max(int(np.ceil(xs.min())), 0), min(int(np.floor(xs.max())), w - 1)
        y0, y1 = max(int(np.ceil(ys.min())), 0), min(int(np.floor(ys.max())), h - 1)
        if x0 > x1 or y0 > y1:
            continue
        area = (xs[1] - xs[0]) * (ys[2] - ys[0]) - (xs[2] - xs[0]) * (ys[1] - ys[0])
        if abs(area) < 1e-12:
            continue
        gx, gy = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        b0 = ((xs[1] - gx) * (ys[2] - gy) - (xs[2] - gx) * (ys[1] - gy)) / area
        b1 = ((xs[2] - gx) * (ys[0] - gy) - (xs[0] - gx) * (ys[2] - gy)) / area
        b2 = 1.0 - b0 - b1
        inside = (b0 >= 0) & (b1 >= 0) & (b2 >= 0)
        if not inside.any():
            continue
        # perspective-correct depth: 1/z is affine in screen space
        inv_z = b0 / z[f[0]] + b1 / z[f[1]] + b2 / z[f[2]]
        depth = 1.0 / inv_z
        iy, ix = gy[inside], gx[inside]
        d = depth[inside]
        closer = d < zbuf[iy, ix]
        if not closer.any():
            continue
        iy, ix, d = iy[closer], ix[closer], d[closer]
        bary = np.stack([b0[inside][closer], b1[inside][closer], b2[inside][closer]], axis=1)
        n = bary @ cam_normals[f]
        n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
        zbuf[iy, ix] = d
        out[iy, ix, 0] = np.clip(DEPTH_REF / d, 0.0, 1.0)
        out[iy, ix, 1] = (n[:, 0] + 1.0) * 0.5
        out[iy, ix, 2] = (n[:, 1] + 1.0) * 0.5
    return out


def segment_distance(pixels: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance from (P, 2) pixels to segment ab."""
    ab = b - a
    denom = float(ab @ ab)
    t = np.zeros(len(pixels)) if denom == 0 else np.clip((pixels - a) @ ab / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(pixels - closest, axis=1)


def _rasterize_skeleton(joints2d: np.ndarray, visible: np.ndarray, parent: np.ndarray,
                        width: int, height: int) -> np.ndarray:
    gy, gx = np.mgrid[0:height, 0:width]
    pix = np.stack([gx.ravel(), gy.ravel()], axis=1).astype(np.float64)
    out = np.zeros(len(pix))
    for j, p in enumerate(parent):
        if p < 0 or not (visible[j] and visible[p]):
            continue
        d = segment_distance(pix, joints2d[p], joints2d[j])
        # 2-pixel-wide line with a one-pixel linear falloff
        out = np.maximum(out, np.clip(SKELETON_HALF_WIDTH + 0.5 - d, 0.0, 1.0))
    return out.reshape(height, width)


def render_conditioning_maps(template: BodyTemplate, pose: PoseParams, cameras):
    """Geometry maps (N, H, W, 3) and skeleton maps (N, H, W), values in [0, 1].

    Geometry channels: clipped inverse depth, then camera-frame normal x and y
    mapped from [-1, 1] to [0, 1]. Background is zero in every channel.
    """
    if len(cameras) < 1:
        raise ShapeError("need at least one camera")
    transforms = lbs_transforms(template, pose)
    verts = apply_transforms(transforms, template.vertices)
    normals = np.einsum("vab,vb->va", transforms[:, :3, :3], vertex_normals(template.vertices, template.faces))
    normals /= np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-12)
    joints = posed_joints(template, pose)
    geoms, skels = [], []
    for cam in cameras:
        cv = verts @ cam.rotation.T + cam.translation
        cn = normals @ cam.rotation.T
        geoms.append(_rasterize_geometry(cv, cn, template.faces, cam))
        j2d, _, vis = project(cam, joints)
        skels.append(_rasterize_skeleton(j2d, vis, template.parent, cam.width, cam.height))
    return np.stack(geoms), np.stack(skels)


# ---------------------------------------------------------------------------
# face crop


def head_size(template: BodyTemplate) -> float:
    p = template.parent[template.head_joint]
    ref = template.joints[p] if p >= 0 else template.joints[template.head_joint] - np.array([0.0, 0.15, 0.0])
    return float(np.linalg.norm(template.joints[template.head_joint] - ref))


def face_crop_box(template: BodyTemplate, pose: PoseParams, camera: CameraParams, scale: float = 1.8) -> FaceBox:
    """Square pixel box around the projected head joint, clamped inside the image."""
    head = posed_joints(template, pose)[template.head_joint]
    (u, v), z, visible = project(camera, head)
    if not visible or not (0 <= u <= camera.width - 1 and 0 <= v <= camera.height - 1):
        raise HeadNotVisibleError("head joint does not project into the image")
    side = int(round(scale * head_size(template) * camera.fx / z))
    side = int(np.clip(side, 2, min(camera.width, camera.height)))
    x0 = int(round(u - (side - 1) / 2.0))
    y0 = int(round(v - (side - 1) / 2.0))
    x0 = int(np.clip(x0, 0, camera.width - side))
    y0 = int(np.clip(y0, 0, camera.height - side))
    return FaceBox(x0, y0, side)


def crop_camera(camera: CameraParams, box: FaceBox, resolution: int) -> CameraParams:
    """Camera whose full image is the ``box`` region resampled to ``resolution``^2."""
    k = resolution / box.side
    # pixel-center convention: crop pixel i covers source [x0 + i/k, x0 + (i+1)/k)
    return CameraParams(
        camera.fx * k, camera.fy * k,
        (camera.cx - box.x0 + 0.5) * k - 0.5, (camera.cy - box.y0 + 0.5) * k - 0.5,
        camera.rotation, camera.translation, resolution, resolution,
    )


# ---------------------------------------------------------------------------
# procedural template


def _arm_dir(side: float) -> np.ndarray:
    a = np.deg2rad(55.0)
    return np.array([side * np.cos(a), -np.sin(a), 0.0])


def _rest_joints(height: float) -> np.ndarray:
    j = np.zeros((16, 3))
    j[0] = (0, 0.92, 0)
    j[1] = (0, 1.15, 0)
    j[2] = (0, 1.50, 0)
    j[3] = (0, 1.66, 0)
    for side, base in ((1.0, 4), (-1.0, 7)):
        d = _arm_dir(side)
        j[base] = (side * 0.17, 1.44, 0)
        j[base + 1] = j[base] + 0.27 * d
        j[base + 2] = j[base + 1] + 0.25 * d
    for side, base in ((1.0, 10), (-1.0, 13)):
        j[base] = (side * 0.09, 0.90, 0)
        j[base + 1] = (side * 0.10, 0.49, 0)
        j[base + 2] = (side * 0.10, 0.08, 0)
    j[:, 1] *= height
    return j


def _part_specs(j: np.ndarray, girth: float):
    """(name, start, end, radius_side, radius_front, exponent, rings, segments, skin fn)."""
    up = np.array([0.0, 1.0, 0.0])
    specs = [
        ("torso", j[0] - 0.08 * up, j[2] + 0.06 * up, 0.16 * girth, 0.11 * girth, 0.3, 18, 24,
         lambda t, p: _blend_vertical(p, j[0][1] + 0.03, j[1][1] + 0.05, 0, 1)),
        ("head", j[2] + 0.04 * up, j[2] + 0.28 * up, 0.12, 0.12, 1.0, 12, 16,
         lambda t, p: {2: np.ones_like(t)}),
    ]
    for side, name, base in ((1.0, "l", 4), (-1.0, "r", 7)):
        d = _arm_dir(side)
        specs.append((f"{name}_upperarm", j[base] - 0.03 * d, j[base + 1] + 0.02 * d, 0.05 * girth, 0.05 * girth,
                      0.3, 8, 12, _start_blend(base, 1)))
        specs.append((f"{name}_forearm", j[base + 1], j[base + 2] + 0.03 * d, 0.042 * girth, 0.042 * girth,
                      0.3, 8, 12, _start_blend(base + 1, base)))
    for side, name, base in ((1.0, "l", 10), (-1.0, "r", 13)):
        specs.append((f"{name}_thigh", j[base] + 0.05 * up, j[base + 1], 0.08 * girth, 0.08 * girth,
                      0.3, 10, 12, _start_blend(base, 0)))
        specs.append((f"{name}_shin", j[base + 1], j[base + 2] - 0.06 * up, 0.055 * girth, 0.055 * girth,
                      0.3, 10, 12, _start_blend(base + 1, base)))
    return specs


def _blend_vertical(p, y_lo, y_hi, j_lo, j_hi):
    w_hi = np.clip((p[:, 1] - y_lo) / (y_hi - y_lo), 0.0, 1.0)
    return {j_lo: 1.0 - w_hi, j_hi: w_hi}


def _start_blend(joint, parent_joint, length=0.2):
    def fn(t, p):
        w_par = 0.5 * np.clip(1.0 - t / length, 0.0, 1.0)
        return {joint: 1.0 - w_par, parent_joint: w_par}
    return fn


def make_template(seed: int | None = None) -> BodyTemplate:
    """Procedural humanoid; ``seed=None`` gives the canonical proportions.

    Every seed shares the same topology, joint set and UV atlas; only height
    and girth vary, so UV texels correspond across templates.
    """
    if seed is None:
        height, girth = 1.0, 1.0
    else:
        rng = np.random.default_rng(seed)
        height, girth = rng.uniform(0.95, 1.05), rng.uniform(0.9, 1.1)
    joints = _rest_joints(height)
    verts, uvs, faces, weights = [], [], [], []
    offset = 0
    for name, start, end, r_side, r_front, expo, rings, segs, skin in _part_specs(joints, girth):
        axis = end - start
        length = np.linalg.norm(axis)
        axis = axis / length
        front = np.array([0.0, 0.0, 1.0]) - axis[2] * axis
        front /= np.linalg.norm(front)
        side = np.cross(axis, front)
        t = np.linspace(0.0, 1.0, rings)
        s = 0.5 * (1.0 - np.cos(np.pi * t))
        prof = np.sin(np.pi * t).clip(0.0) ** expo
        uu = np.linspace(0.0, 1.0, segs + 1)
        ang = 2.0 * np.pi * uu
        tt, aa = np.meshgrid(t, ang, indexing="ij")
        ss = np.meshgrid(s, ang, indexing="ij")[0]
        pp = np.meshgrid(prof, ang, indexing="ij")[0]
        # u = 0 at the back, u = 0.5 at the front
        pts = (start[None, None] + (ss * length)[..., None] * axis
               + (pp * r_front * -np.cos(aa))[..., None] * front
               + (pp * r_side * np.sin(aa))[..., None] * side)
        pts = pts.reshape(-1, 3)
        u0, v0, u1, v1 = ATLAS[name]
        uv = np.stack([u0 + (aa / (2 * np.pi)) * (u1 - u0), v0 + tt * (v1 - v0)], axis=-1).reshape(-1, 2)
        w = np.zeros((len(pts), len(joints)))
        for jj, val in skin(tt.ravel(), pts).items():
            w[:, jj] += val
        w /= w.sum(1, keepdims=True)
        n_col = segs + 1
        for r in range(rings - 1):
            for c in range(segs):
                a_, b_ = r * n_col + c, r * n_col + c + 1
                c_, d_ = (r + 1) * n_col + c, (r + 1) * n_col + c + 1
                faces.append((offset + a_, offset + c_, offset + b_))
                faces.append((offset + b_, offset + c_, offset + d_))
        verts.append(pts)
        uvs.append(uv)
        weights.append(w)
        offset += len(pts)
    # winding (r,c) -> (r+1,c) -> (r,c+1) gives outward normals: axis x tangent = radial
    return BodyTemplate(
        vertices=np.concatenate(verts),
        faces=np.asarray(faces, dtype=np.int64),
        joints=joints,
        parent=np.asarray(PARENTS, dtype=np.int64),
        skin_weights=np.concatenate(weights),
        uv_coords=np.clip(np.concatenate(uvs), 0.0, 1.0),
        head_joint=HEAD_JOINT,
    )
