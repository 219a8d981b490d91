"""Procedural synthetic avatar dataset.

Each avatar is a jittered body template with a part-wise palette texture, a
random mild pose, a ring of cameras and a templated caption describing the
sampled colors. The ground-truth appearance is a Gaussian cloud decoded from
the template prior with texture-sampled colors; every stored image is a
render of that cloud.
"""
from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from functools import cached_property, lru_cache
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, ManifestError
from .gaussians import (
    GaussianCloud, UVBases, cloud_from_ply_bytes, cloud_to_ply_bytes, decode_uv_map, deform,
    encode_uv_channels, uv_base_points,
)
from .geometry import (
    ATLAS, BodyTemplate, CameraParams, FaceBox, PoseParams, crop_camera, face_crop_box, make_template,
    render_conditioning_maps,
)
from .images import load_png, png_bytes, quantize
from .rotations import quat_from_axis_angle, quat_identity
from .splat import render

FORMAT_VERSION = 1

PALETTE = {
    "red": (0.80, 0.15, 0.15),
    "orange": (0.95, 0.55, 0.10),
    "yellow": (0.95, 0.85, 0.20),
    "green": (0.20, 0.65, 0.25),
    "blue": (0.15, 0.30, 0.80),
    "purple": (0.50, 0.20, 0.65),
    "pink": (0.95, 0.55, 0.70),
    "white": (0.92, 0.92, 0.92),
    "gray": (0.50, 0.50, 0.50),
    "black": (0.10, 0.10, 0.10),
}
COLOR_NAMES = tuple(PALETTE)
SKIN_TONES = ((0.96, 0.80, 0.69), (0.87, 0.67, 0.52), (0.65, 0.46, 0.33), (0.42, 0.29, 0.20))
HAIR_COLORS = {"black": (0.08, 0.06, 0.05), "brown": (0.40, 0.25, 0.12), "blond": (0.90, 0.78, 0.45),
               "red": (0.65, 0.22, 0.10)}
EYE_COLOR = (0.05, 0.05, 0.08)

VOCAB = ("<pad>", "a", "person", "wearing", "shirt", "with", "back", "and", "pants", "hair") + tuple(
    sorted(set(COLOR_NAMES) | set(HAIR_COLORS))
)
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}


@dataclass(frozen=True)
class DataConfig:
    num_samples: int = 4
    views: int = 12
    resolution: int = 64
    uv_resolution: int = 64
    face_resolution: int = 32
    focal: float = 100.0
    distance: float = 3.0
    elevation: float = 5.0
    pose_scale: float = 0.25
    opacity: float = 0.9
    test_samples: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.views < 1:
            raise ConfigError("views must be >= 1")
        if self.resolution < 8 or self.face_resolution < 8:
            raise ConfigError("resolution and face_resolution must be >= 8")
        if self.num_samples < 0 or not 0 <= self.test_samples <= self.num_samples:
            raise ConfigError("invalid sample counts")
        if not 0.0 < self.opacity < 1.0:
            raise ConfigError("opacity must be in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class AvatarSample:
    seed: int
    template: BodyTemplate
    texture: np.ndarray  # (R, R, 3) UV texture
    pose: PoseParams
    cameras: list
    caption: list  # token ids
    attributes: dict
    gt_cloud: GaussianCloud  # canonical pose, decoded from gt_ply
    bases: UVBases = field(repr=False)
    gt_ply: bytes = field(default=b"", repr=False)


@dataclass
class RenderedViews:
    images: torch.Tensor  # (V, H, W, 3), 8-bit quantized
    geometry_maps: np.ndarray  # (V, H, W, 3)
    skeleton_maps: np.ndarray  # (V, H, W)
    face_image: torch.Tensor  # (F, F, 3)
    face_box: FaceBox
    face_camera: CameraParams


def tokenize(text: str) -> list[int]:
    try:
        return [TOKEN_ID[w] for w in text.lower().split()]
    except KeyError as e:
        raise ValueError(f"word {e.args[0]!r} is not in the caption vocabulary") from None


def detokenize(tokens) -> str:
    return " ".join(VOCAB[t] for t in tokens if t != 0)


def caption_text(attrs: dict) -> str:
    return (f"a person wearing a {attrs['top']} shirt with a {attrs['top_back']} back "
            f"and {attrs['bottom']} pants with {attrs['hair']} hair")


def color_bucket(rgb) -> str:
    """Nearest palette color name."""
    rgb = np.asarray(rgb, dtype=np.float64)
    names = list(PALETTE)
    d = [np.sum((rgb - np.asarray(PALETTE[n])) ** 2) for n in names]
    return names[int(np.argmin(d))]


def texel_uv(resolution: int) -> np.ndarray:
    """(R, R, 2) uv coordinates of texel centers."""
    c = (np.arange(resolution) + 0.5) / resolution
    return np.stack(np.meshgrid(c, c, indexing="xy"), axis=-1)


def paint_texture(attrs: dict, resolution: int) -> np.ndarray:
    uv = texel_uv(resolution)
    u, v = uv[..., 0], uv[..., 1]
    tex = np.ones((resolution, resolution, 3))
    skin = np.asarray(attrs["skin_rgb"])
    for part, (u0, v0, u1, v1) in ATLAS.items():
        inside = (u >= u0) & (u <= u1) & (v >= v0) & (v <= v1)
        lu = (u - u0) / (u1 - u0)  # 0 back, 0.5 front
        lv = (v - v0) / (v1 - v0)  # along the part axis
        front = (lu > 0.25) & (lu < 0.75)
        if part == "torso":
            tex[inside & front] = PALETTE[attrs["top"]]
            tex[inside & ~front] = PALETTE[attrs["top_back"]]
        elif part == "head":
            tex[inside] = skin
            hair = inside & ((lv > 0.62) | ~front)
            tex[hair] = HAIR_COLORS[attrs["hair"]]
            for du in (-0.06, 0.06):
                eye = inside & (np.abs(lu - 0.5 - du) < 0.035) & (np.abs(lv - 0.55) < 0.06)
                tex[eye] = EYE_COLOR
        elif part.endswith("upperarm"):
            tex[inside] = PALETTE[attrs["top"]]
        elif part.endswith("forearm"):
            tex[inside] = skin
        else:
            tex[inside] = PALETTE[attrs["bottom"]]
    return tex


def sample_attributes(rng: np.random.Generator) -> dict:
    names = list(PALETTE)
    top = names[rng.integers(len(names))]
    top_back = names[rng.integers(len(names))]
    bottom = names[rng.integers(len(names))]
    hair = list(HAIR_COLORS)[rng.integers(len(HAIR_COLORS))]
    skin = SKIN_TONES[rng.integers(len(SKIN_TONES))]
    return {"top": top, "top_back": top_back, "bottom": bottom, "hair": hair, "skin_rgb": list(skin)}


POSED_JOINTS = (1, 2, 4, 5, 7, 8, 10, 11, 13, 14)


def sample_pose(rng: np.random.Generator, num_joints: int, scale: float) -> PoseParams:
    q = quat_identity(num_joints)
    if scale > 0:
        for j in POSED_JOINTS:
            axis = rng.normal(size=3)
            q[j] = quat_from_axis_angle(axis, rng.uniform(-scale, scale))
    return PoseParams(q, np.zeros(3))


def ring_cameras(config: DataConfig, target) -> list[CameraParams]:
    return [
        CameraParams.orbit(360.0 * k / config.views, config.elevation, config.distance, target,
                           config.focal, config.resolution, config.resolution)
        for k in range(config.views)
    ]


def body_center(template: BodyTemplate) -> np.ndarray:
    return template.vertices.mean(axis=0)


@lru_cache(maxsize=64)
def _bases_for(template_seed: int | None, uv_resolution: int) -> UVBases:
    return uv_base_points(make_template(template_seed), uv_resolution)


def gt_cloud_from_texture(bases: UVBases, texture: np.ndarray, opacity: float) -> tuple[GaussianCloud, bytes]:
    """Prior cloud (zero offsets, surface-aligned frames) with texture-sampled colors, plus its PLY bytes.

    The returned cloud is the one decoded from those bytes, so loading the
    stored file reproduces it exactly.
    """
    colors = texture.reshape(-1, 3)[bases.texel_index]
    fp = bases.footprint
    scales = np.stack([0.6 * fp[:, 0], 0.6 * fp[:, 1], 0.3 * fp.min(axis=1)], axis=1)
    uv_map = encode_uv_channels(bases, opacity=np.full(len(bases), opacity), scales=scales, colors=colors)
    ply = cloud_to_ply_bytes(decode_uv_map(uv_map, bases))
    return cloud_from_ply_bytes(ply), ply


def _identity(seed: int, config: DataConfig):
    rng = np.random.default_rng([config.seed, seed])
    template_seed = int(rng.integers(2**31))
    return rng, template_seed, sample_attributes(rng)


def avatar_attributes(seed: int, config: DataConfig = DataConfig()) -> dict:
    """The texture attributes ``make_avatar(seed, config)`` will paint, without building the avatar."""
    return _identity(seed, config)[2]


def make_avatar(seed: int, config: DataConfig = DataConfig()) -> AvatarSample:
    """Deterministic synthetic avatar for ``seed``."""
    rng, template_seed, attrs = _identity(seed, config)
    template = make_template(template_seed)
    texture = paint_texture(attrs, config.uv_resolution)
    pose = sample_pose(rng, template.num_joints, config.pose_scale)
    bases = _bases_for(template_seed, config.uv_resolution)
    cloud, ply = gt_cloud_from_texture(bases, texture, config.opacity)
    cams = ring_cameras(config, body_center(template))
    attrs = dict(attrs, template_seed=template_seed)
    return AvatarSample(seed, template, texture, pose, cams, tokenize(caption_text(attrs)), attrs, cloud, bases, ply)


def render_sample_views(cloud: GaussianCloud, bases: UVBases, template: BodyTemplate, pose: PoseParams,
                        cameras) -> torch.Tensor:
    posed = deform(cloud, bases.skin_weights, template, pose)
    with torch.no_grad():
        return torch.stack([quantize(render(posed, cam).rgb) for cam in cameras])


def render_views(sample: AvatarSample, config: DataConfig = DataConfig(), views: int | None = None) -> RenderedViews:
    """Ring renders, conditioning maps and the frontal face crop of one avatar."""
    cams = sample.cameras
    if views is not None:
        if views < 1:
            raise ConfigError("views must be >= 1")
        cams = ring_cameras(DataConfig(**{**asdict(config), "views": views}), body_center(sample.template))
    images = render_sample_views(sample.gt_cloud, sample.bases, sample.template, sample.pose, cams)
    geom, skel = render_conditioning_maps(sample.template, sample.pose, cams)
    box = face_crop_box(sample.template, sample.pose, cams[0])
    face_cam = crop_camera(cams[0], box, config.face_resolution)
    face = render_sample_views(sample.gt_cloud, sample.bases, sample.template, sample.pose, [face_cam])[0]
    return RenderedViews(images, geom, skel, face, box, face_cam)


# ---------------------------------------------------------------------------
# on-disk layout


@dataclass
class LoadedSample:
    sample_id: str
    split: str
    template: BodyTemplate
    texture: np.ndarray
    pose: PoseParams
    cameras: list
    caption: list
    attributes: dict
    images: torch.Tensor  # (V, H, W, 3)
    geometry_maps: torch.Tensor  # (V, H, W, 3)
    skeleton_maps: torch.Tensor  # (V, H, W)
    face_image: torch.Tensor
    face_box: FaceBox
    face_camera: CameraParams
    gt_cloud: GaussianCloud
    uv_resolution: int

    @cached_property
    def bases(self) -> UVBases:
        return uv_base_points(self.template, self.uv_resolution)


def _sample_files(views: int) -> list[str]:
    files = ["template.json", "texture.png", "face.png", "caption.txt", "gt_cloud.ply", "meta.json"]
    for k in range(views):
        files += [f"views/{k:02d}.png", f"cond/{k:02d}_geom.png", f"cond/{k:02d}_skel.png"]
    return files


def _write_sample(sample: AvatarSample, rendered: RenderedViews, out: Path) -> None:
    (out / "views").mkdir(parents=True)
    (out / "cond").mkdir()
    (out / "template.json").write_text(sample.template.to_json())
    (out / "texture.png").write_bytes(png_bytes(sample.texture))
    (out / "face.png").write_bytes(png_bytes(rendered.face_image))
    (out / "caption.txt").write_text(detokenize(sample.caption) + "\n")
    (out / "gt_cloud.ply").write_bytes(sample.gt_ply or cloud_to_ply_bytes(sample.gt_cloud))
    for k in range(len(rendered.images)):
        (out / f"views/{k:02d}.png").write_bytes(png_bytes(rendered.images[k]))
        (out / f"cond/{k:02d}_geom.png").write_bytes(png_bytes(rendered.geometry_maps[k]))
        (out / f"cond/{k:02d}_skel.png").write_bytes(png_bytes(rendered.skeleton_maps[k]))
    meta = {
        "seed": sample.seed,
        "attributes": sample.attributes,
        "pose": sample.pose.to_dict(),
        "cameras": [c.to_dict() for c in sample.cameras],
        "face_box": asdict(rendered.face_box),
        "face_camera": rendered.face_camera.to_dict(),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def write_dataset(samples, directory, config: DataConfig = DataConfig(), rendered=None) -> dict:
    """Write samples and ``manifest.json`` under ``directory``; returns the manifest.

    Each sample directory is assembled in a temporary sibling and renamed into
    place.
    """
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    samples = list(samples)
    entries = []
    for i, sample in enumerate(samples):
        views = rendered[i] if rendered is not None else render_views(sample, config)
        sid = f"{i:05d}"
        split = "test" if i >= len(samples) - config.test_samples else "train"
        tmp = Path(tempfile.mkdtemp(prefix=f".{sid}-", dir=root))
        try:
            _write_sample(sample, views, tmp)
            final = root / sid
            if final.exists():
                shutil.rmtree(final)
            os.replace(tmp, final)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        entries.append({"id": sid, "seed": sample.seed, "split": split,
                        "files": [f"{sid}/{f}" for f in _sample_files(len(views.images))]})
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": config.seed,
        "views": config.views,
        "resolution": config.resolution,
        "uv_resolution": config.uv_resolution,
        "face_resolution": config.face_resolution,
        "config": asdict(config),
        "samples": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def synthesize(directory, config: DataConfig) -> dict:
    samples = [make_avatar(i, config) for i in range(config.num_samples)]
    return write_dataset(samples, directory, config)


def validate_manifest(directory) -> dict:
    root = Path(directory)
    path = root / "manifest.json"
    if not path.is_file():
        raise ManifestError("missing manifest", [path])
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"corrupt manifest ({e})", [path]) from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ManifestError(f"unsupported format_version {manifest.get('format_version')!r}", [path])
    missing = [root / f for entry in manifest["samples"] for f in entry["files"] if not (root / f).is_file()]
    if missing:
        raise ManifestError("dataset files missing", missing)
    return manifest


def load_sample(directory, entry: dict, uv_resolution: int) -> LoadedSample:
    root = Path(directory) / entry["id"]
    try:
        template = BodyTemplate.load(root / "template.json")
        meta = json.loads((root / "meta.json").read_text())
        cams = [CameraParams.from_dict(c) for c in meta["cameras"]]
        n = sum(1 for f in entry["files"] if f.startswith(f"{entry['id']}/views/"))
        images = torch.stack([torch.as_tensor(load_png(root / f"views/{k:02d}.png")) for k in range(n)])
        geom = torch.stack([torch.as_tensor(load_png(root / f"cond/{k:02d}_geom.png")) for k in range(n)])
        skel = torch.stack([torch.as_tensor(load_png(root / f"cond/{k:02d}_skel.png")) for k in range(n)])
        cloud = cloud_from_ply_bytes((root / "gt_cloud.ply").read_bytes())
        face = torch.as_tensor(load_png(root / "face.png"))
        texture = load_png(root / "texture.png")
        caption = tokenize((root / "caption.txt").read_text().strip())
    except (OSError, ValueError, KeyError) as e:
        raise ManifestError(f"corrupt sample {entry['id']} ({e})", [root]) from None
    return LoadedSample(
        sample_id=entry["id"], split=entry["split"], template=template, texture=texture,
        pose=PoseParams.from_dict(meta["pose"]), cameras=cams, caption=caption, attributes=meta["attributes"],
        images=images, geometry_maps=geom, skeleton_maps=skel, face_image=face,
        face_box=FaceBox(**meta["face_box"]), face_camera=CameraParams.from_dict(meta["face_camera"]),
        gt_cloud=cloud, uv_resolution=uv_resolution,
    )


def read_dataset(directory, split: str | None = None):
    """Validate and load a dataset; returns ``(manifest, samples)``."""
    manifest = validate_manifest(directory)
    entries = [e for e in manifest["samples"] if split is None or e["split"] == split]
    return manifest, [load_sample(directory, e, manifest["uv_resolution"]) for e in entries]


def rerender_views(sample: LoadedSample) -> torch.Tensor:
    """Render the stored ground-truth cloud under the stored pose and cameras."""
    return render_sample_views(sample.gt_cloud, sample.bases, sample.template, sample.pose, sample.cameras)
