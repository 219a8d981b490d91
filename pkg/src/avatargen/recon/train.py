"""Stage-2 batches, loss, training loop and animation."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from ..checkpoint import load_checkpoint, restore_groups, save_checkpoint
from ..errors import ConfigError, ShapeError
from ..gaussians import GaussianCloud, UVBases, decode_uv_map, deform, UVGaussianMap
from ..geometry import BodyTemplate, CameraParams, PoseParams
from ..metrics import LossWeights, PerceptualNet, total_loss_stage2
from ..splat import WHITE, render
from ..training import LossCurve, LossEma
from .model import ReconConfig, ReconModel, camera_vector

log = logging.getLogger(__name__)

FRONTAL_VIEW = 0


@dataclass
class ReconBatch:
    """Input views of one posed avatar plus what the loss renders against.

    ``target_views``/``target_cameras`` default to the input views.
    ``face_camera`` is the crop camera of the frontal face box; None means
    no box is available and the face term is skipped.
    """

    body_views: torch.Tensor  # (N, H, W, 3)
    cameras: list
    frontal: list
    face_image: torch.Tensor | None
    pose: PoseParams
    template: BodyTemplate
    bases: UVBases
    face_camera: CameraParams | None = None
    target_views: torch.Tensor | None = None
    target_cameras: list | None = None

    def __post_init__(self):
        n = self.body_views.shape[0]
        if n < 1:
            raise ShapeError("a batch needs at least one view")
        if len(self.cameras) != n or len(self.frontal) != n:
            raise ShapeError(f"{n} views but {len(self.cameras)} cameras and {len(self.frontal)} frontal flags")
        if not any(self.frontal):
            raise ConfigError("at least one input view must be flagged frontal")
        if len({tuple(v.shape) for v in self.body_views}) != 1:
            raise ShapeError("views must share a resolution")
        if (self.target_views is None) != (self.target_cameras is None):
            raise ConfigError("target_views and target_cameras go together")
        if self.target_views is not None and len(self.target_cameras) != self.target_views.shape[0]:
            raise ShapeError("one target camera per target view")

    @property
    def supervision(self):
        if self.target_views is None:
            return self.body_views, self.cameras
        return self.target_views, self.target_cameras

    def camera_tensor(self) -> torch.Tensor:
        return torch.as_tensor(np.stack([camera_vector(c) for c in self.cameras]), dtype=self.body_views.dtype)


def batch_from_sample(sample, inputs, targets=None) -> ReconBatch:
    """Build a batch from a loaded dataset sample and ring view indices."""
    inputs = list(inputs)
    targets = None if targets is None else list(targets)
    return ReconBatch(
        body_views=sample.images[inputs], cameras=[sample.cameras[i] for i in inputs],
        frontal=[i == FRONTAL_VIEW for i in inputs], face_image=sample.face_image, pose=sample.pose,
        template=sample.template, bases=sample.bases, face_camera=sample.face_camera,
        target_views=None if targets is None else sample.images[targets],
        target_cameras=None if targets is None else [sample.cameras[i] for i in targets],
    )


def predict_channels(model: ReconModel, batch: ReconBatch) -> torch.Tensor:
    face = None if batch.face_image is None else batch.face_image.unsqueeze(0)
    return model(batch.body_views.unsqueeze(0), batch.camera_tensor().unsqueeze(0), face)[0]


def reconstruct(batch: ReconBatch, model: ReconModel) -> GaussianCloud:
    """Canonical-pose cloud predicted from the batch's views."""
    return decode_uv_map(UVGaussianMap(predict_channels(model, batch), batch.bases.mask), batch.bases)


def stage2_loss(batch: ReconBatch, model: ReconModel, weights: LossWeights, net: PerceptualNet,
                background=WHITE) -> torch.Tensor:
    cloud = reconstruct(batch, model)
    posed = deform(cloud, batch.bases.skin_weights, batch.template, batch.pose)
    targets, cams = batch.supervision
    preds = torch.stack([render(posed, cam, background).rgb for cam in cams])
    pred_face = target_face = None
    if weights.lambda_face:
        if batch.face_camera is None or batch.face_image is None:
            log.warning("no frontal face box in batch; face term skipped")
        else:
            pred_face = render(posed, batch.face_camera, background).rgb
            target_face = batch.face_image
    return total_loss_stage2(preds, targets, pred_face, target_face, weights, net)


def train_step_stage2(batch: ReconBatch, model: ReconModel, weights: LossWeights, optimizer,
                      net: PerceptualNet) -> float:
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss = stage2_loss(batch, model, weights, net)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def animate(cloud: GaussianCloud, bases: UVBases, template: BodyTemplate, poses, camera: CameraParams,
            background=WHITE) -> torch.Tensor:
    """Deform and render the canonical cloud once per pose -> (T, H, W, 3)."""
    frames = []
    with torch.no_grad():
        for pose in poses:
            frames.append(render(deform(cloud, bases.skin_weights, template, pose), camera, background).rgb)
    return torch.stack(frames)


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class Stage2Config:
    """``input_views=None`` draws ``num_inputs`` ring views per step, frontal
    view always included; otherwise those fixed ring indices are used.
    Supervision views are drawn the same way, or equal the inputs when
    ``num_targets`` is None."""

    steps: int = 2000
    lr: float = 1e-5
    weight_decay: float = 0.0
    input_views: tuple | None = None
    num_inputs: int = 4
    num_targets: int | None = 4
    seed: int = 0
    checkpoint_every: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    model: ReconConfig = field(default_factory=ReconConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.num_inputs < 1:
            raise ConfigError("num_inputs must be >= 1")
        if self.input_views is not None and FRONTAL_VIEW not in self.input_views:
            raise ConfigError("input_views must include the frontal view 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Stage2Config":
        d = dict(d)
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        if "model" in d:
            d["model"] = ReconConfig(**d["model"])
        if d.get("input_views") is not None:
            d["input_views"] = tuple(d["input_views"])
        return cls(**d)


def pick_views(rng: np.random.Generator, num_views: int, k: int) -> list[int]:
    """Frontal view plus ``k - 1`` distinct others, in ring order."""
    if not 1 <= k <= num_views:
        raise ConfigError(f"cannot pick {k} of {num_views} views")
    others = rng.choice(np.arange(1, num_views), size=k - 1, replace=False)
    return sorted([FRONTAL_VIEW, *map(int, others)])


class Stage2Trainer:
    def __init__(self, samples, cfg: Stage2Config):
        if not samples:
            raise ConfigError("stage-2 training needs at least one sample")
        self.samples = samples
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.model = ReconModel(cfg.model)
        self.optimizer = torch.optim.AdamW(self.model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.net = PerceptualNet()
        self.rng = np.random.default_rng(cfg.seed)
        self.ema = LossEma()
        self.step = 0

    def next_batch(self) -> ReconBatch:
        sample = self.samples[int(self.rng.integers(len(self.samples)))]
        v = sample.images.shape[0]
        inputs = list(self.cfg.input_views) if self.cfg.input_views is not None else pick_views(
            self.rng, v, self.cfg.num_inputs)
        targets = None if self.cfg.num_targets is None else pick_views(self.rng, v, self.cfg.num_targets)
        return batch_from_sample(sample, inputs, targets)

    def train(self, steps: int, curve: LossCurve | None = None, checkpoint_path=None) -> list[float]:
        losses = []
        for _ in range(steps):
            loss = train_step_stage2(self.next_batch(), self.model, self.cfg.weights, self.optimizer, self.net)
            self.step += 1
            ema = self.ema.update(loss)
            losses.append(loss)
            if curve is not None:
                curve.append(self.step, loss, ema)
            if checkpoint_path and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                self.save(checkpoint_path)
        return losses

    def save(self, path) -> None:
        save_checkpoint(path, self.model.groups(), stage=2, step=self.step, config=self.cfg.to_dict(),
                        optimizer=self.optimizer.state_dict(), rng=self.rng.bit_generator.state,
                        ema=self.ema.state_dict(), torch_rng=torch.get_rng_state())

    @classmethod
    def resume(cls, samples, path) -> "Stage2Trainer":
        payload = load_checkpoint(path)
        if payload.get("stage") != 2:
            raise ConfigError(f"{path} is not a stage-2 checkpoint")
        trainer = cls(samples, Stage2Config.from_dict(payload["config"]))
        restore_groups(trainer.model.groups(), payload)
        trainer.optimizer.load_state_dict(payload["optimizer"])
        trainer.rng.bit_generator.state = payload["rng"]
        trainer.ema.load_state_dict(payload["ema"])
        torch.set_rng_state(payload["torch_rng"])
        trainer.step = payload["step"]
        return trainer


def load_recon_model(path) -> ReconModel:
    payload = load_checkpoint(path)
    if payload.get("stage") != 2:
        raise ConfigError(f"{path} is not a stage-2 checkpoint")
    model = ReconModel(Stage2Config.from_dict(payload["config"]).model)
    restore_groups(model.groups(), payload)
    model.eval()
    return model
