"""Stage-1 backbone warmup, adapter training and guided sampling."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch

from ..checkpoint import load_checkpoint, restore_groups, save_checkpoint
from ..errors import ConfigError
from ..training import LossCurve, LossEma
from .model import ConditionSet, DiffusionConfig, MultiViewDenoiser
from .schedule import NoiseSchedule, add_noise, ddpm_step, make_schedule, sampling_timesteps

CONDITIONS = ("text", "reference", "face", "pose")


@dataclass(frozen=True)
class Stage1Config:
    views: tuple = (0, 2, 4, 6, 8, 10)  # ring indices of the target views
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sample_steps: int = 50
    guidance_scale: float = 2.0
    drop_prob: float = 0.1
    face_mask_prob: float = 0.3
    lr: float = 5e-5
    warmup_lr: float = 1e-3
    warmup_steps: int = 500
    warmup_batch: int = 8
    steps: int = 300
    seed: int = 0
    checkpoint_every: int = 0
    model: DiffusionConfig = field(default_factory=DiffusionConfig)

    def __post_init__(self):
        for name in ("drop_prob", "face_mask_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        for name in ("lr", "warmup_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.guidance_scale < 0:
            raise ConfigError("guidance_scale must be >= 0")
        if not self.views or 0 not in self.views:
            raise ConfigError("views must include the frontal view 0")
        if min(self.steps, self.warmup_steps) < 0:
            raise ConfigError("step counts must be >= 0")
        make_schedule(self.T, self.beta_start, self.beta_end)
        sampling_timesteps(self.T, self.sample_steps)

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Stage1Config":
        d = dict(d)
        if "model" in d:
            d["model"] = DiffusionConfig.from_dict(d["model"])
        if "views" in d:
            d["views"] = tuple(d["views"])
        return cls(**d)


@dataclass
class Stage1Batch:
    images: torch.Tensor  # (B, N, 3, H, W) targets in [0, 1]
    conditions: ConditionSet
    face_boxes: list  # per batch element, in reference-image pixels


def _chw(x: torch.Tensor) -> torch.Tensor:
    return x.movedim(-1, -3)


def batch_from_samples(samples, views) -> Stage1Batch:
    """Targets are the given ring views; the frontal render is the reference image."""
    views = list(views)
    images = torch.stack([_chw(s.images[views]) for s in samples])
    texts = [torch.as_tensor(s.caption, dtype=torch.long) for s in samples]
    text = torch.nn.utils.rnn.pad_sequence(texts, batch_first=True) if texts else torch.zeros(0, 0, dtype=torch.long)
    cond = ConditionSet(
        text=text,
        reference=torch.stack([_chw(s.images[0]) for s in samples]),
        face=torch.stack([_chw(s.face_image) for s in samples]),
        geometry=torch.stack([_chw(s.geometry_maps[views]) for s in samples]),
        skeleton=torch.stack([s.skeleton_maps[views][:, None] for s in samples]),
    )
    return Stage1Batch(images, cond, [s.face_box for s in samples])


@dataclass
class StepResult:
    loss: float
    drops: dict  # condition -> (B,) bool
    face_masked: torch.Tensor  # (B,) bool


def sample_drops(generator: torch.Generator, batch: int, drop_prob: float, face_mask_prob: float):
    """Independent per-condition drop flags plus the reference face-mask flag."""
    u = torch.rand(batch, len(CONDITIONS) + 1, generator=generator)
    drops = {c: u[:, i] < drop_prob for i, c in enumerate(CONDITIONS)}
    return drops, u[:, -1] < face_mask_prob


def mask_face(reference: torch.Tensor, boxes, masked: torch.Tensor) -> torch.Tensor:
    """Zero-fill each flagged reference image's face box."""
    out = reference.clone()
    for i, (box, m) in enumerate(zip(boxes, masked.tolist())):
        if m:
            ys, xs = box.slices()
            out[i, :, ys, xs] = 0.0
    return out


def train_step_stage1(batch: Stage1Batch, model: MultiViewDenoiser, schedule: NoiseSchedule,
                      generator: torch.Generator, optimizer, cfg: Stage1Config) -> StepResult:
    """One adapter update on the eps-prediction objective with condition dropout."""
    b = batch.images.shape[0]
    drops, face_masked = sample_drops(generator, b, cfg.drop_prob, cfg.face_mask_prob)
    t = torch.randint(0, schedule.T, (b,), generator=generator)
    z0 = batch.images * 2 - 1
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t = add_noise(z0, t, eps, schedule)
    c = batch.conditions
    cond = ConditionSet(c.text, mask_face(c.reference, batch.face_boxes, face_masked), c.face, c.geometry,
                        c.skeleton, drops["text"], drops["reference"], drops["face"], drops["pose"])
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss = ((model.denoise(z_t, t, cond) - eps) ** 2).mean()
    loss.backward()
    optimizer.step()
    return StepResult(float(loss.detach()), drops, face_masked)


def warmup_step(images: torch.Tensor, model: MultiViewDenoiser, schedule: NoiseSchedule,
                generator: torch.Generator, optimizer) -> float:
    """Unconditional single-view denoising update of the backbone; images (M, 3, H, W)."""
    m = images.shape[0]
    t = torch.randint(0, schedule.T, (m,), generator=generator)
    z0 = (images * 2 - 1)[:, None]
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    optimizer.zero_grad(set_to_none=True)
    loss = ((model(add_noise(z0, t, eps, schedule), t, None) - eps) ** 2).mean()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def guided_eps(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, g: float) -> torch.Tensor:
    """eps_u + g (eps_c - eps_u), evaluated as (1 - g) eps_u + g eps_c so g = 0 and g = 1 are exact."""
    return (1.0 - g) * eps_uncond + g * eps_cond


@torch.no_grad()
def sample_cfg(model: MultiViewDenoiser, cond: ConditionSet, schedule: NoiseSchedule, guidance_scale: float,
               steps: int, generator: torch.Generator, image_size: int | None = None, trace: list | None = None):
    """Ancestral DDPM sampling with classifier-free guidance -> (B, N, H, W, 3) images in [0, 1].

    ``trace`` (a list) receives one dict per step with t, eps_cond,
    eps_uncond and eps_hat.
    """
    if guidance_scale < 0:
        raise ConfigError("guidance_scale must be >= 0")
    model.eval()
    size = image_size or model.cfg.image_size
    b, n = cond.batch, cond.views
    enc_c = model.encode_conditions(cond)
    enc_u = model.encode_conditions(cond.dropped_all())
    z = torch.randn((b, n, 3, size, size), generator=generator)
    ts = sampling_timesteps(schedule.T, steps)
    for k, t in enumerate(ts):
        t_prev = ts[k + 1] if k + 1 < len(ts) else -1
        tt = torch.full((b,), t, dtype=torch.long)
        e_c = model(z, tt, enc_c)
        e_u = model(z, tt, enc_u)
        e = guided_eps(e_u, e_c, guidance_scale)
        if trace is not None:
            trace.append({"t": t, "eps_cond": e_c, "eps_uncond": e_u, "eps_hat": e})
        noise = torch.randn(z.shape, generator=generator)
        z = ddpm_step(z, t, t_prev, e, schedule, noise)
    return ((z.clamp(-1, 1) + 1) / 2).movedim(-3, -1)


# ---------------------------------------------------------------------------
# training loop


class Stage1Trainer:
    """Warmup of the backbone, then frozen-backbone adapter training."""

    def __init__(self, samples, cfg: Stage1Config):
        if not samples:
            raise ConfigError("stage-1 training needs at least one sample")
        self.samples = samples
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.schedule = cfg.schedule()
        self.model = MultiViewDenoiser(cfg.model)
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.ema = LossEma()
        self.step = 0
        self.warmed_up = False
        self.optimizer = None

    def warmup(self, steps: int | None = None) -> list[float]:
        steps = self.cfg.warmup_steps if steps is None else steps
        self.model.backbone.requires_grad_(True)
        opt = torch.optim.AdamW(self.model.backbone.parameters(), lr=self.cfg.warmup_lr)
        pool = torch.cat([_chw(s.images) for s in self.samples])
        losses = []
        for _ in range(steps):
            idx = torch.randint(0, pool.shape[0], (self.cfg.warmup_batch,), generator=self.generator)
            losses.append(warmup_step(pool[idx], self.model, self.schedule, self.generator, opt))
        self._start_adapters()
        return losses

    def _start_adapters(self) -> None:
        self.model.freeze_backbone()
        self.optimizer = torch.optim.AdamW(self.model.adapter_parameters(), lr=self.cfg.lr)
        self.warmed_up = True

    def next_batch(self) -> Stage1Batch:
        i = int(torch.randint(0, len(self.samples), (1,), generator=self.generator))
        return batch_from_samples([self.samples[i]], self.cfg.views)

    def train(self, steps: int, curve: LossCurve | None = None, checkpoint_path=None) -> list[StepResult]:
        if not self.warmed_up:
            raise ConfigError("run warmup before adapter training")
        results = []
        for _ in range(steps):
            r = train_step_stage1(self.next_batch(), self.model, self.schedule, self.generator, self.optimizer,
                                  self.cfg)
            self.step += 1
            ema = self.ema.update(r.loss)
            results.append(r)
            if curve is not None:
                curve.append(self.step, r.loss, ema)
            if checkpoint_path and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                self.save(checkpoint_path)
        return results

    def save(self, path) -> None:
        save_checkpoint(path, self.model.groups(), stage=1, step=self.step, config=self.cfg.to_dict(),
                        schedule=self.schedule.to_dict(), warmed_up=self.warmed_up,
                        optimizer=None if self.optimizer is None else self.optimizer.state_dict(),
                        generator=self.generator.get_state(), ema=self.ema.state_dict())

    @classmethod
    def resume(cls, samples, path) -> "Stage1Trainer":
        payload = load_checkpoint(path)
        if payload.get("stage") != 1:
            raise ConfigError(f"{path} is not a stage-1 checkpoint")
        trainer = cls(samples, Stage1Config.from_dict(payload["config"]))
        restore_groups(trainer.model.groups(), payload)
        if payload["warmed_up"]:
            trainer._start_adapters()
            trainer.optimizer.load_state_dict(payload["optimizer"])
        trainer.generator.set_state(payload["generator"])
        trainer.ema.load_state_dict(payload["ema"])
        trainer.step = payload["step"]
        return trainer


def load_denoiser(path):
    """-> (model, schedule, config) from a stage-1 checkpoint."""
    payload = load_checkpoint(path)
    if payload.get("stage") != 1:
        raise ConfigError(f"{path} is not a stage-1 checkpoint")
    cfg = Stage1Config.from_dict(payload["config"])
    model = MultiViewDenoiser(cfg.model)
    restore_groups(model.groups(), payload)
    if payload["warmed_up"]:
        model.freeze_backbone()
    model.eval()
    return model, NoiseSchedule.from_dict(payload["schedule"]), cfg
