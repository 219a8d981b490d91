"""``avatargen`` command-line entry point.

Exit codes: 0 success, 2 invalid input or configuration, 3 runtime failure.
Every command validates all of its inputs before creating any output file.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import data as data_mod
from .config import RunConfig
from .errors import AvatarError
from .gaussians import read_ply, uv_base_points, write_ply
from .geometry import BodyTemplate, CameraParams, PoseParams, make_template
from .images import load_png, save_png
from .metrics import evaluate_images
from .training import LossCurve

log = logging.getLogger("avatargen")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


class InvalidInput(Exception):
    """Raised during validation; maps to exit code 2."""


def _validate(fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except InvalidInput:
        raise
    except (AvatarError, ValueError, KeyError, OSError, json.JSONDecodeError) as e:
        raise InvalidInput(str(e)) from None


def _load_config(args) -> RunConfig:
    cfg = RunConfig() if args.config is None else _validate(RunConfig.load, args.config)
    if args.seed is not None:
        cfg = _validate(cfg.with_seed, args.seed)
    return cfg


def _read_json(path, what: str):
    p = Path(path)
    if not p.is_file():
        raise InvalidInput(f"{what} not found: {p}")
    return _validate(lambda: json.loads(p.read_text()))


def _image(path, what: str, channels: int = 3) -> torch.Tensor:
    p = Path(path)
    if not p.is_file():
        raise InvalidInput(f"{what} not found: {p}")
    img = _validate(load_png, p)
    if channels == 3 and (img.ndim != 3 or img.shape[-1] < 3):
        raise InvalidInput(f"{what} must be an RGB image: {p}")
    return torch.as_tensor(img[..., :3] if channels == 3 else img)


def _numbered_pngs(directory, suffix: str = "") -> list[Path]:
    files = sorted(Path(directory).glob(f"[0-9][0-9]{suffix}.png"))
    return files


def _train_split(directory):
    manifest, samples = _validate(data_mod.read_dataset, directory)
    train = [s for s in samples if s.split == "train"]
    if not train:
        raise InvalidInput(f"dataset {directory} has no training samples")
    return manifest, train


def _check_dataset_matches(cfg: RunConfig, manifest: dict, need_views: int) -> None:
    if manifest["resolution"] != cfg.data.resolution:
        raise InvalidInput(f"resolution: dataset is {manifest['resolution']}, config says {cfg.data.resolution}")
    if manifest["views"] < need_views:
        raise InvalidInput(f"views: dataset has {manifest['views']} ring views, config needs {need_views}")


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args) -> int:
    cfg = _load_config(args)
    manifest = data_mod.synthesize(args.out, cfg.data)
    n = len(manifest["samples"])
    print(f"wrote {n} samples x {cfg.data.views} views at {cfg.data.resolution}px to {args.out} "
          f"({sum(e['split'] == 'test' for e in manifest['samples'])} test)")
    return EXIT_OK


def cmd_train_stage1(args) -> int:
    from .diffusion.train import Stage1Trainer

    cfg = _load_config(args)
    manifest, samples = _train_split(args.data)
    _check_dataset_matches(cfg, manifest, max(cfg.stage1.views) + 1)
    if args.resume and not Path(args.resume).is_file():
        raise InvalidInput(f"checkpoint to resume not found: {args.resume}")
    steps = cfg.stage1.steps if args.steps is None else args.steps
    out = Path(args.out)
    if args.resume:
        trainer = _validate(Stage1Trainer.resume, samples, args.resume)
        curve = LossCurve(out.with_suffix(".csv"), resume_step=trainer.step)
    else:
        trainer = Stage1Trainer(samples, cfg.stage1)
        curve = LossCurve(out.with_suffix(".csv"))
        trainer.warmup()
    trainer.train(steps, curve, checkpoint_path=out)
    trainer.save(out)
    print(f"stage-1 step {trainer.step}, ema_loss {trainer.ema.corrected:.5f}; checkpoint {out}")
    return EXIT_OK


def cmd_train_stage2(args) -> int:
    from .recon.train import Stage2Trainer

    cfg = _load_config(args)
    manifest, samples = _train_split(args.data)
    need = max(cfg.stage2.input_views) + 1 if cfg.stage2.input_views else max(cfg.stage2.num_inputs,
                                                                              cfg.stage2.num_targets or 1)
    _check_dataset_matches(cfg, manifest, need)
    if args.resume and not Path(args.resume).is_file():
        raise InvalidInput(f"checkpoint to resume not found: {args.resume}")
    steps = cfg.stage2.steps if args.steps is None else args.steps
    out = Path(args.out)
    if args.resume:
        trainer = _validate(Stage2Trainer.resume, samples, args.resume)
        curve = LossCurve(out.with_suffix(".csv"), resume_step=trainer.step)
    else:
        trainer = Stage2Trainer(samples, cfg.stage2)
        curve = LossCurve(out.with_suffix(".csv"))
    trainer.train(steps, curve, checkpoint_path=out)
    trainer.save(out)
    print(f"stage-2 step {trainer.step}, ema_loss {trainer.ema.corrected:.5f}; checkpoint {out}")
    return EXIT_OK


def cmd_generate_views(args) -> int:
    from .data import tokenize
    from .diffusion.model import ConditionSet
    from .diffusion.train import load_denoiser, sample_cfg

    model, schedule, s1 = _validate(load_denoiser, args.ckpt)
    res = s1.model.image_size
    ref = _image(args.ref, "reference image")
    geoms = _numbered_pngs(args.pose_maps, "_geom")
    if not geoms:
        raise InvalidInput(f"no conditioning maps (NN_geom.png) in {args.pose_maps}")
    skels = [g.with_name(g.name.replace("_geom", "_skel")) for g in geoms]
    missing = [str(s) for s in skels if not s.is_file()]
    if missing:
        raise InvalidInput(f"missing skeleton maps: {', '.join(missing)}")
    geo = torch.stack([_image(g, "geometry map") for g in geoms])
    skel = torch.stack([_image(s, "skeleton map", channels=1) for s in skels])
    if skel.ndim == 4:
        skel = skel[..., 0]
    if ref.shape[:2] != (res, res) or geo.shape[1:3] != (res, res) or skel.shape[1:] != (res, res):
        raise InvalidInput(f"reference and conditioning maps must be {res}x{res}")
    tokens = _validate(tokenize, args.text)
    fr = s1.model.face_resolution
    face = _image(args.face, "face image") if args.face else torch.zeros(fr, fr, 3)
    if face.shape[:2] != (fr, fr):
        raise InvalidInput(f"face image must be {fr}x{fr}")
    g = s1.guidance_scale if args.guidance_scale is None else args.guidance_scale
    if g < 0:
        raise InvalidInput("guidance_scale must be >= 0")
    steps = s1.sample_steps if args.steps is None else args.steps
    if not 1 <= steps <= schedule.T:
        raise InvalidInput(f"steps must be in [1, {schedule.T}]")
    cameras = None
    cam_file = Path(args.pose_maps) / "cameras.json"
    if cam_file.is_file():
        cameras = _read_json(cam_file, "cameras")
        if len(cameras) != len(geoms):
            raise InvalidInput("cameras.json must list one camera per conditioning map")

    seed = s1.seed if args.seed is None else args.seed
    cond = ConditionSet(
        text=torch.as_tensor([tokens], dtype=torch.long).reshape(1, -1),
        reference=ref.movedim(-1, 0)[None], face=face.movedim(-1, 0)[None],
        geometry=geo.movedim(-1, 1)[None], skeleton=skel[:, None][None],
        drop_face=torch.tensor([args.face is None]),
    )
    images = sample_cfg(model, cond, schedule, g, steps, torch.Generator().manual_seed(seed))[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, img in enumerate(images):
        save_png(out / f"{k:02d}.png", img)
    (out / "provenance.json").write_text(json.dumps(
        {"seed": seed, "guidance_scale": g, "prompt": args.text, "steps": steps, "checkpoint": str(args.ckpt),
         "views": len(images)}, indent=1))
    meta = {"frontal": [k == 0 for k in range(len(images))]}
    if cameras is not None:
        meta["cameras"] = cameras
    (out / "views.json").write_text(json.dumps(meta, indent=1))
    print(f"wrote {len(images)} views to {out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from .recon.train import ReconBatch, load_recon_model, reconstruct
    from .gaussians import deform
    from .splat import render

    model = _validate(load_recon_model, args.ckpt)
    views_dir = Path(args.views)
    files = _numbered_pngs(views_dir)
    if not files:
        raise InvalidInput(f"no view images (NN.png) in {views_dir}")
    meta = _read_json(views_dir / "views.json", "views.json")
    frontal = meta.get("frontal")
    if not isinstance(frontal, list) or len(frontal) != len(files) or not any(frontal):
        raise InvalidInput("views.json needs a 'frontal' list with one flag per view and at least one true")
    if "cameras" not in meta or len(meta["cameras"]) != len(files):
        raise InvalidInput("views.json needs one camera per view under 'cameras'")
    cameras = [_validate(CameraParams.from_dict, c) for c in meta["cameras"]]
    template = _validate(BodyTemplate.load, args.template) if args.template else make_template()
    pose = _validate(PoseParams.from_dict, meta["pose"]) if "pose" in meta else PoseParams.identity(
        template.num_joints)
    views = torch.stack([_image(f, "view") for f in files])
    res = model.cfg.image_size
    if views.shape[1:3] != (res, res):
        raise InvalidInput(f"views must be {res}x{res}")
    fr = model.cfg.face_resolution
    face = _image(args.face, "face image")
    if face.shape[:2] != (fr, fr):
        raise InvalidInput(f"face image must be {fr}x{fr}")
    bases = _validate(uv_base_points, template, model.cfg.uv_resolution)
    batch = _validate(ReconBatch, views, cameras, frontal, face, pose, template, bases)

    with torch.no_grad():
        cloud = reconstruct(batch, model)
        posed = deform(cloud, bases.skin_weights, template, pose)
        renders = torch.stack([render(posed, cam).rgb for cam in cameras])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ply(cloud, out)
    render_dir = out.with_name(out.stem + "_renders")
    render_dir.mkdir(exist_ok=True)
    for k, img in enumerate(renders):
        save_png(render_dir / f"{k:02d}.png", img)
    report = evaluate_images(renders.clamp(0, 1), views)
    out.with_name(out.stem + "_metrics.json").write_text(json.dumps(report, indent=1))
    print(f"wrote {len(cloud)} gaussians to {out}; psnr vs inputs {report['aggregate']['psnr']:.2f} dB")
    return EXIT_OK


def cmd_animate(args) -> int:
    from .recon.train import animate

    cloud = _validate(read_ply, args.ply)
    template = _validate(BodyTemplate.load, args.template)
    raw = _read_json(args.poses, "pose file")
    if not isinstance(raw, list) or not raw:
        raise InvalidInput("pose file must be a non-empty JSON array of poses")
    poses = [_validate(PoseParams.from_dict, p) for p in raw]
    if any(p.joint_rotations.shape[0] != template.num_joints for p in poses):
        raise InvalidInput(f"every pose needs {template.num_joints} joint rotations")
    uv_res = args.uv_resolution
    bases = _validate(uv_base_points, template, uv_res)
    if cloud.texel_index.shape[0] != len(bases) or not torch.equal(
            cloud.texel_index.cpu(), torch.as_tensor(bases.texel_index).to(cloud.texel_index.dtype)):
        raise InvalidInput("the cloud's texels do not match this template at the given uv resolution")
    if args.camera:
        camera = _validate(CameraParams.from_dict, _read_json(args.camera, "camera"))
    else:
        d = data_mod.DataConfig()
        camera = CameraParams.orbit(0.0, d.elevation, d.distance, data_mod.body_center(template), d.focal,
                                    d.resolution, d.resolution)
    frames = animate(cloud, bases, template, poses, camera)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, img in enumerate(frames):
        save_png(out / f"{k:03d}.png", img)
    print(f"wrote {len(frames)} frames to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise InvalidInput(f"not a directory: {d}")
    gt_files = sorted(p.name for p in gt_dir.glob("*.png"))
    if not gt_files:
        raise InvalidInput(f"no PNG images in {gt_dir}")
    missing = [n for n in gt_files if not (pred_dir / n).is_file()]
    if missing:
        raise InvalidInput(f"predictions missing for: {', '.join(missing)}")
    pred = [_image(pred_dir / n, "prediction") for n in gt_files]
    gt = [_image(gt_dir / n, "ground truth") for n in gt_files]
    if any(p.shape != g.shape for p, g in zip(pred, gt)):
        raise InvalidInput("prediction and ground-truth sizes differ")
    report = evaluate_images(torch.stack(pred), torch.stack(gt))
    for entry, name in zip(report["per_view"], gt_files):
        entry["file"] = name
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=1))
    agg = report["aggregate"]
    print(f"{len(gt_files)} views: mse {agg['mse']:.6f} psnr {agg['psnr']:.2f} ssim {agg['ssim']:.4f} "
          f"perceptual {agg['perceptual']:.5f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avatargen", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        sp.add_argument("--seed", type=int, default=None, help="overrides every seed in the config")
        return sp

    sp = add("synth-data", cmd_synth_data, "write a synthetic avatar dataset")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)

    for name, fn in (("train-stage1", cmd_train_stage1), ("train-stage2", cmd_train_stage2)):
        sp = add(name, fn, f"run the {name[-6:]} training loop")
        sp.add_argument("--config")
        sp.add_argument("--data", required=True)
        sp.add_argument("--out", required=True, help="checkpoint path; the loss curve goes next to it as .csv")
        sp.add_argument("--steps", type=int, default=None)
        sp.add_argument("--resume", default=None, help="checkpoint to continue from")

    sp = add("generate-views", cmd_generate_views, "sample multi-view images from a stage-1 checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--pose-maps", required=True, help="directory of NN_geom.png / NN_skel.png maps")
    sp.add_argument("--text", required=True)
    sp.add_argument("--face", default=None)
    sp.add_argument("--guidance-scale", type=float, default=None)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--out", required=True)

    sp = add("reconstruct", cmd_reconstruct, "predict a canonical Gaussian avatar from views")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--views", required=True, help="directory of NN.png views plus views.json")
    sp.add_argument("--face", required=True)
    sp.add_argument("--template", default=None)
    sp.add_argument("--out", required=True)

    sp = add("animate", cmd_animate, "render a reconstructed avatar under a pose sequence")
    sp.add_argument("--ply", required=True)
    sp.add_argument("--template", required=True)
    sp.add_argument("--poses", required=True)
    sp.add_argument("--camera", default=None)
    sp.add_argument("--uv-resolution", type=int, default=64)
    sp.add_argument("--out", required=True)

    sp = add("evaluate", cmd_evaluate, "compare predicted and ground-truth images")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_INVALID if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.seed is not None:
        torch.manual_seed(args.seed)
    try:
        return args.fn(args)
    except InvalidInput as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
