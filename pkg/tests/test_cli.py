import json
import shutil
import subprocess
import sys

import numpy as np
import pytest
import torch

from avatargen.cli import main
from avatargen.config import RunConfig
from avatargen.errors import ConfigError
from avatargen.gaussians import read_ply
from avatargen.geometry import BodyTemplate, CameraParams, PoseParams
from avatargen.images import load_png, png_bytes
from avatargen.splat import render
from avatargen.training import read_loss_curve

TINY = {
    "data": {"num_samples": 2, "views": 4, "resolution": 16, "uv_resolution": 16, "face_resolution": 16,
             "focal": 25.0, "seed": 5},
    "stage1": {"views": [0, 2], "T": 20, "sample_steps": 4, "warmup_steps": 2, "warmup_batch": 2, "steps": 10,
               "lr": 1e-3, "model": {"widths": [8, 8, 16, 16], "heads": 2, "ctx_dim": 16, "time_dim": 16,
                                     "face_tokens": 4, "pose_window": 2}},
    "stage2": {"num_inputs": 2, "num_targets": 2, "steps": 10, "lr": 1e-3,
               "model": {"patch": 4, "dim": 32, "heads": 2, "decoder_layers": 2, "uv_patch": 4}},
}


def write_config(path, **overrides):
    cfg = json.loads(json.dumps(TINY))
    for key, value in overrides.items():
        section, _, name = key.rpartition(".")
        (cfg[section] if section else cfg)[name] = value
    path.write_text(json.dumps(cfg))
    return path


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """Dataset plus 10-step checkpoints of both stages, shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "cfg.json")
    assert main(["synth-data", "--config", str(cfg), "--out", str(root / "ds")]) == 0
    assert main(["train-stage1", "--config", str(cfg), "--data", str(root / "ds"), "--out", str(root / "s1.pt")]) == 0
    assert main(["train-stage2", "--config", str(cfg), "--data", str(root / "ds"), "--out", str(root / "s2.pt")]) == 0
    return root


# --- config ---------------------------------------------------------------------------------------


def test_run_config_defaults():
    cfg = RunConfig()
    assert (cfg.stage1.drop_prob, cfg.stage1.face_mask_prob) == (0.10, 0.30)
    assert (cfg.stage1.lr, cfg.stage2.lr) == (5e-5, 1e-5)


@pytest.mark.parametrize("field,value", [("drop_prob", 1.5), ("face_mask_prob", -0.1), ("lr1", 0.0), ("lr2", -1.0)])
def test_run_config_rejects(field, value):
    with pytest.raises(ConfigError):
        RunConfig.from_dict({field: value})


def test_seed_flag_overrides_every_seed():
    cfg = RunConfig.from_dict(TINY).with_seed(42)
    assert cfg.data.seed == cfg.stage1.seed == cfg.stage2.seed == 42


# --- synth-data -----------------------------------------------------------------------------------------


def test_synth_data_counts_and_determinism(run, tmp_path, capsys):
    assert len(list((run / "ds").glob("*/views/*.png"))) == 8
    assert main(["synth-data", "--config", str(run / "cfg.json"), "--out", str(tmp_path / "again")]) == 0
    assert "2 samples x 4 views" in capsys.readouterr().out
    assert tree_bytes(tmp_path / "again") == tree_bytes(run / "ds")


def test_bad_probability_exits_2_before_writing(tmp_path, capsys):
    cfg = write_config(tmp_path / "bad.json", **{"stage1.drop_prob": 1.5})
    assert main(["synth-data", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 2
    assert "drop_prob" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_unknown_field_and_bad_json(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"dropout": 0.1}))
    assert main(["synth-data", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 2
    assert "dropout" in capsys.readouterr().err
    (tmp_path / "c.json").write_text("{")
    assert main(["synth-data", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 2


def test_usage_errors_exit_2():
    assert main(["no-such-command"]) == 2
    assert main(["synth-data"]) == 2


# --- training ---------------------------------------------------------------------------------------------


@pytest.mark.parametrize("stage", ["stage1", "stage2"])
def test_train_csv_and_resume(run, tmp_path, stage):
    ckpt = tmp_path / f"{stage}.pt"
    shutil.copy(run / f"s{stage[-1]}.pt", ckpt)
    shutil.copy(run / f"s{stage[-1]}.csv", ckpt.with_suffix(".csv"))
    rows = read_loss_curve(ckpt.with_suffix(".csv"))
    assert [r["step"] for r in rows] == list(range(1, 11))
    args = ["--config", str(run / "cfg.json"), "--data", str(run / "ds"), "--out", str(ckpt)]
    assert main([f"train-{stage}", *args, "--resume", str(ckpt), "--steps", "5"]) == 0
    rows = read_loss_curve(ckpt.with_suffix(".csv"))
    assert [r["step"] for r in rows] == list(range(1, 16))


def test_train_rejects_missing_dataset(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json")
    code = main(["train-stage2", "--config", str(cfg), "--data", str(tmp_path / "nope"), "--out",
                 str(tmp_path / "s2.pt")])
    assert code == 2 and "manifest.json" in capsys.readouterr().err
    assert not (tmp_path / "s2.pt").exists() and not (tmp_path / "s2.csv").exists()


def test_train_rejects_resolution_mismatch(run, tmp_path, capsys):
    cfg = json.loads(json.dumps(TINY))
    cfg["data"]["resolution"] = 24
    cfg["stage1"]["model"]["pose_window"] = 1
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code = main(["train-stage1", "--config", str(tmp_path / "c.json"), "--data", str(run / "ds"), "--out",
                 str(tmp_path / "s1.pt")])
    assert code == 2 and "resolution" in capsys.readouterr().err


# --- generate-views ------------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def pose_maps(run):
    d = run / "maps"
    d.mkdir(exist_ok=True)
    for k, ring in enumerate((0, 2)):
        for kind in ("geom", "skel"):
            shutil.copy(run / "ds" / "00000" / "cond" / f"{ring:02d}_{kind}.png", d / f"{k:02d}_{kind}.png")
    return d


def generate(run, pose_maps, out, text, *extra):
    return main(["generate-views", "--ckpt", str(run / "s1.pt"), "--ref", str(run / "ds" / "00000" / "views" /
                 "00.png"), "--pose-maps", str(pose_maps), "--text", text, "--out", str(out), "--seed", "3", *extra])


def test_generate_views_files_and_provenance(run, pose_maps, tmp_path):
    assert generate(run, pose_maps, tmp_path / "a", "a person wearing a red shirt") == 0
    assert sorted(p.name for p in (tmp_path / "a").glob("*.png")) == ["00.png", "01.png"]
    prov = json.loads((tmp_path / "a" / "provenance.json").read_text())
    assert prov["seed"] == 3 and prov["prompt"] == "a person wearing a red shirt"
    assert generate(run, pose_maps, tmp_path / "b", "a person wearing a red shirt") == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_zero_guidance_ignores_text(run, pose_maps, tmp_path):
    assert generate(run, pose_maps, tmp_path / "r", "a person wearing a red shirt", "--guidance-scale", "0") == 0
    assert generate(run, pose_maps, tmp_path / "b", "a person wearing a blue shirt", "--guidance-scale", "0") == 0
    for k in ("00.png", "01.png"):
        assert (tmp_path / "r" / k).read_bytes() == (tmp_path / "b" / k).read_bytes()


def test_generate_views_missing_maps(run, pose_maps, tmp_path, capsys):
    partial = tmp_path / "maps"
    shutil.copytree(pose_maps, partial)
    (partial / "01_skel.png").unlink()
    assert generate(run, partial, tmp_path / "out", "a person") == 2
    assert "01_skel.png" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()
    assert generate(run, tmp_path / "empty", tmp_path / "out", "a person") == 2


# --- reconstruct / animate / evaluate ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def views_dir(run):
    d = run / "views_in"
    d.mkdir(exist_ok=True)
    meta = json.loads((run / "ds" / "00000" / "meta.json").read_text())
    for k in range(2):
        shutil.copy(run / "ds" / "00000" / "views" / f"{k:02d}.png", d / f"{k:02d}.png")
    (d / "views.json").write_text(json.dumps({"frontal": [True, False], "cameras": meta["cameras"][:2],
                                              "pose": meta["pose"]}))
    return d


def reconstruct(run, views, out):
    return main(["reconstruct", "--ckpt", str(run / "s2.pt"), "--views", str(views), "--face",
                 str(run / "ds" / "00000" / "face.png"), "--template", str(run / "ds" / "00000" / "template.json"),
                 "--out", str(out)])


def test_reconstruct_outputs(run, views_dir, tmp_path):
    assert reconstruct(run, views_dir, tmp_path / "avatar.ply") == 0
    cloud = read_ply(tmp_path / "avatar.ply")
    assert len(cloud) > 0
    assert sorted(p.name for p in (tmp_path / "avatar_renders").iterdir()) == ["00.png", "01.png"]
    report = json.loads((tmp_path / "avatar_metrics.json").read_text())
    assert len(report["per_view"]) == 2 and "psnr" in report["aggregate"]


def test_reconstruct_requires_frontal(run, views_dir, tmp_path, capsys):
    d = tmp_path / "v"
    shutil.copytree(views_dir, d)
    meta = json.loads((d / "views.json").read_text())
    meta["frontal"] = [False, False]
    (d / "views.json").write_text(json.dumps(meta))
    assert reconstruct(run, d, tmp_path / "out" / "a.ply") == 2
    assert "frontal" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_animate_identity_equals_canonical_render(run, views_dir, tmp_path):
    assert reconstruct(run, views_dir, tmp_path / "avatar.ply") == 0
    template = BodyTemplate.load(run / "ds" / "00000" / "template.json")
    ident = PoseParams.identity(template.num_joints).to_dict()
    (tmp_path / "poses.json").write_text(json.dumps([ident, ident]))
    meta = json.loads((views_dir / "views.json").read_text())
    (tmp_path / "cam.json").write_text(json.dumps(meta["cameras"][0]))
    code = main(["animate", "--ply", str(tmp_path / "avatar.ply"), "--template", str(run / "ds" / "00000" /
                 "template.json"), "--poses", str(tmp_path / "poses.json"), "--camera", str(tmp_path / "cam.json"),
                 "--uv-resolution", "16", "--out", str(tmp_path / "frames")])
    assert code == 0
    frames = sorted((tmp_path / "frames").glob("*.png"))
    assert len(frames) == 2
    with torch.no_grad():
        canonical = render(read_ply(tmp_path / "avatar.ply"), CameraParams.from_dict(meta["cameras"][0])).rgb
    assert frames[0].read_bytes() == png_bytes(canonical) == frames[1].read_bytes()


def test_animate_rejects_wrong_joint_count(run, views_dir, tmp_path, capsys):
    assert reconstruct(run, views_dir, tmp_path / "avatar.ply") == 0
    (tmp_path / "poses.json").write_text(json.dumps([PoseParams.identity(2).to_dict()]))
    code = main(["animate", "--ply", str(tmp_path / "avatar.ply"), "--template", str(run / "ds" / "00000" /
                 "template.json"), "--poses", str(tmp_path / "poses.json"), "--uv-resolution", "16", "--out",
                 str(tmp_path / "frames")])
    assert code == 2 and "joint rotations" in capsys.readouterr().err
    assert not (tmp_path / "frames").exists()


def test_evaluate_pred_equals_gt(run, tmp_path):
    gt = run / "ds" / "00000" / "views"
    assert main(["evaluate", "--pred", str(gt), "--gt", str(gt), "--out", str(tmp_path / "r.json")]) == 0
    agg = json.loads((tmp_path / "r.json").read_text())["aggregate"]
    assert agg["psnr"] == 100.0 and agg["mse"] == 0.0 and agg["perceptual"] == 0.0
    assert agg["ssim"] == pytest.approx(1.0, abs=1e-9)


def test_evaluate_missing_prediction(run, tmp_path, capsys):
    gt = run / "ds" / "00000" / "views"
    shutil.copytree(gt, tmp_path / "pred")
    (tmp_path / "pred" / "02.png").unlink()
    assert main(["evaluate", "--pred", str(tmp_path / "pred"), "--gt", str(gt), "--out",
                 str(tmp_path / "r.json")]) == 2
    assert "02.png" in capsys.readouterr().err and not (tmp_path / "r.json").exists()


def test_evaluate_report_values(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    img = np.zeros((16, 16, 3))
    (a / "00.png").write_bytes(png_bytes(img))
    (b / "00.png").write_bytes(png_bytes(img + 0.1))
    assert main(["evaluate", "--pred", str(a), "--gt", str(b), "--out", str(tmp_path / "r.json")]) == 0
    mse = float(np.mean((load_png(a / "00.png") - load_png(b / "00.png")) ** 2))
    agg = json.loads((tmp_path / "r.json").read_text())["aggregate"]
    assert agg["mse"] == pytest.approx(mse, rel=1e-6)


def test_console_module_help():
    out = subprocess.run([sys.executable, "-m", "avatargen.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("synth-data", "train-stage1", "train-stage2", "generate-views", "reconstruct", "animate", "evaluate"):
        assert cmd in out.stdout
