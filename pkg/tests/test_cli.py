import json

import numpy as np
import pytest

from detailsdf import cli
from detailsdf import evalkit as ek
from detailsdf import meshsdf as ms
from detailsdf.render import Camera, CameraError, load_png

TINY = {
    "geo": {"width": 16, "depth": 4, "skip_at": 2, "feature_dim": 4},
    "radiance": {"width": 16},
    "coarse": {"epochs": 40, "points_per_epoch": 256, "batch_size": 256, "lr": 3e-3, "n_holdout": 256},
    "detail": {"epochs": 1, "rays_per_step": 256, "drift_points": 128, "dump_every": 1},
    "eval": {"grid_res": 24},
    "synth": {"size": 16, "n_reference": 300, "prior_subdivisions": 2},
}


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    (d / "cfg.json").write_text(json.dumps(TINY))
    assert cli.main(["synth", "--config", str(d / "cfg.json"), "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def distilled(scene_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    args = ["distill", "--config", str(scene_dir / "cfg.json"), "--mesh", str(scene_dir / "prior.obj"), "--out", str(out)]
    assert cli.main(args) == 0
    return out


def test_synth_writes_inputs(scene_dir):
    for name in ("image.png", "mask.png", "camera.txt", "reference.obj", "prior.obj"):
        assert (scene_dir / name).exists()
    cam = cli.read_camera(scene_dir / "camera.txt")
    assert (cam.height, cam.width) == (16, 16)


def test_distill_layout_and_determinism(distilled, scene_dir, tmp_path):
    for sub in ("checkpoints/coarse.ckpt", "metrics/coarse.jsonl", "meshes/coarse.obj", "config.echo"):
        assert (distilled / sub).exists()
    echo = json.loads((distilled / "config.echo").read_text())
    assert echo["geo"]["width"] == 16
    # the echo alone is enough to rerun, and the rerun is byte-identical
    (tmp_path / "echo.json").write_text(json.dumps(echo))
    assert cli.main(["distill", "--config", str(tmp_path / "echo.json"), "--out", str(tmp_path / "again")]) == 0
    a = (tmp_path / "again/checkpoints/coarse.ckpt").read_bytes()
    assert a == (distilled / "checkpoints/coarse.ckpt").read_bytes()


def test_rerun_same_seed_identical_bytes(scene_dir, tmp_path):
    args = ["distill", "--config", str(scene_dir / "cfg.json"), "--mesh", str(scene_dir / "prior.obj"),
            "--set", "coarse.epochs=3"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a/checkpoints/coarse.ckpt").read_bytes() == (tmp_path / "b/checkpoints/coarse.ckpt").read_bytes()
    assert cli.main(args + ["--out", str(tmp_path / "c"), "--seed", "5"]) == 0
    assert (tmp_path / "a/checkpoints/coarse.ckpt").read_bytes() != (tmp_path / "c/checkpoints/coarse.ckpt").read_bytes()


def test_missing_mesh_exits_nonzero_without_outputs(tmp_path, capsys):
    out = tmp_path / "none"
    code = cli.main(["distill", "--mesh", str(tmp_path / "nope.obj"), "--out", str(out)])
    assert code == cli.EXIT_IO
    assert not out.exists()
    assert "nope.obj" in capsys.readouterr().err


def test_config_errors(tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({"coarse": {"epochz": 3}}))
    assert cli.main(["distill", "--config", str(tmp_path / "bad.json")]) == cli.EXIT_CONFIG
    assert cli.main(["distill", "--set", "coarse.lr"]) == cli.EXIT_CONFIG
    assert cli.main(["distill", "--set", "eval.grid_res=4"]) == cli.EXIT_CONFIG
    (tmp_path / "broken.json").write_text("{")
    assert cli.main(["distill", "--config", str(tmp_path / "broken.json")]) == cli.EXIT_CONFIG
    assert cli.main(["distill"]) == cli.EXIT_CONFIG


def test_flags_win_over_config(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"detail": {"epochs": 7, "ablation": "none"}}))
    args = cli.build_parser().parse_args(["refine", "--config", str(tmp_path / "c.json"), "--epochs", "2",
                                          "--ablate", "no-feature", "--set", "detail.epochs=5"])
    cfg = cli.resolve_config(args.config, args.preset, args.overrides, cli._flag_overrides(args))
    assert cfg["detail"]["epochs"] == 2
    assert cfg["detail"]["ablation"] == "no-feature"


def test_preset_merges():
    cfg = cli.resolve_config(preset="desk")
    assert cfg["geo"]["width"] == 128 and cfg["geo"]["depth"] == 8


def test_camera_file_roundtrip(tmp_path):
    cam = Camera.look_at((0.3, 0.2, 3.0), (0, 0, 0), (0, 1, 0), 100.0, 20, 30)
    cli.write_camera(tmp_path / "c.txt", cam)
    back = cli.read_camera(tmp_path / "c.txt")
    np.testing.assert_array_equal(back.rotation, cam.rotation)
    np.testing.assert_array_equal(back.position, cam.position)
    assert back.principal == cam.principal
    (tmp_path / "la.txt").write_text("position 0 0 3\ntarget 0 0 0\nfocal 50\nheight 8\nwidth 8\n")
    assert cli.read_camera(tmp_path / "la.txt").forward[2] == pytest.approx(-1.0)
    (tmp_path / "bad.txt").write_text("position 0 0 3\nrotation 1 0 0 0 2 0 0 0 1\nfocal 5\nheight 8\nwidth 8\n")
    with pytest.raises(CameraError):
        cli.read_camera(tmp_path / "bad.txt")


def test_refine_without_checkpoint_points_to_distill(scene_dir, tmp_path, capsys):
    code = cli.main(["refine", "--config", str(scene_dir / "cfg.json"), "--out", str(tmp_path),
                     "--image", str(scene_dir / "image.png"), "--camera", str(scene_dir / "camera.txt")])
    assert code == cli.EXIT_IO
    assert "distill" in capsys.readouterr().err


@pytest.mark.parametrize("ablate", ["none", "no-normals", "no-feature", "neither"])
def test_refine_smoke_writes_one_dump(distilled, scene_dir, tmp_path, ablate):
    out = tmp_path / ablate
    args = ["refine", "--config", str(scene_dir / "cfg.json"), "--out", str(out),
            "--checkpoint", str(distilled / "checkpoints/coarse.ckpt"), "--mesh", str(scene_dir / "prior.obj"),
            "--image", str(scene_dir / "image.png"), "--mask", str(scene_dir / "mask.png"),
            "--camera", str(scene_dir / "camera.txt"), "--ablate", ablate]
    assert cli.main(args) == 0
    dumps = sorted(p.name for p in (out / "dumps").iterdir())
    assert dumps == ["epoch_00001_normals.png", "epoch_00001_rgb.png"]
    assert (out / "checkpoints/detail.ckpt").exists()
    assert (out / "meshes/detail.obj").exists()
    assert json.loads((out / "config.echo").read_text())["detail"]["ablation"] == ablate


def test_render_export_eval(distilled, scene_dir, tmp_path):
    out = tmp_path / "r"
    base = ["--config", str(scene_dir / "cfg.json"), "--out", str(out)]
    refine = ["refine", *base, "--checkpoint", str(distilled / "checkpoints/coarse.ckpt"),
              "--image", str(scene_dir / "image.png"), "--camera", str(scene_dir / "camera.txt")]
    assert cli.main(refine) == 0
    assert cli.main(["render", *base, "--image", str(scene_dir / "image.png"), "--camera", str(scene_dir / "camera.txt"),
                     "--workers", "2"]) == 0
    ov = load_png(out / "dumps/render_overlay.png")
    assert ov.shape == load_png(scene_dir / "image.png").shape
    assert (out / "dumps/render_depth.pfm").exists()
    assert cli.main(["export", *base, "--set", "eval.grid_res=8", "--set", "eval.outer_only=false"]) == 0
    m = ms.load_obj(out / "meshes/export.obj")
    assert len(m.faces) > 0
    assert cli.main(["eval", *base, "--reference", str(scene_dir / "reference.obj")]) == 0
    rows = (out / "metrics/eval.csv").read_text().splitlines()
    assert rows[0] == "median,mean,std"
    assert len((out / "metrics/distances.csv").read_text().splitlines()) == 301


def test_eval_exact_sphere_checkpoint(tmp_path):
    # a checkpoint distilled from a fine icosphere, evaluated on exact sphere samples;
    # the shell is thickened so a 48^3 lattice still resolves it
    (tmp_path / "cfg.json").write_text(json.dumps({
        "geo": {"width": 32, "depth": 4, "skip_at": 2, "feature_dim": 2, "init_radius": 0.95},
        "coarse": {"epochs": 400, "points_per_epoch": 512, "batch_size": 256, "lr": 5e-3, "lr_final": 1e-4,
                   "eps": 0.1, "n_holdout": 256},
        "eval": {"grid_res": 48, "align": False},
    }))
    ms.save_obj(ms.icosphere(3, radius=0.95), tmp_path / "s.obj")
    cli.write_points(tmp_path / "ref.obj", ek.SphereScene().sample_surface(500))
    base = ["--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "o")]
    assert cli.main(["distill", *base, "--mesh", str(tmp_path / "s.obj")]) == 0
    assert cli.main(["eval", *base, "--reference", str(tmp_path / "ref.obj")]) == 0
    median = float((tmp_path / "o/metrics/eval.csv").read_text().splitlines()[1].split(",")[0])
    assert median < 1e-2
