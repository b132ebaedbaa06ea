"""Command line entry point: ``detailsdf <command> [--config FILE] [--set k=v ...]``.

Commands share one JSON run configuration. Every key has a default and
unknown keys are rejected. The resolved configuration is written to
``<out>/config.echo`` so a stage can be re-run from it alone.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import evalkit
from .diffmath import CheckpointError
from .fields import PosEncodingConfig, RadianceField, SdfField
from .meshsdf import MeshError, MeshSdf, TriMesh, icosphere, load_obj, normalize_to_box, save_obj, warn_if_open
from .optimize import (
    CoarseConfig,
    DetailConfig,
    DivergenceError,
    load_fields,
    run_coarse,
    run_detail,
    save_fields,
)
from .render import (
    Camera,
    CameraError,
    TraceConfig,
    generate_rays,
    load_mask_png,
    load_png,
    normal_map_rgb,
    overlay,
    render_image,
    save_mask_png,
    save_pfm,
    save_png,
)

log = logging.getLogger("detailsdf")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


def _dataclass_defaults(obj, drop=()) -> dict:
    d = asdict(obj)
    for k in drop:
        d.pop(k, None)
    return d


DEFAULTS: dict = {
    "paths": {
        "out": "run",
        "mesh": None,
        "image": None,
        "mask": None,
        "camera": None,
        "checkpoint": None,
        "reference": None,
    },
    "mesh": {"normalize": False, "half_size": 1.0},
    "enc": _dataclass_defaults(PosEncodingConfig()),
    "geo": {"width": 512, "depth": 8, "skip_at": 4, "feature_dim": 256, "beta": 100.0, "init_radius": 0.5, "seed": 0},
    "radiance": {"width": 512, "depth": 4, "beta": 100.0, "seed": 1},
    "coarse": _dataclass_defaults(CoarseConfig()),
    "detail": _dataclass_defaults(DetailConfig(), drop=("trace",)),
    "tracer": _dataclass_defaults(TraceConfig()),
    "render": {"background": [0.0, 0.0, 0.0], "chunk": 4096, "workers": 1, "overlay_alpha": 0.6},
    "eval": {
        "grid_res": 128,
        "bound": 1.2,
        "align": True,
        "align_scale": True,
        "crop_center": None,
        "crop_radius": None,
        "outer_only": True,
    },
    "synth": {"scene": "bumpy", "light": [-0.5, 0.6, 0.8], "size": 128, "distance": 3.0, "focal": None, "n_reference": 20000, "prior_subdivisions": 4, "seed": 0},
}

# a laptop-sized preset; the defaults above are the full-scale settings
PRESETS = {
    "desk": {
        "geo": {"width": 128, "feature_dim": 16},
        "radiance": {"width": 128},
        "coarse": {"lr": 1e-3, "lr_final": 1e-5, "points_per_epoch": 4096, "batch_size": 256},
        "eval": {"grid_res": 128},
    },
}


# ---------------------------------------------------------------------------
# configuration


def merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{where}.{key}" if where else key
        if key not in out:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path!r} must be a section")
            out[key] = merge(out[key], value, path)
        else:
            out[key] = value
    return out


def parse_override(text: str) -> dict:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    if len(parts) < 2 or not all(parts):
        raise ConfigError(f"override key {key!r} must be section.key")
    node: dict = {}
    cur = node
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value
    return node


def resolve_config(path=None, preset=None, overrides=(), flags: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg = merge(cfg, PRESETS[preset])
    if path:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        cfg = merge(cfg, doc)
    for text in overrides:
        cfg = merge(cfg, parse_override(text))
    for node in (flags or {}).values():
        cfg = merge(cfg, node)
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    try:
        coarse_config(cfg)
        detail_config(cfg)
        PosEncodingConfig(**cfg["enc"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg["eval"]["grid_res"] < 8:
        raise ConfigError("eval.grid_res must be at least 8")
    if cfg["render"]["workers"] < 1:
        raise ConfigError("render.workers must be at least 1")


def coarse_config(cfg: dict) -> CoarseConfig:
    return CoarseConfig(**cfg["coarse"])


def trace_config(cfg: dict) -> TraceConfig:
    return TraceConfig(**cfg["tracer"])


def detail_config(cfg: dict) -> DetailConfig:
    return DetailConfig(**cfg["detail"], trace=trace_config(cfg))


def build_fields(cfg: dict) -> tuple[SdfField, RadianceField]:
    enc = PosEncodingConfig(**cfg["enc"])
    geo = SdfField(enc=enc, **cfg["geo"])
    rad = RadianceField(enc=enc, feature_dim=cfg["geo"]["feature_dim"], **cfg["radiance"])
    return geo, rad


# ---------------------------------------------------------------------------
# files


def read_camera(path) -> Camera:
    """Key-value camera file: ``position``, ``rotation`` (9 numbers, row-major)
    or ``target``/``up``, ``focal``, ``height``, ``width``, optional ``principal``."""
    fields: dict[str, list[float]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, *vals = line.replace("=", " ").split()
            try:
                fields[key] = [float(v) for v in vals]
            except ValueError as exc:
                raise CameraError(f"{path}:{lineno}: non-numeric value") from exc
    need = {"position": 3, "focal": 1, "height": 1, "width": 1}
    for key, n in need.items():
        if len(fields.get(key, [])) != n:
            raise CameraError(f"{path}: '{key}' needs {n} value(s)")
    principal = fields.get("principal")
    if principal is not None and len(principal) != 2:
        raise CameraError(f"{path}: 'principal' needs 2 values")
    common = dict(focal=fields["focal"][0], height=int(fields["height"][0]), width=int(fields["width"][0]), principal=principal)
    if "rotation" in fields:
        if len(fields["rotation"]) != 9:
            raise CameraError(f"{path}: 'rotation' needs 9 values")
        return Camera(fields["position"], np.reshape(fields["rotation"], (3, 3)), **common)
    if "target" in fields:
        return Camera.look_at(fields["position"], fields["target"], fields.get("up", [0.0, 1.0, 0.0]), **common)
    raise CameraError(f"{path}: give either 'rotation' or 'target'")


def write_camera(path, cam: Camera) -> None:
    rows = [
        "position " + " ".join(f"{v:.17g}" for v in cam.position),
        "rotation " + " ".join(f"{v:.17g}" for v in cam.rotation.ravel()),
        f"focal {cam.focal:.17g}",
        f"height {cam.height}",
        f"width {cam.width}",
        f"principal {cam.principal[0]:.17g} {cam.principal[1]:.17g}",
    ]
    Path(path).write_text("\n".join(rows) + "\n")


def read_points(path) -> np.ndarray:
    """Vertex positions of an OBJ file (faces, if any, are ignored)."""
    pts = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("v "):
                pts.append([float(v) for v in line.split()[1:4]])
    if not pts:
        raise MeshError(f"{path}: no vertices")
    return np.array(pts)


def write_points(path, pts: np.ndarray) -> None:
    Path(path).write_text("".join(f"v {x:.17g} {y:.17g} {z:.17g}\n" for x, y, z in pts))


def _require(cfg: dict, key: str) -> Path:
    value = cfg["paths"][key]
    if not value:
        raise ConfigError(f"paths.{key} is required for this command")
    p = Path(value)
    if not p.exists():
        raise FileNotFoundError(f"paths.{key}: {p} does not exist")
    return p


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["paths"]["out"])
    for sub in ("checkpoints", "dumps", "meshes", "metrics"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return out


def _load_mesh(cfg: dict) -> TriMesh:
    mesh = load_obj(_require(cfg, "mesh"))
    if cfg["mesh"]["normalize"]:
        mesh, _, _ = normalize_to_box(mesh, cfg["mesh"]["half_size"])
    return mesh


def _load_image_inputs(cfg: dict):
    image = load_png(_require(cfg, "image"))
    cam = read_camera(_require(cfg, "camera"))
    if image.shape[:2] != (cam.height, cam.width):
        raise ConfigError(f"image is {image.shape[1]}x{image.shape[0]} but the camera expects {cam.width}x{cam.height}")
    if cfg["paths"]["mask"]:
        mask = load_mask_png(_require(cfg, "mask"))
        if mask.shape != image.shape[:2]:
            raise ConfigError("mask and image sizes differ")
    else:
        mask = image.max(axis=2) > 0
    return image, mask, cam


def _checkpoint(cfg: dict, default_name: str) -> Path:
    if cfg["paths"]["checkpoint"]:
        return _require(cfg, "checkpoint")
    p = Path(cfg["paths"]["out"]) / "checkpoints" / default_name
    if not p.exists():
        raise FileNotFoundError(f"no checkpoint at {p}")
    return p


def _portable(cfg: dict) -> dict:
    # the output location is not part of the run, so checkpoints from two
    # output directories stay byte-identical
    out = copy.deepcopy(cfg)
    out["paths"].pop("out")
    return out


def extract_mesh(field, cfg: dict) -> TriMesh:
    ev = cfg["eval"]
    spacing = 2 * ev["bound"] / (ev["grid_res"] - 1)
    if spacing >= cfg["coarse"]["eps"]:
        log.warning("grid spacing %.4g is not below the shell thickness %.4g; the surface may come out fragmented",
                    spacing, cfg["coarse"]["eps"])
    mesh = evalkit.marching_cubes(field, grid_res=ev["grid_res"], bound=ev["bound"])
    if ev["outer_only"] and not mesh.is_empty():
        mesh = evalkit.outer_component(mesh)
    return mesh


# ---------------------------------------------------------------------------
# commands


def cmd_distill(cfg: dict) -> dict:
    mesh = _load_mesh(cfg)
    warn_if_open(mesh)
    geo, _ = build_fields(cfg)
    out = _out_dir(cfg)
    ccfg = coarse_config(cfg)
    report = run_coarse(geo, MeshSdf(mesh, eps=ccfg.eps), ccfg,
                        checkpoint_dir=out / "checkpoints" if ccfg.checkpoint_every else None)
    save_fields(out / "checkpoints" / "coarse.ckpt", geo, meta={"stage": "coarse", "config": _portable(cfg)})
    report.to_jsonl(out / "metrics" / "coarse.jsonl")
    save_obj(extract_mesh(geo, cfg), out / "meshes" / "coarse.obj")
    return report.final


def cmd_refine(cfg: dict) -> dict:
    try:
        ckpt = _checkpoint(cfg, "coarse.ckpt")
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"{exc}; run 'detailsdf distill' first") from exc
    image, mask, cam = _load_image_inputs(cfg)
    geo, rad, meta = load_fields(ckpt)
    if rad is None:
        rad = RadianceField(enc=geo.enc, feature_dim=geo.feature_dim, **cfg["radiance"])
    mesh_sdf = None
    if cfg["paths"]["mesh"]:
        mesh_sdf = MeshSdf(_load_mesh(cfg), eps=cfg["coarse"]["eps"])
    out = _out_dir(cfg)
    dcfg = detail_config(cfg)
    toggles = dcfg.toggles

    def dump(epoch: int) -> None:
        res = render_image(geo, rad, cam, toggles, dcfg.trace, cfg["render"]["background"],
                           cfg["render"]["chunk"], cfg["render"]["workers"])
        save_png(out / "dumps" / f"epoch_{epoch:05d}_rgb.png", res.rgb)
        save_png(out / "dumps" / f"epoch_{epoch:05d}_normals.png", normal_map_rgb(res.normals, res.mask))

    report = run_detail(geo, rad, image, mask, cam, mesh_sdf, dcfg,
                        checkpoint_dir=out / "checkpoints" if dcfg.checkpoint_every else None, on_dump=dump)
    if dcfg.dump_every and report.records and len(report.records) % dcfg.dump_every:
        dump(len(report.records))
    save_fields(out / "checkpoints" / "detail.ckpt", geo, rad, meta={"stage": "detail", "config": _portable(cfg)})
    report.to_jsonl(out / "metrics" / "detail.jsonl")
    save_obj(extract_mesh(geo, cfg), out / "meshes" / "detail.obj")
    return report.final


def _load_any(cfg: dict):
    name = "detail.ckpt" if (Path(cfg["paths"]["out"]) / "checkpoints" / "detail.ckpt").exists() else "coarse.ckpt"
    return load_fields(_checkpoint(cfg, name))


def cmd_render(cfg: dict) -> dict:
    geo, rad, meta = _load_any(cfg)
    if rad is None:
        raise ConfigError("checkpoint has no radiance network; render needs a refined checkpoint")
    cam = read_camera(_require(cfg, "camera"))
    image = load_png(cfg["paths"]["image"]) if cfg["paths"]["image"] else None
    if image is not None and image.shape[:2] != (cam.height, cam.width):
        raise ConfigError("image and camera sizes differ")
    out = _out_dir(cfg)
    toggles = detail_config(cfg).toggles
    r = cfg["render"]
    res = render_image(geo, rad, cam, toggles, trace_config(cfg), r["background"], r["chunk"], r["workers"])
    save_png(out / "dumps" / "render_rgb.png", res.rgb)
    save_png(out / "dumps" / "render_normals.png", normal_map_rgb(res.normals, res.mask))
    save_pfm(out / "dumps" / "render_depth.pfm", np.where(res.mask, res.depth, 0.0))
    save_mask_png(out / "dumps" / "render_mask.png", res.mask)
    if image is not None:
        save_png(out / "dumps" / "render_overlay.png", overlay(res.rgb, res.mask, image, r["overlay_alpha"]))
    return {"hit_pixels": int(res.mask.sum())}


def cmd_export(cfg: dict) -> dict:
    geo, _, _ = _load_any(cfg)
    out = _out_dir(cfg)
    mesh = extract_mesh(geo, cfg)
    save_obj(mesh, out / "meshes" / "export.obj")
    return {"vertices": len(mesh.vertices), "faces": len(mesh.faces)}


def cmd_eval(cfg: dict) -> dict:
    ref = read_points(_require(cfg, "reference"))
    geo, _, _ = _load_any(cfg)
    ev = cfg["eval"]
    if ev["crop_radius"] is not None:
        center = ev["crop_center"] if ev["crop_center"] is not None else ref.mean(axis=0)
        ref = evalkit.crop_samples(ref, center, ev["crop_radius"])
        if len(ref) == 0:
            raise ConfigError("crop removed every reference sample")
    out = _out_dir(cfg)
    mesh = extract_mesh(geo, cfg)
    if mesh.is_empty():
        raise DivergenceError("the field has no zero level set inside the evaluation box")
    err = evalkit.scan_to_mesh_error(ref, mesh, align=ev["align"], with_scale=ev["align_scale"])
    evalkit.write_distances_csv(out / "metrics" / "distances.csv", err)
    row = err.as_row()
    with open(out / "metrics" / "eval.csv", "w") as fh:
        fh.write("median,mean,std\n")
        fh.write(f"{row['median']:.10g},{row['mean']:.10g},{row['std']:.10g}\n")
    return row


def cmd_synth(cfg: dict) -> dict:
    """Write a synthetic scene: image, mask, camera, reference samples and a smooth prior mesh."""
    s = cfg["synth"]
    try:
        scene = evalkit.make_scene(s["scene"], light=evalkit.Light(direction=tuple(s["light"])))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synth: {exc}") from None
    size = int(s["size"])
    focal = s["focal"] or 1.2 * size
    cam = Camera.look_at((0.0, 0.0, s["distance"]), (0, 0, 0), (0, 1, 0), focal, size, size)
    out = Path(cfg["paths"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    ren = evalkit.oracle_render(scene, cam)
    save_png(out / "image.png", ren.rgb)
    save_mask_png(out / "mask.png", ren.mask)
    write_camera(out / "camera.txt", cam)
    write_points(out / "reference.obj", scene.sample_surface(int(s["n_reference"]), seed=s["seed"]))
    prior = icosphere(int(s["prior_subdivisions"]), radius=scene.prior_radius(cfg["coarse"]["eps"]))
    save_obj(prior, out / "prior.obj")
    return {"hit_pixels": int(ren.mask.sum())}


COMMANDS = {
    "distill": cmd_distill,
    "refine": cmd_refine,
    "render": cmd_render,
    "export": cmd_export,
    "eval": cmd_eval,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="detailsdf", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--preset", choices=sorted(PRESETS), help="start from a named preset")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (JSON literal); repeatable")
    p.add_argument("--out", help="output directory (paths.out)")
    p.add_argument("--mesh", help="prior mesh OBJ (paths.mesh)")
    p.add_argument("--image")
    p.add_argument("--mask")
    p.add_argument("--camera")
    p.add_argument("--checkpoint")
    p.add_argument("--reference", help="reference samples as OBJ vertices")
    p.add_argument("--ablate", choices=["none", "no-normals", "no-feature", "neither"])
    p.add_argument("--epochs", type=int, help="epochs for the stage being run")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="thread count for rendering")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _flag_overrides(args) -> dict:
    flags: dict = {}
    paths = {k: getattr(args, k) for k in ("out", "mesh", "image", "mask", "camera", "checkpoint", "reference")}
    paths = {k: v for k, v in paths.items() if v is not None}
    if paths:
        flags["paths"] = {"paths": paths}
    if args.ablate is not None:
        flags["ablate"] = {"detail": {"ablation": args.ablate}}
    if args.workers is not None:
        flags["workers"] = {"render": {"workers": args.workers}}
    stage = {"distill": "coarse", "refine": "detail"}.get(args.command)
    if args.epochs is not None and stage:
        flags["epochs"] = {stage: {"epochs": args.epochs}}
    if args.seed is not None:
        flags["seed"] = {"coarse": {"seed": args.seed}, "detail": {"seed": args.seed}, "geo": {"seed": args.seed}}
    return flags


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.config, args.preset, args.overrides, _flag_overrides(args))
        result = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, MeshError, CameraError, CheckpointError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
