"""The two training stages: coarse distillation and photometric refinement."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffmath as dm
from .diffmath import Value
from .fields import RADIANCE_LAYOUT, Toggles, build_radiance, build_sdf, field_state, load_field_state, normal
from .meshsdf import MeshSdf, SamplePlan, sample_points
from .render import Camera, TraceConfig, differentiable_hit, generate_rays, shade_points, sphere_trace

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or the field collapsed."""


@dataclass
class CoarseConfig:
    epochs: int = 1000
    points_per_epoch: int = 1024
    batch_size: int = 1024
    eps: float = 0.02
    lambda_eik: float = 0.1
    lr: float = 1e-4
    sigma: float = 0.05
    surface_fraction: float = 0.8
    box_half: float = 1.2
    norm: str = "l1"
    seed: int = 0
    patience: int | None = None
    min_delta: float = 1e-5
    checkpoint_every: int = 0
    n_holdout: int = 4096
    lr_final: float | None = None  # cosine decay target; None keeps lr constant

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.lambda_eik < 0:
            raise ValueError("lambda_eik must be non-negative")
        if self.norm not in ("l1", "l2"):
            raise ValueError("norm must be 'l1' or 'l2'")

    def plan(self, total: int | None = None) -> SamplePlan:
        return SamplePlan.from_total(total or self.points_per_epoch, self.surface_fraction, self.sigma, self.box_half)


@dataclass
class DetailConfig:
    epochs: int = 250
    rays_per_step: int = 2048
    lambda1: float = 1.0
    lambda2: float = 0.1
    lr: float = 1e-4
    drift_points: int = 1024
    sigma: float = 0.05
    surface_fraction: float = 0.8
    box_half: float = 1.2
    norm: str = "l1"
    ablation: str | None = None
    seed: int = 0
    patience: int | None = 20
    min_delta: float = 1e-5
    dump_every: int = 0
    checkpoint_every: int = 0
    trace: TraceConfig = field(default_factory=TraceConfig)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularisation weights must be non-negative")
        if self.norm not in ("l1", "l2"):
            raise ValueError("norm must be 'l1' or 'l2'")
        if isinstance(self.trace, dict):
            self.trace = TraceConfig(**self.trace)
        Toggles.from_ablation(self.ablation)

    @property
    def toggles(self) -> Toggles:
        return Toggles.from_ablation(self.ablation)

    def plan(self) -> SamplePlan:
        return SamplePlan.from_total(self.drift_points, self.surface_fraction, self.sigma, self.box_half)


@dataclass
class TrainReport:
    stage: str
    records: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def curve(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.records])

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
            fh.write(json.dumps({"final": self.final, "stage": self.stage}, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# losses


def _residual(diff: Value, norm: str) -> Value:
    return dm.absolute(diff) if norm == "l1" else diff * diff


def eikonal_term(n: Value) -> Value:
    return ((dm.norm_rows(n) - 1.0) ** 2).mean()


def loss_coarse(field, points: np.ndarray, gt: np.ndarray, lambda_eik: float = 0.1, norm: str = "l1"):
    """Mean distance residual to the shell SDF plus the weighted eikonal penalty.

    Returns ``(loss, parts)`` with ``parts`` holding plain floats.
    """
    x = dm.param(points)
    n, sdf, _ = normal(field, x)
    geo = _residual(sdf - Value(np.asarray(gt).reshape(-1, 1)), norm).mean()
    eik = eikonal_term(n)
    loss = geo + eik * lambda_eik
    return loss, {"geo": geo.item(), "eik": eik.item()}


def _photometric(rgb: Value, target: np.ndarray, norm: str) -> Value:
    # per-ray L1 (or squared L2) norm of the color error, averaged over rays
    return _residual(rgb - Value(target), norm).sum(axis=1).mean()


def loss_detail(
    field,
    shader,
    image: np.ndarray,
    mask: np.ndarray,
    cam: Camera,
    pixels: np.ndarray,
    drift_points: np.ndarray | None = None,
    drift_gt: np.ndarray | None = None,
    lambda1: float = 1.0,
    lambda2: float = 0.1,
    toggles: Toggles = Toggles(),
    trace: TraceConfig = TraceConfig(),
    norm: str = "l1",
):
    """Photometric error over hitting foreground rays plus drift and eikonal terms.

    Returns ``(loss, parts)``, or ``None`` when no ray of the batch hits.
    """
    pixels = np.atleast_2d(pixels)
    pixels = pixels[mask[pixels[:, 0], pixels[:, 1]]]
    if len(pixels) == 0:
        return None
    rays = generate_rays(cam, pixels)
    hits = sphere_trace(field, rays, cfg=trace)
    idx = np.flatnonzero(hits.hit)
    if idx.size == 0:
        return None
    rays, hits = rays.subset(idx), hits.subset(idx)
    x, keep = differentiable_hit(field, rays, hits, trace)
    if not keep.any():
        return None
    rgb, _, _ = shade_points(field, shader, x, rays.dirs[keep], toggles)
    target = image[rays.pixels[keep, 0], rays.pixels[keep, 1]]
    photo = _photometric(rgb, target, norm)
    loss = photo
    parts = {"photo": photo.item(), "drift": 0.0, "eik": 0.0, "hits": int(keep.sum()), "rays": len(pixels)}
    if drift_points is not None and len(drift_points) and (lambda1 > 0 or lambda2 > 0):
        xd = dm.param(drift_points)
        n, sdf, _ = normal(field, xd)
        drift = _residual(sdf - Value(np.asarray(drift_gt).reshape(-1, 1)), norm).mean()
        eik = eikonal_term(n)
        loss = loss + drift * lambda1 + eik * lambda2
        parts["drift"], parts["eik"] = drift.item(), eik.item()
    return loss, parts


# ---------------------------------------------------------------------------
# validation helpers


def holdout_error(field, mesh_sdf: MeshSdf, plan: SamplePlan, seed) -> dict:
    """Mean |f - SDF_GT| over fresh samples and the eikonal residual on the near-surface part."""
    pts = sample_points(mesh_sdf.mesh, plan, seed)
    gt = mesh_sdf(pts)
    f = field.sdf(pts)
    near = pts[: plan.n_surface]
    x = dm.param(near)
    n, _, _ = normal(field, x, create_graph=False)
    eik = np.abs(np.linalg.norm(n.data, axis=1) - 1.0)
    return {
        "holdout_mean_abs": float(np.mean(np.abs(f - gt))),
        "holdout_near_mean_abs": float(np.mean(np.abs(f[: plan.n_surface] - gt[: plan.n_surface]))),
        "eikonal_mean_abs": float(np.mean(eik)),
        "normal_norm_mean": float(np.mean(np.linalg.norm(n.data, axis=1))),
    }


def cosine_lr(lr0: float, lr_final: float | None, epoch: int, epochs: int) -> float:
    if lr_final is None or epochs <= 1:
        return lr0
    w = 0.5 * (1.0 + math.cos(math.pi * epoch / (epochs - 1)))
    return lr_final + (lr0 - lr_final) * w


def _check_finite(value: float, stage: str, epoch: int) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"{stage}: loss became {value} at epoch {epoch}")


class _EarlyStop:
    def __init__(self, patience, min_delta):
        self.patience, self.min_delta = patience, min_delta
        self.best = math.inf
        self.since = 0

    def update(self, loss: float) -> bool:
        if self.patience is None:
            return False
        if loss < self.best - self.min_delta:
            self.best, self.since = loss, 0
        else:
            self.since += 1
        return self.since >= self.patience


# ---------------------------------------------------------------------------
# training loops


def run_coarse(
    field,
    mesh_sdf: MeshSdf,
    cfg: CoarseConfig = CoarseConfig(),
    checkpoint_dir=None,
    on_epoch: Callable[[int, dict], None] | None = None,
) -> TrainReport:
    report = TrainReport("coarse")
    if cfg.epochs == 0:
        return report
    start = time.perf_counter()
    train_rng, hold_rng = dm.split(cfg.seed, 2)
    params = field.parameters()
    opt = dm.Adam(params, lr=cfg.lr)
    stopper = _EarlyStop(cfg.patience, cfg.min_delta)
    plan = cfg.plan(cfg.points_per_epoch)
    for epoch in range(cfg.epochs):
        opt.state.lr = cosine_lr(cfg.lr, cfg.lr_final, epoch, cfg.epochs)
        pts = sample_points(mesh_sdf.mesh, plan, train_rng)
        gt = mesh_sdf(pts)
        order = train_rng.permutation(len(pts))
        sums = {"loss": 0.0, "geo": 0.0, "eik": 0.0}
        steps = 0
        for lo in range(0, len(pts), cfg.batch_size):
            sel = order[lo : lo + cfg.batch_size]
            loss, parts = loss_coarse(field, pts[sel], gt[sel], cfg.lambda_eik, cfg.norm)
            value = loss.item()
            _check_finite(value, "coarse", epoch)
            opt.step(dm.backward(loss, params))
            sums["loss"] += value
            sums["geo"] += parts["geo"]
            sums["eik"] += parts["eik"]
            steps += 1
        rec = {k: v / steps for k, v in sums.items()}
        rec.update(epoch=epoch, steps=steps, time=time.perf_counter() - start)
        report.records.append(rec)
        if on_epoch:
            on_epoch(epoch, rec)
        if checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            path = Path(checkpoint_dir) / f"coarse_{epoch + 1:05d}.ckpt"
            save_fields(path, field, meta={"stage": "coarse", "epoch": epoch + 1})
            report.checkpoints.append(str(path))
        if stopper.update(rec["loss"]):
            log.info("coarse: early stop at epoch %d", epoch)
            break
    report.final = holdout_error(field, mesh_sdf, cfg.plan(cfg.n_holdout), hold_rng)
    report.final["epochs_run"] = len(report.records)
    report.wall_clock = time.perf_counter() - start
    return report


def foreground_pixels(mask: np.ndarray) -> np.ndarray:
    r, c = np.nonzero(mask)
    return np.stack([r, c], axis=1)


def run_detail(
    field,
    shader,
    image: np.ndarray,
    mask: np.ndarray,
    cam: Camera,
    mesh_sdf: MeshSdf | None,
    cfg: DetailConfig = DetailConfig(),
    checkpoint_dir=None,
    on_epoch: Callable[[int, dict], None] | None = None,
    on_dump: Callable[[int], None] | None = None,
) -> TrainReport:
    """Jointly refine geometry and radiance against one image."""
    report = TrainReport("detail")
    if cfg.epochs == 0:
        return report
    start = time.perf_counter()
    pix_rng, drift_rng = dm.split(cfg.seed, 2)
    params = field.parameters() + shader.parameters()
    opt = dm.Adam(params, lr=cfg.lr)
    stopper = _EarlyStop(cfg.patience, cfg.min_delta)
    fg = foreground_pixels(mask)
    if len(fg) == 0:
        raise ValueError("mask has no foreground pixels")
    plan = cfg.plan()
    toggles = cfg.toggles
    for epoch in range(cfg.epochs):
        order = pix_rng.permutation(len(fg))
        sums = {"loss": 0.0, "photo": 0.0, "drift": 0.0, "eik": 0.0}
        steps = skipped = hits = 0
        for lo in range(0, len(fg), cfg.rays_per_step):
            batch = fg[order[lo : lo + cfg.rays_per_step]]
            if mesh_sdf is not None and (cfg.lambda1 > 0 or cfg.lambda2 > 0):
                dp = sample_points(mesh_sdf.mesh, plan, drift_rng)
                dg = mesh_sdf(dp)
            else:
                dp = dg = None
            out = loss_detail(field, shader, image, mask, cam, batch, dp, dg,
                              cfg.lambda1, cfg.lambda2, toggles, cfg.trace, cfg.norm)
            if out is None:
                skipped += 1
                continue
            loss, parts = out
            value = loss.item()
            _check_finite(value, "detail", epoch)
            opt.step(dm.backward(loss, params))
            sums["loss"] += value
            for k in ("photo", "drift", "eik"):
                sums[k] += parts[k]
            hits += parts["hits"]
            steps += 1
        if steps == 0:
            raise DivergenceError(f"detail: no ray hit the surface in epoch {epoch}; the field collapsed")
        rec = {k: v / steps for k, v in sums.items()}
        rec.update(epoch=epoch, steps=steps, skipped=skipped, hits=hits, time=time.perf_counter() - start)
        report.records.append(rec)
        if on_epoch:
            on_epoch(epoch, rec)
        if on_dump and cfg.dump_every and (epoch + 1) % cfg.dump_every == 0:
            on_dump(epoch + 1)
        if checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            path = Path(checkpoint_dir) / f"detail_{epoch + 1:05d}.ckpt"
            save_fields(path, field, shader, meta={"stage": "detail", "epoch": epoch + 1})
            report.checkpoints.append(str(path))
        if stopper.update(rec["loss"]):
            log.info("detail: early stop at epoch %d", epoch)
            break
    report.final = {"photo": report.records[-1]["photo"], "epochs_run": len(report.records)}
    report.wall_clock = time.perf_counter() - start
    return report


# ---------------------------------------------------------------------------
# checkpoints of whole pipelines


def save_fields(path, sdf_field, radiance=None, meta: dict | None = None) -> None:
    arrays = field_state(sdf_field)
    header = {"sdf": sdf_field.config(), **(meta or {})}
    if radiance is not None:
        arrays.update(field_state(radiance))
        header["radiance"] = radiance.config()
    dm.save_checkpoint(path, arrays, header)


def load_fields(path):
    """Rebuild ``(sdf_field, radiance_or_None, meta)`` from a checkpoint."""
    arrays, meta = dm.load_checkpoint(path)
    sdf_field = build_sdf(meta["sdf"])
    load_field_state(sdf_field, arrays)
    radiance = None
    if "radiance" in meta:
        radiance = build_radiance(meta["radiance"])
        load_field_state(radiance, arrays)
    return sdf_field, radiance, meta


__all__ = [
    "CoarseConfig",
    "DetailConfig",
    "DivergenceError",
    "RADIANCE_LAYOUT",
    "TrainReport",
    "eikonal_term",
    "foreground_pixels",
    "holdout_error",
    "load_fields",
    "loss_coarse",
    "loss_detail",
    "run_coarse",
    "run_detail",
    "save_fields",
]
