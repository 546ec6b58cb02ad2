"""Losses and the optimization loop.

Each step draws `rays_per_batch` pixels uniformly from all training views,
renders them with stratified samples, and takes one Adam step on
alpha * L_color + beta * L_eik (the eikonal term only for the SDF backend).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import config as cfg
from .errors import TrainingError, UsageError, ValidationError
from .evalmetrics import psnr
from .fields import FieldConfig, make_field
from .hashgrid import HashGridConfig
from .render import camera_bundle, render_bundle, render_backward, render_image, RayBundle
from .tensor import AdamState, adam_step


def color_loss(pred, gt) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise UsageError(f"pred {pred.shape} and gt {gt.shape} differ")
    if pred.size == 0:
        raise UsageError("empty batch")
    return float(np.mean(np.mean((pred.reshape(-1, 3) - gt.reshape(-1, 3)) ** 2, axis=1)))


def eikonal_loss(gradients) -> float:
    g = np.asarray(gradients, dtype=np.float64).reshape(-1, 3)
    if g.shape[0] == 0:
        raise UsageError("empty batch")
    return float(np.mean((np.linalg.norm(g, axis=1) - 1.0) ** 2))


def total_loss(l_color: float, l_eik: float, alpha: float, beta: float) -> float:
    return alpha * l_color + beta * l_eik


@dataclass
class TrainConfig:
    backend: str = "density"
    iterations: int = 20000
    rays_per_batch: int = 256
    samples_per_ray: int = 64
    lr: float = 1e-2
    lr_mlp: float = 1e-3
    # multiplicative decay per 1000 steps; None means x0.33 per third of training
    lr_decay: float | None = None
    alpha: float = 1.0
    beta: float = 0.1
    eikonal_points: int | None = None
    seed: int = 0
    stratified: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-15
    val_interval: int = 0
    val_pixel_stride: int = 4
    log_interval: int = 100
    checkpoint_interval: int = 0
    # grid and head sizes
    grid_levels: int = 12
    grid_features: int = 2
    grid_table_size: int = 2**16
    grid_base_resolution: int = 16
    grid_max_resolution: int = 512
    init_b: float = 30.0
    init_radius: float = 0.5
    geometric_init: bool = True

    def __post_init__(self):
        if self.backend not in ("density", "sdf"):
            raise ValidationError("backend", f"must be density or sdf, got {self.backend!r}")
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValidationError("alpha", "need alpha >= 0, beta >= 0 and alpha + beta > 0")
        if self.rays_per_batch < 1:
            raise ValidationError("rays_per_batch", "must be at least 1")
        if self.iterations < 0:
            raise ValidationError("iterations", "must be non-negative")
        if self.samples_per_ray < 2:
            raise ValidationError("samples_per_ray", "need at least 2")

    @property
    def effective_beta(self) -> float:
        return self.beta if self.backend == "sdf" else 0.0

    @property
    def decay_per_1k(self) -> float:
        if self.lr_decay is not None:
            return self.lr_decay
        if self.iterations == 0:
            return 1.0
        return 0.33 ** (3000.0 / self.iterations)

    def lr_at(self, iteration: int) -> float:
        return self.lr * self.decay_per_1k ** (iteration / 1000.0)

    def grid_config(self, bbox) -> HashGridConfig:
        return HashGridConfig(self.grid_levels, self.grid_features, self.grid_table_size,
                              self.grid_base_resolution, self.grid_max_resolution,
                              tuple(bbox[0]), tuple(bbox[1]))

    def field_config(self, bbox) -> FieldConfig:
        return FieldConfig.for_backend(self.backend, self.grid_config(bbox), init_b=self.init_b,
                                      init_radius=self.init_radius, geometric_init=self.geometric_init)

    def to_dict(self) -> dict:
        return asdict(self)


_TYPES = {int: "int", float: "float", bool: "bool", str: "str"}


def _schema() -> cfg.Schema:
    keys = {}
    for f in fields(TrainConfig):
        default = f.default
        t = "int" if f.name == "eikonal_points" else "float" if f.name == "lr_decay" else _TYPES[type(default)]
        keys[f.name] = cfg.Key(t, default)
    keys["backend"] = cfg.Key("str", "density", lambda v: v in ("density", "sdf"), "density or sdf")
    return cfg.Schema(keys)


TRAIN_SCHEMA = _schema()


def load_train_config(path=None, overrides: dict | None = None) -> TrainConfig:
    values = TRAIN_SCHEMA.load(path, overrides) if path else TRAIN_SCHEMA.parse("", None, overrides)
    return TrainConfig(**values)


# --------------------------------------------------------------------------


@dataclass
class RayTable:
    """Every training pixel as a ray, precomputed once."""

    origins: np.ndarray  # (V, 3) per view
    view: np.ndarray  # (P,) view index
    directions: np.ndarray  # (P, 3) float32
    t_near: np.ndarray
    t_far: np.ndarray
    colors: np.ndarray  # (P, 3) float32 in [0, 1]

    def __len__(self):
        return self.view.shape[0]

    def bundle(self, idx) -> tuple[RayBundle, np.ndarray]:
        d = self.directions[idx].astype(np.float64)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        b = RayBundle(self.origins[self.view[idx]], d,
                      self.t_near[idx].astype(np.float64), self.t_far[idx].astype(np.float64))
        return b, self.colors[idx]


def build_ray_table(views, bbox) -> RayTable:
    origins, vidx, dirs, tn, tf, cols = [], [], [], [], [], []
    for k, v in enumerate(views):
        b = camera_bundle(v.camera, bbox=bbox)
        origins.append(v.camera.center)
        vidx.append(np.full(len(b), k, dtype=np.int32))
        dirs.append(b.directions.astype(np.float32))
        tn.append(b.t_near.astype(np.float32))
        tf.append(b.t_far.astype(np.float32))
        cols.append((v.image.reshape(-1, 3) / 255.0).astype(np.float32))
    return RayTable(np.stack(origins), np.concatenate(vidx), np.concatenate(dirs),
                    np.concatenate(tn), np.concatenate(tf), np.concatenate(cols))


@dataclass
class TrainState:
    field: object
    adam: AdamState
    iteration: int = 0
    rng: np.random.Generator = None
    loss_ema: float | None = None
    history: list = field(default_factory=list)


def init_state(config: TrainConfig, bbox, dtype=np.float32) -> TrainState:
    fld = make_field(config.field_config(bbox), dtype=dtype, seed=config.seed)
    ratio = config.lr_mlp / config.lr if config.lr > 0 else 0.0
    scale = np.where(fld.store.group_mask("grid"), 1.0, ratio).astype(dtype)
    adam = AdamState.fresh(fld.store.size, dtype, lr=config.lr, beta1=config.adam_beta1,
                           beta2=config.adam_beta2, eps=config.adam_eps, lr_scale=scale)
    return TrainState(fld, adam, 0, np.random.default_rng(config.seed))


def train_step(state: TrainState, bundle: RayBundle, gt: np.ndarray, config: TrainConfig,
               background=(0.0, 0.0, 0.0)) -> tuple[TrainState, dict]:
    t0 = time.perf_counter()
    fld = state.field
    R = len(bundle)
    res = render_bundle(fld, bundle, config.samples_per_ray, background,
                        stratified=config.stratified, rng=state.rng, keep_cache=True)
    diff = res.rgb - gt
    l_color = float(np.mean(np.mean(diff * diff, axis=1)))
    grad = fld.zero_grad()
    render_backward(fld, res, (config.alpha * 2.0 / (3.0 * R)) * diff, grad)
    metrics = {"iteration": state.iteration + 1, "l_color": l_color}
    beta = config.effective_beta
    l_eik = 0.0
    if fld.backend == "sdf" and beta > 0:
        M = config.eikonal_points or R
        lo, hi = np.asarray(fld.config.grid.bbox_min), np.asarray(fld.config.grid.bbox_max)
        x = lo + (hi - lo) * state.rng.uniform(size=(M, 3))
        l_eik, _ = fld.eikonal_backward(x, beta, grad)
        metrics["l_eik"] = l_eik
    loss = total_loss(l_color, l_eik, config.alpha, beta)
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss at iteration {state.iteration + 1}",
                            iteration=state.iteration + 1)
    state.adam.lr = config.lr_at(state.iteration)
    try:
        adam_step(state.adam, fld.params, grad)
    except TrainingError as exc:
        raise TrainingError(f"{exc} at iteration {state.iteration + 1}", index=exc.index,
                            iteration=state.iteration + 1) from None
    state.iteration += 1
    state.loss_ema = loss if state.loss_ema is None else 0.98 * state.loss_ema + 0.02 * loss
    metrics["loss"] = loss
    metrics["psnr_batch"] = -10.0 * math.log10(max(l_color, 1e-12))
    if fld.backend == "sdf":
        metrics["b"] = fld.b
    metrics["rays_per_sec"] = R / max(time.perf_counter() - t0, 1e-9)
    return state, metrics


def evaluate_views(fld, views, n, background, bbox, stride: int = 1) -> float:
    """Mean PSNR (unit intensity scale) over views, optionally on every stride-th pixel row/column."""
    vals = []
    for v in views:
        cam = v.camera
        if stride > 1:
            jj, ii = np.mgrid[0 : cam.height : stride, 0 : cam.width : stride]
            b = camera_bundle(cam, ii.ravel(), jj.ravel(), bbox=bbox)
            out = []
            for s in range(0, len(b), 4096):
                out.append(render_bundle(fld, b.subset(slice(s, s + 4096)), n, background).rgb)
            pred = np.clip(np.concatenate(out), 0, 1)
            gt = v.image[::stride, ::stride].reshape(-1, 3) / 255.0
        else:
            pred = render_image(fld, cam, n, background, bbox)[0].reshape(-1, 3)
            gt = v.image.reshape(-1, 3) / 255.0
        vals.append(psnr(pred, gt, 1.0))
    return float(np.mean(vals))


@dataclass
class TrainReport:
    records: list
    final: dict

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")
            fh.write(json.dumps(self.final) + "\n")


def checkpoint_meta(config: TrainConfig, state: TrainState) -> dict:
    return {"train_config": config.to_dict(), "iteration": state.iteration}


def train(dataset, config: TrainConfig, log=None, checkpoint_dir=None, state: TrainState | None = None,
          final_eval: bool = True) -> tuple[object, TrainReport]:
    dataset.validate()
    train_views = dataset.split("train")
    val_views = dataset.split("val")
    bbox = dataset.bbox
    bg = tuple(dataset.background)
    table = build_ray_table(train_views, bbox)
    state = state or init_state(config, bbox)
    fld = state.field
    n = config.samples_per_ray
    records = []
    start = time.perf_counter()

    def emit(rec):
        records.append(rec)
        if log is not None:
            log(rec)

    if config.iterations == 0:
        init = {"iteration": 0, "l_color": None, "elapsed": 0.0}
        if fld.backend == "sdf":
            init["l_eik"] = eikonal_loss(fld.query_sdf(_box_points(fld, 4096, config.seed))[1])
        emit(init)
    acc_c, acc_e, acc_n = 0.0, 0.0, 0
    for _ in range(config.iterations):
        idx = state.rng.integers(0, len(table), size=config.rays_per_batch)
        bundle, gt = table.bundle(idx)
        state, m = train_step(state, bundle, gt.astype(np.float64), config, bg)
        acc_c += m["l_color"]
        acc_e += m.get("l_eik", 0.0)
        acc_n += 1
        it = state.iteration
        last = it == config.iterations
        if (config.log_interval and it % config.log_interval == 0) or last:
            rec = {"iteration": it, "l_color": acc_c / acc_n}
            if fld.backend == "sdf":
                rec["l_eik"] = acc_e / acc_n
                rec["b"] = fld.b
            if val_views and config.val_interval and (it % config.val_interval == 0):
                rec["psnr_val"] = evaluate_views(fld, val_views, n, bg, bbox, config.val_pixel_stride)
            rec["elapsed"] = round(time.perf_counter() - start, 3)
            emit(rec)
            acc_c, acc_e, acc_n = 0.0, 0.0, 0
        if checkpoint_dir and config.checkpoint_interval and it % config.checkpoint_interval == 0:
            fld.save(Path(checkpoint_dir) / f"step_{it:06d}.ckpt", extra=checkpoint_meta(config, state))
    final = {"final": True, "iteration": state.iteration, "elapsed": round(time.perf_counter() - start, 3)}
    if final_eval:
        if val_views:
            final["psnr_val"] = evaluate_views(fld, val_views, n, bg, bbox)
        if fld.backend == "sdf":
            final["l_eik"] = eikonal_loss(fld.query_sdf(_box_points(fld, 10000, config.seed + 1))[1])
    if log is not None:
        log(final)
    return fld, TrainReport(records, final)


def _box_points(fld, m, seed) -> np.ndarray:
    lo, hi = np.asarray(fld.config.grid.bbox_min), np.asarray(fld.config.grid.bbox_max)
    return lo + (hi - lo) * np.random.default_rng(seed).uniform(size=(m, 3))
