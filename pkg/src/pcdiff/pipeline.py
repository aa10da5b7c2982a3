"""Training loop, reverse-process reconstruction and evaluation."""

from __future__ import annotations

import csv
import dataclasses
import io as _io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .conditioning import EncoderConfig, Image, encode_image, encode_images, init_encoder
from .diffusion import PointCloud, build_schedule, estimate_x0, reverse_step
from .io import Checkpoint, Sample, _atomic_write, load_checkpoint, save_checkpoint
from .losses import (CD_SCALE, EMD_SCALE, loss_chamfer, loss_geo, loss_rgb, metric_cd, metric_emd,
                     total_loss)
from .predictors import ColorNetConfig, ShapeNetConfig, init_color_net, init_shape_net, predict_colors, predict_noise
from .renderer import Camera, RenderConfig, render
from .tensor import AdamHyper, AdamState, ContractError, ParamStore, adam_step, make_rng

__all__ = [
    "TrainConfig",
    "Model",
    "TrainingError",
    "TrainResult",
    "ReconstructionTrace",
    "train",
    "reconstruct",
    "evaluate",
    "evaluate_clouds",
    "write_report",
    "downsample",
    "load_model",
    "train_step",
    "format_report",
    "desk_fixture_config",
]

log = logging.getLogger("pcdiff")


class TrainingError(RuntimeError):
    """Training hit a non-finite loss."""


@dataclass
class TrainConfig:
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.05
    batch_size: int = 4
    steps: int = 5000
    lr: float = 1e-3
    lr_final: float | None = None
    w_geo: float = 1.0
    w_cham: float = 1.0
    w_rgb: float = 1.0
    disable_rgb: bool = False
    render_stride: int = 4
    render_res: int = 32
    n_samples: int | None = None
    k: int | None = None
    mask_radius: float | None = None
    grad_clip: float | None = None
    image_size: int = 64
    channels: tuple[int, ...] = (16, 32, 64, 128)
    code_dim: int = 128
    width: int = 128
    n_modulated: int = 3
    fourier: int = 6
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 100
    data_dir: str | None = None
    out: str | None = None

    def __post_init__(self):
        self.channels = tuple(self.channels)
        positive = ("T", "batch_size", "render_stride", "render_res", "image_size", "code_dim", "width")
        for name in positive:
            if getattr(self, name) < 1:
                raise ContractError(f"config field {name} must be positive")
        if self.steps < 0 or self.lr <= 0:
            raise ContractError("config needs steps >= 0 and lr > 0")
        if min(self.w_geo, self.w_cham, self.w_rgb) < 0:
            raise ContractError("loss weights must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ContractError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        return d

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.image_size, self.channels, self.code_dim, self.code_dim)

    def shape_config(self) -> ShapeNetConfig:
        return ShapeNetConfig(self.width, self.n_modulated, self.code_dim, self.fourier, self.T)

    def color_config(self) -> ColorNetConfig:
        return ColorNetConfig(self.width, self.n_modulated, self.code_dim, self.fourier, self.T)


class Model:
    """Encoder, shape network and color network sharing one parameter store."""

    def __init__(self, cfg: TrainConfig, store: ParamStore | None = None, rng=None):
        self.cfg = cfg
        self.schedule = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
        self.enc_cfg = cfg.encoder_config()
        self.shape_cfg = cfg.shape_config()
        self.color_cfg = cfg.color_config()
        if store is None:
            rng = rng if rng is not None else make_rng(cfg.seed)
            store = ParamStore()
            init_encoder(store, self.enc_cfg, rng)
            init_shape_net(store, self.shape_cfg, rng)
            init_color_net(store, self.color_cfg, rng)
        self.store = store

    def encode(self, image):
        return encode_image(image, self.store, self.enc_cfg)

    def noise(self, x_t, t, shape_code):
        return predict_noise(x_t, t, shape_code, self.store, self.shape_cfg)

    def colors(self, x0_est, color_code, t=1):
        return predict_colors(x0_est, color_code, self.store, self.color_cfg, t)


# -- checkpoint glue ------------------------------------------------------------------
def _to_checkpoint(model: Model, opt: AdamState, rng: np.random.Generator, step: int) -> Checkpoint:
    tensors = {name: t.data for name, t in model.store.items()}
    for name, m in opt.m.items():
        tensors[f"adam.m.{name}"] = m
        tensors[f"adam.v.{name}"] = opt.v[name]
    config = {"train": model.cfg.to_dict(), "adam_step": opt.step}
    return Checkpoint(config, tensors, rng.bit_generator.state, step)


def _from_checkpoint(ckpt: Checkpoint, cfg: TrainConfig | None = None):
    saved = TrainConfig.from_dict(ckpt.config["train"])
    if cfg is not None:
        arch = ("T", "beta_start", "beta_end", "image_size", "channels", "code_dim", "width",
                "n_modulated", "fourier")
        diff = [a for a in arch if getattr(cfg, a) != getattr(saved, a)]
        if diff:
            raise ContractError(f"checkpoint/config mismatch in {diff}")
    params = {n: v for n, v in ckpt.tensors.items() if not n.startswith("adam.")}
    model = Model(cfg or saved, ParamStore(params))
    opt = AdamState(step=int(ckpt.config.get("adam_step", 0)))
    for n in params:
        if f"adam.m.{n}" in ckpt.tensors:
            opt.m[n] = ckpt.tensors[f"adam.m.{n}"].copy()
            opt.v[n] = ckpt.tensors[f"adam.v.{n}"].copy()
    rng = np.random.Generator(np.random.Philox())
    rng.bit_generator.state = ckpt.rng_state
    return model, opt, rng, ckpt.step


def load_model(path) -> Model:
    return _from_checkpoint(load_checkpoint(path))[0]


# -- training ------------------------------------------------------------------------
def downsample(rgb: np.ndarray, size: int) -> np.ndarray:
    """Box-filter an ``(H, W, 3)`` image down to ``size x size`` (integer factor)."""
    h = rgb.shape[0]
    if h == size:
        return rgb
    f = h // size
    if f * size != h or rgb.shape[1] != h:
        raise ContractError(f"cannot box-downsample {rgb.shape[:2]} to {size}x{size}")
    return rgb.reshape(size, f, size, f, 3).mean(axis=(1, 3))


@dataclass
class TrainResult:
    model: Model
    checkpoint: Checkpoint
    losses: list[dict] = field(default_factory=list)
    path: Path | None = None


def _render_config(sample: Sample, cfg: TrainConfig) -> RenderConfig:
    overrides = {k: v for k, v in (("n_samples", cfg.n_samples), ("k", cfg.k),
                                   ("mask_radius", cfg.mask_radius)) if v is not None}
    return sample.render_config(**overrides)


def _lr(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_final is None or cfg.steps <= 1:
        return cfg.lr
    frac = min(step / (cfg.steps - 1), 1.0)
    return cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + np.cos(np.pi * frac))


def train_step(model: Model, batch: Sequence[Sample], rng: np.random.Generator, step: int):
    """Losses for one training step; returns (breakdown, inputs)."""
    cfg, sched = model.cfg, model.schedule
    bsz = len(batch)
    x0 = np.stack([s.cloud.positions for s in batch])
    t = rng.integers(1, cfg.T + 1, size=bsz)
    eps = rng.standard_normal(x0.shape)
    ab = sched.alpha_bar[t - 1][:, None, None]
    xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps

    codes = encode_images(np.stack([s.image.rgb for s in batch]), model.store, model.enc_cfg)
    eps_hat = model.noise(xt, t, codes.shape_code)
    geo = loss_geo(eps, eps_hat)
    x0_hat = estimate_x0(xt, eps_hat, t, sched)
    cham = loss_chamfer(x0_hat, x0)

    rgb = tn.Tensor(0.0)
    use_rgb = not cfg.disable_rgb and step % cfg.render_stride == 0
    if use_rgb:
        colors = model.colors(x0_hat, codes.color_code, t)
        parts = []
        for b, s in enumerate(batch):
            cam = s.camera.resized(cfg.render_res, cfg.render_res)
            img = render(x0_hat[b], colors[b], cam, _render_config(s, cfg))
            parts.append(loss_rgb(img, downsample(s.image.rgb, cfg.render_res)))
        rgb = parts[0]
        for p in parts[1:]:
            rgb = rgb + p
        rgb = rgb * (1.0 / bsz)
    parts = total_loss(geo, cham, rgb, (cfg.w_geo, cfg.w_cham, cfg.w_rgb), disable_rgb=not use_rgb)
    inputs = {"x0": x0, "t": t, "eps": eps}
    return parts, inputs


def _clip(grads: dict, limit: float | None) -> dict:
    if limit is None:
        return grads
    norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm <= limit:
        return grads
    return {k: g * (limit / norm) for k, g in grads.items()}


def train(cfg: TrainConfig, dataset: Sequence[Sample], resume=None, out=None,
          stop_at: int | None = None) -> TrainResult:
    """Run Adam on the summed objective for ``cfg.steps`` steps.

    ``resume`` is a checkpoint (or path) to continue from; ``stop_at`` ends
    early at that step (used to split a run across checkpoints).
    """
    if not dataset:
        raise ContractError("training dataset is empty")
    out = Path(out or cfg.out) if (out or cfg.out) else None
    if resume is not None:
        ckpt = load_checkpoint(resume) if not isinstance(resume, Checkpoint) else resume
        model, opt, rng, start = _from_checkpoint(ckpt, cfg)
        model.cfg = cfg
    else:
        rng = make_rng(cfg.seed)
        model = Model(cfg, rng=rng)
        opt, start = AdamState(), 0
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    n = len(dataset)
    losses = []
    t0 = time.perf_counter()
    for step in range(start, end):
        if cfg.batch_size <= n:
            pick = rng.permutation(n)[: cfg.batch_size]
        else:
            pick = rng.integers(0, n, size=cfg.batch_size)
        batch = [dataset[i] for i in pick]
        parts, inputs = train_step(model, batch, rng, step)
        values = parts.values()
        if not np.isfinite(values["total"]):
            if out is not None:
                np.savez(str(out) + f".diag-{step}.npz", **inputs)
            raise TrainingError(f"non-finite loss at step {step}: {values}, t={inputs['t'].tolist()}")
        grads = _clip(tn.backward(parts.total, model.store), cfg.grad_clip)
        adam_step(model.store, grads, AdamHyper(lr=_lr(cfg, step)), opt)
        values["step"] = step
        losses.append(values)
        if cfg.log_every and (step % cfg.log_every == 0 or step == end - 1):
            log.info("step=%d geo=%.5f cham=%.5f rgb=%.5f total=%.5f wall=%.1fs", step, values["geo"],
                     values["cham"], values["rgb"], values["total"], time.perf_counter() - t0)
        if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(out, _to_checkpoint(model, opt, rng, step + 1))
    ckpt = _to_checkpoint(model, opt, rng, end)
    if out is not None:
        save_checkpoint(out, ckpt)
    return TrainResult(model, ckpt, losses, out)


# -- reconstruction -------------------------------------------------------------------------
@dataclass
class ReconstructionTrace:
    steps: list[int]
    clouds: list[PointCloud]
    final: PointCloud


def reconstruct(model: Model, image, cam: Camera | None = None, seed: int = 0,
                trace_stride: int = 0, n_points: int = 256,
                noise_fn: Callable[[np.ndarray, int], np.ndarray] | None = None) -> ReconstructionTrace:
    """Ancestral sampling from ``N(0, I)`` conditioned on ``image``.

    ``noise_fn(x_t, t)`` replaces the learned noise predictor when given.
    """
    rgb = image.rgb if isinstance(image, Image) else np.asarray(image)
    if rgb.shape[:2] != (model.enc_cfg.size, model.enc_cfg.size):
        raise ContractError(f"image is {rgb.shape[:2]}, model expects {model.enc_cfg.size}x{model.enc_cfg.size}")
    rng = make_rng(seed)
    codes = model.encode(rgb)
    sched = model.schedule
    x = PointCloud(rng.standard_normal((n_points, 3)))
    steps, clouds = [], []
    for t in range(sched.T, 0, -1):
        eps = noise_fn(x.positions, t) if noise_fn else model.noise(x.positions, t, codes.shape_code).data
        z = rng.standard_normal((n_points, 3)) if t > 1 else None
        x = reverse_step(x, eps, t, sched, z)
        if trace_stride and ((t - 1) % trace_stride == 0):
            steps.append(t - 1)
            clouds.append(PointCloud(x.positions.copy()))
    colors = model.colors(x.positions, codes.color_code, 1).data
    return ReconstructionTrace(steps, clouds, PointCloud(x.positions, colors))


# -- evaluation --------------------------------------------------------------------------------
def evaluate_clouds(names: Sequence[str], preds: Sequence, truths: Sequence) -> list[dict]:
    """Rows of ``{name, cd, emd}`` in normalized units plus a trailing mean row."""
    if not names:
        raise ContractError("evaluation set is empty")
    rows = [{"name": n, "cd": metric_cd(p, g), "emd": metric_emd(p, g)}
            for n, p, g in zip(names, preds, truths)]
    rows.append({"name": "mean", "cd": float(np.mean([r["cd"] for r in rows])),
                 "emd": float(np.mean([r["emd"] for r in rows]))})
    return rows


def evaluate(model: Model, samples: Sequence[Sample], seed: int = 0) -> tuple[list[dict], list[PointCloud]]:
    if not samples:
        raise ContractError("evaluation set is empty")
    preds = [reconstruct(model, s.image, s.camera, seed=seed + i, n_points=s.cloud.n_points).final
             for i, s in enumerate(samples)]
    return evaluate_clouds([s.name for s in samples], preds, [s.cloud for s in samples]), preds


def format_report(rows: list[dict]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "cd_x1e3", "emd_x1e2"])
    for r in rows:
        w.writerow([r["name"], f"{r['cd'] * CD_SCALE:.6f}", f"{r['emd'] * EMD_SCALE:.6f}"])
    return buf.getvalue()


def write_report(path, rows: list[dict]) -> None:
    _atomic_write(path, format_report(rows).encode())


def desk_fixture_config(disable_rgb: bool = False, **overrides) -> TrainConfig:
    """Settings for the four-shape, 256-point, single-CPU overfit fixture."""
    cfg = dict(steps=5000, batch_size=4, render_stride=4, width=256, lr=2e-3, lr_final=1e-5,
               w_cham=0.1, grad_clip=10.0, log_every=500, disable_rgb=disable_rgb)
    cfg.update(overrides)
    return TrainConfig(**cfg)
