"""Image encoder, timestep embedding and gate-bias feature modulation."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as tn
from .tensor import ContractError, ParamStore, Tensor

__all__ = [
    "Image",
    "LatentCodes",
    "EncoderConfig",
    "TimeEmbedding",
    "init_linear",
    "linear",
    "init_encoder",
    "encode_image",
    "encode_images",
    "time_embed",
    "time_condition",
    "init_modulation",
    "gate_bias_modulate",
]


@dataclass
class Image:
    rgb: np.ndarray

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ContractError(f"image must be H x W x 3, got {self.rgb.shape}")
        if self.rgb.min() < 0.0 or self.rgb.max() > 1.0:
            raise ContractError("image values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


@dataclass
class LatentCodes:
    shape_code: Tensor
    color_code: Tensor


@dataclass(frozen=True)
class EncoderConfig:
    size: int = 64
    channels: tuple[int, ...] = (16, 32, 64, 128)
    shape_dim: int = 128
    color_dim: int = 128


@dataclass(frozen=True)
class TimeEmbedding:
    t_norm: float
    fourier: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([[self.t_norm], self.fourier])


# -- linear layers -----------------------------------------------------------
def init_linear(store: ParamStore, name: str, fan_in: int, fan_out: int,
                rng: np.random.Generator, zero: bool = False) -> None:
    """Weights uniform in +-sqrt(1/fan_in), zero bias."""
    if zero:
        w = np.zeros((fan_in, fan_out))
    else:
        bound = np.sqrt(1.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    store.add(f"{name}.w", w)
    store.add(f"{name}.b", np.zeros(fan_out))


def linear(x, store: ParamStore, name: str) -> Tensor:
    return x @ store[f"{name}.w"] + store[f"{name}.b"]


# -- time ---------------------------------------------------------------------
def time_embed(t: int, T: int, F: int = 6) -> TimeEmbedding:
    if not 1 <= t <= T:
        raise ContractError(f"step t={t} outside 1..{T}")
    t_norm = t / T
    angles = (2.0 ** np.arange(F)) * np.pi * t_norm
    fourier = np.empty(2 * F)
    fourier[0::2] = np.sin(angles)
    fourier[1::2] = np.cos(angles)
    return TimeEmbedding(t_norm, fourier)


def time_condition(t, T: int, F: int = 6) -> np.ndarray:
    """Stacked ``[t/T, fourier(t)]`` rows for a step or array of steps."""
    return np.stack([time_embed(int(ti), T, F).vector() for ti in np.atleast_1d(t)])


# -- gate-bias modulation -----------------------------------------------------------
def init_modulation(store: ParamStore, name: str, cond_dim: int, width: int,
                    rng: np.random.Generator) -> None:
    init_linear(store, f"{name}.gate", cond_dim, width, rng)
    init_linear(store, f"{name}.bias", cond_dim, width, rng)


def gate_bias_modulate(x, cond, store: ParamStore, name: str, activation=tn.leaky_relu) -> Tensor:
    """``activation(sigmoid(W_g c + b_g) * x + (W_b c + b_b))``.

    ``x`` is ``(n, d)`` with ``cond`` of shape ``(c,)``, or ``(B, n, d)`` with
    ``cond`` of shape ``(B, c)``; gate and bias are shared across the ``n``
    rows.  Pass ``activation=None`` for the identity.
    """
    x = tn.as_tensor(x)
    cond = tn.as_tensor(cond)
    w_g = store[f"{name}.gate.w"]
    if cond.shape[-1] != w_g.shape[0] or x.shape[-1] != w_g.shape[1]:
        raise ContractError(
            f"modulation {name}: cond {cond.shape} / features {x.shape} "
            f"do not match weights {w_g.shape}"
        )
    squeeze = cond.ndim == 1
    if squeeze:
        cond = cond.reshape(1, -1)
    gate = tn.sigmoid(linear(cond, store, f"{name}.gate"))
    bias = linear(cond, store, f"{name}.bias")
    if x.ndim == 3:
        gate = gate.reshape(gate.shape[0], 1, gate.shape[1])
        bias = bias.reshape(bias.shape[0], 1, bias.shape[1])
    elif not squeeze:
        raise ContractError("batched condition needs (B, n, d) features")
    out = gate * x + bias
    return out if activation is None else activation(out)


# -- encoder ------------------------------------------------------------------------
def init_encoder(store: ParamStore, cfg: EncoderConfig, rng: np.random.Generator) -> None:
    c_in = 3
    for i, c_out in enumerate(cfg.channels):
        init_linear(store, f"encoder.conv{i}", 9 * c_in, c_out, rng)
        c_in = c_out
    init_linear(store, "encoder.shape_head", c_in, cfg.shape_dim, rng)
    init_linear(store, "encoder.color_head", c_in, cfg.color_dim, rng)


@lru_cache(maxsize=32)
def _im2col_index(batch: int, h: int, w: int) -> tuple[np.ndarray, int, int]:
    """Row indices for a 3x3, stride-2, pad-1 convolution over ``batch`` maps.

    Input rows are ``b*h*w + y*w + x``; the padding row is the final one.
    """
    ho, wo = (h + 1) // 2, (w + 1) // 2
    pad = batch * h * w
    oy = np.arange(ho)[:, None, None, None] * 2 + np.arange(-1, 2)[None, None, :, None]
    ox = np.arange(wo)[None, :, None, None] * 2 + np.arange(-1, 2)[None, None, None, :]
    oy, ox = np.broadcast_arrays(oy, ox)
    valid = (oy >= 0) & (oy < h) & (ox >= 0) & (ox < w)
    base = np.where(valid, oy * w + ox, -1).reshape(ho * wo, 9)
    offsets = (np.arange(batch) * h * w)[:, None, None]
    idx = np.where(base[None] >= 0, base[None] + offsets, pad)
    return idx.reshape(batch * ho * wo, 9), ho, wo


def _conv_s2(x: Tensor, batch: int, h: int, w: int, store: ParamStore, name: str) -> tuple[Tensor, int, int]:
    """x: ``(batch*h*w, c)`` rows -> ``(batch*ho*wo, c_out)`` rows."""
    c = x.shape[1]
    idx, ho, wo = _im2col_index(batch, h, w)
    padded = tn.concat([x, Tensor(np.zeros((1, c)))], axis=0)
    cols = tn.gather_rows(padded, idx).reshape(batch * ho * wo, 9 * c)
    return tn.leaky_relu(linear(cols, store, name)), ho, wo


def encode_images(images: np.ndarray, store: ParamStore, cfg: EncoderConfig) -> LatentCodes:
    """Encode a ``(B, H, W, 3)`` stack; codes are ``(B, D)`` tensors."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1:] != (cfg.size, cfg.size, 3):
        raise ContractError(
            f"encoder expects (B, {cfg.size}, {cfg.size}, 3) images, got {images.shape}"
        )
    b, h, w = images.shape[:3]
    x = Tensor(images.reshape(b * h * w, 3))
    for i in range(len(cfg.channels)):
        x, h, w = _conv_s2(x, b, h, w, store, f"encoder.conv{i}")
    pooled = x.reshape(b, h * w, x.shape[1]).mean(axis=1)
    return LatentCodes(
        shape_code=linear(pooled, store, "encoder.shape_head"),
        color_code=linear(pooled, store, "encoder.color_head"),
    )


def encode_image(img: Image | np.ndarray, store: ParamStore, cfg: EncoderConfig) -> LatentCodes:
    rgb = img.rgb if isinstance(img, Image) else np.asarray(img)
    codes = encode_images(rgb[None], store, cfg)
    return LatentCodes(codes.shape_code.reshape(-1), codes.color_code.reshape(-1))
