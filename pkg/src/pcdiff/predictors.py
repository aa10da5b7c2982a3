"""Per-point shape noise predictor and color predictor.

Both networks are shared per-point MLPs whose hidden layers are gate-bias
modulated by a global condition, so they are exactly permutation-equivariant
in the points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .conditioning import gate_bias_modulate, init_linear, init_modulation, linear, time_condition
from .tensor import ContractError, ParamStore, Tensor

__all__ = [
    "ShapeNetConfig",
    "ColorNetConfig",
    "init_shape_net",
    "init_color_net",
    "predict_noise",
    "predict_colors",
]


@dataclass(frozen=True)
class ShapeNetConfig:
    width: int = 128
    n_modulated: int = 3
    code_dim: int = 128
    fourier: int = 6
    T: int = 200

    @property
    def cond_dim(self) -> int:
        return self.code_dim + 1 + 2 * self.fourier


@dataclass(frozen=True)
class ColorNetConfig(ShapeNetConfig):
    pass


def _init_point_mlp(store: ParamStore, prefix: str, cfg: ShapeNetConfig, rng: np.random.Generator) -> None:
    fan_in = 3
    for i in range(cfg.n_modulated):
        init_linear(store, f"{prefix}.fc{i}", fan_in, cfg.width, rng)
        init_modulation(store, f"{prefix}.mod{i}", cfg.cond_dim, cfg.width, rng)
        fan_in = cfg.width
    init_linear(store, f"{prefix}.out", cfg.width, 3, rng, zero=True)


def init_shape_net(store: ParamStore, cfg: ShapeNetConfig, rng: np.random.Generator) -> None:
    _init_point_mlp(store, "shape", cfg, rng)


def init_color_net(store: ParamStore, cfg: ColorNetConfig, rng: np.random.Generator) -> None:
    _init_point_mlp(store, "color", cfg, rng)


def _condition(code, t, cfg: ShapeNetConfig) -> tuple[Tensor, bool]:
    code = tn.as_tensor(code)
    single = code.ndim == 1
    if single:
        code = code.reshape(1, -1)
    if code.shape[1] != cfg.code_dim:
        raise ContractError(f"latent code has dim {code.shape[1]}, config expects {cfg.code_dim}")
    tc = time_condition(t, cfg.T, cfg.fourier)
    if tc.shape[0] == 1 and code.shape[0] > 1:
        tc = np.repeat(tc, code.shape[0], axis=0)
    if tc.shape[0] != code.shape[0]:
        raise ContractError(f"{tc.shape[0]} steps for {code.shape[0]} codes")
    return tn.concat([code, Tensor(tc)], axis=1), single


def _run_point_mlp(x, cond: Tensor, store: ParamStore, prefix: str, cfg: ShapeNetConfig) -> Tensor:
    h = x
    for i in range(cfg.n_modulated):
        h = gate_bias_modulate(linear(h, store, f"{prefix}.fc{i}"), cond, store, f"{prefix}.mod{i}")
    return linear(h, store, f"{prefix}.out")


def _as_points(x) -> Tensor:
    if hasattr(x, "positions"):
        x = x.positions
    x = tn.as_tensor(x)
    if x.shape[-1] != 3 or x.ndim not in (2, 3):
        raise ContractError(f"points must be (n, 3) or (B, n, 3), got {x.shape}")
    return x


def predict_noise(x_t, t, shape_code, store: ParamStore, cfg: ShapeNetConfig) -> Tensor:
    """Noise estimate for noisy points ``x_t`` at step(s) ``t``.

    ``x_t`` is ``(n, 3)`` with a 1-D code, or ``(B, n, 3)`` with ``(B, D)``
    codes and one step per batch element.
    """
    x = _as_points(x_t)
    cond, single = _condition(shape_code, t, cfg)
    if single and x.ndim == 2:
        return _run_point_mlp(x.reshape(1, *x.shape), cond, store, "shape", cfg).reshape(x.shape)
    return _run_point_mlp(x, cond, store, "shape", cfg)


def predict_colors(x0_est, color_code, store: ParamStore, cfg: ColorNetConfig, t=1) -> Tensor:
    """Per-point RGB in (0, 1) for an estimated clean cloud."""
    x = _as_points(x0_est)
    cond, single = _condition(color_code, t, cfg)
    if single and x.ndim == 2:
        out = _run_point_mlp(x.reshape(1, *x.shape), cond, store, "color", cfg).reshape(x.shape)
    else:
        out = _run_point_mlp(x, cond, store, "color", cfg)
    return tn.sigmoid(out)
