"""Forward noising chain, its closed-form marginal and the ancestral sampler.

Steps are 1-based: ``t`` runs from 1 to ``T`` and ``schedule.beta[t - 1]`` is
the noise level of step ``t``.  Only geometry diffuses; colors are dropped by
every transition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, Tensor

__all__ = [
    "DiffusionSchedule",
    "PointCloud",
    "NoiseSample",
    "build_schedule",
    "sample_noise",
    "forward_step",
    "forward_marginal",
    "estimate_x0",
    "reverse_step",
]


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ContractError(f"step t={t} outside 1..{self.T}")

    def coefficients(self, t) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(beta, alpha, alpha_bar)`` at (array-valued) 1-based step ``t``."""
        i = np.asarray(t) - 1
        return self.beta[i], self.alpha[i], self.alpha_bar[i]


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ContractError(f"positions must be n x 3, got {self.positions.shape}")
        if not np.all(np.isfinite(self.positions)):
            raise ContractError("positions must be finite")
        if self.colors is not None:
            c = np.asarray(self.colors, dtype=np.float64)
            if c.shape != self.positions.shape:
                raise ContractError(f"colors shape {c.shape} != positions {self.positions.shape}")
            self.colors = np.clip(c, 0.0, 1.0)

    @property
    def n_points(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class NoiseSample:
    values: np.ndarray
    seed: int | None = None


def build_schedule(T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.05) -> DiffusionSchedule:
    """Linearly spaced betas from ``beta_start`` (step 1) to ``beta_end`` (step T)."""
    if T < 1:
        raise ContractError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ContractError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        beta = np.array([beta_start])
    else:
        beta = beta_start + np.arange(T) / (T - 1) * (beta_end - beta_start)
    alpha = 1.0 - beta
    return DiffusionSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def sample_noise(rng: np.random.Generator, n: int, seed: int | None = None) -> NoiseSample:
    return NoiseSample(rng.standard_normal((n, 3)), seed)


def _values(x) -> np.ndarray:
    if isinstance(x, NoiseSample):
        return x.values
    if isinstance(x, PointCloud):
        return x.positions
    return np.asarray(x, dtype=np.float64)


def forward_step(x_prev: PointCloud, t: int, sched: DiffusionSchedule, noise) -> PointCloud:
    sched.check_step(t)
    b = sched.beta[t - 1]
    return PointCloud(np.sqrt(1.0 - b) * x_prev.positions + np.sqrt(b) * _values(noise))


def forward_marginal(x0: PointCloud, t: int, sched: DiffusionSchedule, noise) -> PointCloud:
    sched.check_step(t)
    ab = sched.alpha_bar[t - 1]
    return PointCloud(np.sqrt(ab) * x0.positions + np.sqrt(1.0 - ab) * _values(noise))


def estimate_x0(x_t, predicted_noise, t, sched: DiffusionSchedule):
    """Clean-cloud estimate implied by a noise prediction.

    Accepts a :class:`PointCloud` with array noise, or tensors shaped
    ``(B, N, 3)`` with a per-element step array ``t`` (training path, where the
    estimate must stay differentiable in the prediction).
    """
    if isinstance(predicted_noise, Tensor):
        t = np.atleast_1d(t)
        for ti in t:
            sched.check_step(int(ti))
        ab = sched.alpha_bar[t - 1].reshape(-1, 1, 1)
        xt = x_t.data if isinstance(x_t, Tensor) else np.asarray(_values(x_t))
        return xt / np.sqrt(ab) - predicted_noise * (np.sqrt(1.0 - ab) / np.sqrt(ab))
    sched.check_step(t)
    ab = sched.alpha_bar[t - 1]
    eps = _values(predicted_noise)
    return PointCloud(x_t.positions / np.sqrt(ab) - np.sqrt(1.0 - ab) / np.sqrt(ab) * eps)


def reverse_step(x_t: PointCloud, predicted_noise, t: int, sched: DiffusionSchedule, z=None) -> PointCloud:
    """One ancestral step ``x_t -> x_{t-1}`` with variance ``beta_t``.

    ``z`` is ignored at ``t == 1`` so the last step is deterministic.
    """
    sched.check_step(t)
    b, a, ab = sched.coefficients(t)
    mean = (x_t.positions - b / np.sqrt(1.0 - ab) * _values(predicted_noise)) / np.sqrt(a)
    if t == 1 or z is None:
        return PointCloud(mean)
    return PointCloud(mean + np.sqrt(b) * _values(z))
