"""Noise schedule tables and deterministic DDIM step arithmetic.

Diffusion runs on integer training timesteps t in [0, t_train). The clean
data boundary is the sentinel index -1 whose cumulative signal coefficient
is exactly 1, which lets the inversion loop start from clean latents and the
sampling loop end on them without special cases.

With abar(t) the cumulative product of (1 - beta), a deterministic sampling
step t -> t_prev maps

    x0_hat = (z_t - sqrt(1 - abar_t) * eps) / sqrt(abar_t)
    z_prev = sqrt(abar_prev) * x0_hat + sqrt(1 - abar_prev) * eps

and the matching inversion step t_prev -> t is the affine map

    z_t = alpha * z_prev + beta * eps
    alpha = sqrt(abar_t / abar_prev)
    beta  = sqrt(abar_t) * (sqrt(1/abar_t - 1) - sqrt(1/abar_prev - 1))

which is the exact algebraic inverse of the sampling step for a shared eps.
All functions are pure; step arithmetic runs in float64 internally and
returns the input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import sqrt

import numpy as np

from .errors import ValidationError

CLEAN_T = -1


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance tables of a discrete DDPM-style diffusion process."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def t_train(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal fraction at step t; the -1 sentinel returns 1."""
        if t == CLEAN_T:
            return 1.0
        if not 0 <= t < self.t_train:
            raise ValidationError(f"timestep {t} outside [-1, {self.t_train})")
        return float(self.alpha_bars[t])


def make_linear_schedule(
    t_train: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    """Linearly spaced betas; the common DDPM default."""
    if t_train < 2:
        raise ValidationError(f"t_train must be >= 2, got {t_train}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValidationError(
            f"betas must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, t_train, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


@dataclass(frozen=True)
class StepGrid:
    """Strictly decreasing timestep indices used by one sampling/inversion run."""

    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or len(idx) == 0:
            raise ValidationError("step grid must be a non-empty 1-d index array")
        if np.any(np.diff(idx) >= 0):
            raise ValidationError("step grid indices must be strictly decreasing")
        if idx[-1] < 0:
            raise ValidationError("step grid indices must be >= 0")
        object.__setattr__(self, "indices", idx)

    @property
    def count(self) -> int:
        return len(self.indices)

    def is_subgrid_of(self, other: "StepGrid") -> bool:
        return set(self.indices.tolist()).issubset(other.indices.tolist())

    def sampling_transitions(self) -> list[tuple[int, int]]:
        """(t, t_prev) pairs from the noisiest index down to the -1 sentinel."""
        ts = self.indices.tolist()
        return list(zip(ts, ts[1:] + [CLEAN_T]))

    def inversion_transitions(self) -> list[tuple[int, int]]:
        """(t_prev, t) pairs from the -1 sentinel up to the noisiest index."""
        return [(b, a) for a, b in reversed(self.sampling_transitions())]


def make_step_grid(t_train: int, count: int) -> StepGrid:
    """Evenly thinned grid t_i = t_train - 1 - floor(i * t_train / count).

    The grid always tops out at t_train - 1, and a grid of count N*k contains
    the grid of count N as a subset, so coarse sampling can consume latents
    recorded by a finer inversion.
    """
    if not 1 <= count <= t_train:
        raise ValidationError(f"step count must be in [1, {t_train}], got {count}")
    offsets = (np.arange(count, dtype=np.int64) * t_train) // count
    return StepGrid(indices=t_train - 1 - offsets)


def q_sample(z0: np.ndarray, t: int, noise: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Forward-noise clean latents to timestep t with the given unit noise."""
    if z0.shape != noise.shape:
        raise ValidationError(f"z0 shape {z0.shape} != noise shape {noise.shape}")
    ab = sched.alpha_bar(t)
    out = sqrt(ab) * z0.astype(np.float64, copy=False) + sqrt(1.0 - ab) * noise.astype(
        np.float64, copy=False
    )
    return out.astype(z0.dtype, copy=False)


def _check_step_args(z: np.ndarray, eps: np.ndarray, t: int, t_prev: int, sched: NoiseSchedule):
    if z.shape != eps.shape:
        raise ValidationError(f"latent shape {z.shape} != eps shape {eps.shape}")
    if t_prev < CLEAN_T or t >= sched.t_train:
        raise ValidationError(f"timesteps ({t}, {t_prev}) outside [-1, {sched.t_train})")
    if t <= t_prev:
        raise ValidationError(f"step requires t > t_prev, got t={t}, t_prev={t_prev}")


def ddim_sample_step(
    z_t: np.ndarray, eps: np.ndarray, t: int, t_prev: int, sched: NoiseSchedule
) -> np.ndarray:
    """One deterministic (eta = 0) denoising step t -> t_prev."""
    _check_step_args(z_t, eps, t, t_prev, sched)
    ab_t = sched.alpha_bar(t)
    ab_p = sched.alpha_bar(t_prev)
    z = z_t.astype(np.float64, copy=False)
    e = eps.astype(np.float64, copy=False)
    x0_hat = (z - sqrt(1.0 - ab_t) * e) / sqrt(ab_t)
    out = sqrt(ab_p) * x0_hat + sqrt(1.0 - ab_p) * e
    return out.astype(z_t.dtype, copy=False)


def inversion_coefficients(sched: NoiseSchedule, t_prev: int, t: int) -> tuple[float, float]:
    """(alpha, beta) of the affine inversion update z_t = alpha * z_prev + beta * eps."""
    if t <= t_prev:
        raise ValidationError(f"inversion requires t > t_prev, got t={t}, t_prev={t_prev}")
    ab_t = sched.alpha_bar(t)
    ab_p = sched.alpha_bar(t_prev)
    alpha = sqrt(ab_t / ab_p)
    beta = sqrt(ab_t) * (sqrt(1.0 / ab_t - 1.0) - sqrt(1.0 / ab_p - 1.0))
    return alpha, beta


def ddim_invert_step(
    z_prev: np.ndarray, eps: np.ndarray, t_prev: int, t: int, sched: NoiseSchedule
) -> np.ndarray:
    """One inversion step t_prev -> t, the exact inverse of `ddim_sample_step`."""
    _check_step_args(z_prev, eps, t, t_prev, sched)
    alpha, beta = inversion_coefficients(sched, t_prev, t)
    out = alpha * z_prev.astype(np.float64, copy=False) + beta * eps.astype(
        np.float64, copy=False
    )
    return out.astype(z_prev.dtype, copy=False)
