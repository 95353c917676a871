"""Variance-preserving forward corruption and reverse solvers.

The forward process corrupts a clean sample x0 at integer timestep t into
x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps with eps standard normal,
where abar_t is the running product of (1 - beta) over a linear beta grid.
The convention abar_0 = 1 makes t = 0 the clean sample.  Reverse solvers
consume a noise prediction eps_hat: the deterministic solver reconstructs
the clean-sample estimate and re-noises it at the target step, the
ancestral solver adds fresh Gaussian noise at each transition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig, InvalidStep, ShapeMismatch
from .rng import SeededRng


@dataclass(frozen=True)
class DiffusionConfig:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    schedule: str = "linear"

    def __post_init__(self):
        if self.timesteps < 1:
            raise InvalidConfig(f"timesteps must be >= 1, got {self.timesteps}")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise InvalidConfig(
                f"need 0 < beta_start <= beta_end < 1, got ({self.beta_start}, {self.beta_end})"
            )
        if self.schedule != "linear":
            raise InvalidConfig(f"unknown schedule kind {self.schedule!r}")


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta / alpha / running-product tables, index i holds step i+1."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def timesteps(self) -> int:
        return len(self.betas)

    def check_step(self, t: int, lo: int = 0) -> int:
        t = int(t)
        if not (lo <= t <= self.timesteps):
            raise InvalidStep(f"timestep {t} outside [{lo}, {self.timesteps}]")
        return t

    def alpha_bar(self, t: int) -> float:
        """Running product at step t, with alpha_bar(0) = 1 exactly."""
        t = self.check_step(t)
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])

    def beta(self, t: int) -> float:
        t = self.check_step(t, lo=1)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        t = self.check_step(t, lo=1)
        return float(self.alphas[t - 1])


def make_linear_schedule(cfg: DiffusionConfig) -> NoiseSchedule:
    """Evenly spaced betas from beta_start to beta_end inclusive."""
    betas = np.linspace(cfg.beta_start, cfg.beta_end, cfg.timesteps)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def forward_noise(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Corrupt x0 to step t with the given noise draw.

    ``t`` may be a scalar applied to the whole batch or a vector with one
    step per leading-axis element.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeMismatch(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    if np.ndim(t) == 0:
        ab = sched.alpha_bar(int(t))
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    t = np.asarray(t)
    if t.shape[0] != x0.shape[0]:
        raise ShapeMismatch(f"per-sample steps {t.shape} do not match batch {x0.shape[0]}")
    ab = np.array([sched.alpha_bar(int(ti)) for ti in t])
    shape = (-1,) + (1,) * (x0.ndim - 1)
    return np.sqrt(ab).reshape(shape) * x0 + np.sqrt(1.0 - ab).reshape(shape) * eps


def dsm_loss(eps_hat: np.ndarray, eps: np.ndarray) -> float:
    """Mean squared error between predicted and true noise."""
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps_hat.shape != eps.shape:
        raise ShapeMismatch(f"eps_hat shape {eps_hat.shape} != eps shape {eps.shape}")
    return float(np.mean((eps_hat - eps) ** 2))


def eps_to_score(eps_hat: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Convert a noise prediction to the score (gradient of log density)."""
    ab = sched.alpha_bar(sched.check_step(int(t), lo=1))
    return -np.asarray(eps_hat) / np.sqrt(1.0 - ab)


def ddim_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic reverse step from t to t_prev (t_prev < t, 0 allowed).

    Reconstructs the clean-sample estimate implied by eps_hat, then places
    it at the target noise level with the same eps_hat.
    """
    t = sched.check_step(int(t), lo=1)
    t_prev = int(t_prev)
    if not (0 <= t_prev < t):
        raise InvalidStep(f"target step {t_prev} must satisfy 0 <= t_prev < t={t}")
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if x_t.shape != eps_hat.shape:
        raise ShapeMismatch(f"x_t shape {x_t.shape} != eps_hat shape {eps_hat.shape}")
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t_prev)
    x0_hat = (x_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat


def ddpm_jump(x_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int, sched: NoiseSchedule,
              z: np.ndarray | None) -> np.ndarray:
    """Ancestral reverse transition from t to t_prev with noise draw z.

    With adjacent steps (t_prev = t - 1) the effective alpha ratio
    abar_t / abar_prev equals alpha_t and this reduces to the textbook
    posterior step.  z must be None exactly when t_prev == 0 (the final
    transition is deterministic).
    """
    t = sched.check_step(int(t), lo=1)
    t_prev = int(t_prev)
    if not (0 <= t_prev < t):
        raise InvalidStep(f"target step {t_prev} must satisfy 0 <= t_prev < t={t}")
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if x_t.shape != eps_hat.shape:
        raise ShapeMismatch(f"x_t shape {x_t.shape} != eps_hat shape {eps_hat.shape}")
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t_prev)
    a_eff = ab_t / ab_prev
    mean = (x_t - ((1.0 - a_eff) / np.sqrt(1.0 - ab_t)) * eps_hat) / np.sqrt(a_eff)
    if t_prev == 0:
        if z is not None:
            raise InvalidStep("the transition to step 0 is deterministic; z must be None")
        return mean
    if z is None:
        raise InvalidStep("noise draw required for transitions that do not end at step 0")
    z = np.asarray(z, dtype=np.float64)
    if z.shape != x_t.shape:
        raise ShapeMismatch(f"noise shape {z.shape} != state shape {x_t.shape}")
    return mean + np.sqrt(1.0 - a_eff) * z


def ddpm_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, sched: NoiseSchedule,
              rng: SeededRng) -> np.ndarray:
    """Single ancestral step t -> t-1; draws z from rng, or none at t = 1."""
    t = sched.check_step(int(t), lo=1)
    z = None if t == 1 else rng.generator().standard_normal(np.shape(x_t))
    return ddpm_jump(x_t, eps_hat, t, t - 1, sched, z)


def timestep_grid(timesteps: int, steps: int) -> list[int]:
    """Descending grid T = t_0 > t_1 > ... > t_steps = 0, evenly spaced."""
    steps = int(steps)
    if not (1 <= steps <= timesteps):
        raise InvalidStep(f"solver steps {steps} must lie in [1, {timesteps}]")
    grid = np.linspace(timesteps, 0, steps + 1)
    return [int(round(v)) for v in grid]


class PointOracleDenoiser:
    """Exact noise predictor for a dataset containing one point.

    Given x_t, returns the eps that forward corruption would have used to
    reach x_t from the target point.  Useful as a reference model: solvers
    driven by it must converge back to the point.
    """

    def __init__(self, target: np.ndarray, sched: NoiseSchedule):
        self.target = np.asarray(target, dtype=np.float64)
        self.sched = sched
        self.forward_calls = 0
        self.cond_dropout_p = None

    def forward(self, x_t, t, c=None, hooks=None, capture=None):
        self.forward_calls += 1
        t = self.sched.check_step(int(t), lo=1)
        ab = self.sched.alpha_bar(t)
        return (np.asarray(x_t) - np.sqrt(ab) * self.target) / np.sqrt(1.0 - ab)
