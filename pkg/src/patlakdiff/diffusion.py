"""Denoising-diffusion machinery: beta schedule, forward/posterior/reverse
formulas, and pluggable score models (exact Gaussian-prior score and a
denoiser-derived score via Tweedie's identity).

Timesteps are 1-based: t runs over 1..T, with step-t quantities stored at
array index t-1 and the convention alpha_bar(0) = 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .errors import ConfigError, DivergenceError


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray
    sigma: np.ndarray

    @property
    def T(self) -> int:
        return self.beta.size

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside 1..{self.T}")

    def abar(self, t: int) -> float:
        """alpha_bar at step t, with abar(0) = 1."""
        if t == 0:
            return 1.0
        self.check_t(t)
        return float(self.alpha_bar[t - 1])


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                  kind: str = "linear") -> NoiseSchedule:
    if kind != "linear":
        raise ConfigError(f"unknown schedule kind {kind!r}")
    if T < 1:
        raise ConfigError("schedule needs at least one step")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError("require 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    abar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    beta_tilde = (1.0 - abar_prev) * beta / (1.0 - alpha_bar)
    return NoiseSchedule(beta, alpha, alpha_bar, beta_tilde,
                         np.sqrt(beta_tilde))


def forward_sample(x0, t: int, eps, sched: NoiseSchedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    sched.check_t(t)
    ab = sched.alpha_bar[t - 1]
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def posterior_params(x0, x_t, t: int, sched: NoiseSchedule):
    """Mean and variance of x_{t-1} given (x_t, x_0)."""
    sched.check_t(t)
    beta = sched.beta[t - 1]
    alpha = sched.alpha[t - 1]
    ab = sched.alpha_bar[t - 1]
    ab_prev = sched.abar(t - 1)
    mu = (np.sqrt(ab_prev) * beta / (1.0 - ab) * np.asarray(x0)
          + np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab) * np.asarray(x_t))
    return mu, float(sched.beta_tilde[t - 1])


class ScoreModel(Protocol):
    """Noise predictor: epsilon_hat(x_t, t) -> same-shape estimate."""

    def epsilon_hat(self, x_t: np.ndarray, t: int) -> np.ndarray: ...


def reverse_step(x_t, t: int, score: ScoreModel, z, sched: NoiseSchedule):
    """One denoising step; the noise kick is suppressed at t=1."""
    sched.check_t(t)
    x_t = np.asarray(x_t)
    eps_hat = np.asarray(score.epsilon_hat(x_t, t))
    if not np.isfinite(eps_hat).all():
        raise DivergenceError(f"score produced non-finite output at t={t}")
    beta = sched.beta[t - 1]
    ab = sched.alpha_bar[t - 1]
    mean = (x_t - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(sched.alpha[t - 1])
    if t == 1:
        return mean
    return mean + sched.sigma[t - 1] * np.asarray(z)


def exact_gaussian_eps(x_t, t: int, mu0, s2: float, sched: NoiseSchedule):
    """Optimal noise prediction when x0 ~ N(mu0, s2 I).

    The step-t marginal is N(sqrt(abar) mu0, abar s2 + 1 - abar), and
    eps_hat = -sqrt(1-abar) * grad log p(x_t) evaluates to
    sqrt(1-abar) (x_t - sqrt(abar) mu0) / (abar s2 + 1 - abar).
    """
    sched.check_t(t)
    if s2 < 0:
        raise ValueError("prior variance must be nonnegative")
    ab = sched.alpha_bar[t - 1]
    return (np.sqrt(1.0 - ab) * (np.asarray(x_t) - np.sqrt(ab) * np.asarray(mu0))
            / (ab * s2 + 1.0 - ab))


@dataclass(frozen=True, eq=False)
class GaussianPriorScore:
    """Exact score for an i.i.d. Gaussian prior — the solver test oracle."""

    mu0: float | np.ndarray
    s2: float
    sched: NoiseSchedule

    def epsilon_hat(self, x_t, t: int) -> np.ndarray:
        return exact_gaussian_eps(x_t, t, self.mu0, self.s2, self.sched)


@dataclass(frozen=True, eq=False)
class DenoiserScore:
    """Score from a plug-in denoiser via Tweedie's identity.

    The chain state is rescaled to the denoiser's input domain,
    x0_hat = D(x_t / sqrt(abar_t)), and converted back to a noise estimate
    eps_hat = (x_t - sqrt(abar_t) x0_hat) / sqrt(1 - abar_t).  ``denoise``
    maps one 3-d array to a like-shaped array and is applied per channel
    with identical weights.
    """

    denoise: Callable[[np.ndarray], np.ndarray]
    sched: NoiseSchedule

    def epsilon_hat(self, x_t, t: int) -> np.ndarray:
        self.sched.check_t(t)
        ab = self.sched.alpha_bar[t - 1]
        x_t = np.asarray(x_t)
        if x_t.ndim == 3:
            channels = x_t[None]
        elif x_t.ndim == 4:
            channels = x_t
        else:
            raise ValueError("expected a 3-d volume or a channel stack")
        x0_hat = np.stack([self.denoise(c / np.sqrt(ab)) for c in channels])
        if x_t.ndim == 3:
            x0_hat = x0_hat[0]
        return (x_t - np.sqrt(ab) * x0_hat) / np.sqrt(1.0 - ab)
