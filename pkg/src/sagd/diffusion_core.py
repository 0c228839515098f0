"""Noise schedules, anisotropic forward sampling and reverse updates.

Discrete timesteps are 1-based: ``t = 1 .. T``. Step ``t = 0`` denotes clean
data with ``alpha_bar_0 = 1``. Per-step arrays on :class:`DiffusionSchedule`
are stored 0-based (entry ``t - 1``); use the accessors to avoid off-by-one
slips.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .spectral_ops import (
    DEFAULT_ZERO_TOL,
    AnisotropicCovariance,
    NoiseMode,
    apply_pinv,
    sample_shaped_noise,
)

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
DEFAULT_BETA_MIN = 0.1
DEFAULT_BETA_MAX = 20.0


@dataclass(frozen=True, eq=False)
class VPSchedule:
    """Continuous variance-preserving schedule with linear ``beta(t)`` on [0, 1]."""

    beta_min: float = DEFAULT_BETA_MIN
    beta_max: float = DEFAULT_BETA_MAX

    def beta(self, t):
        return self.beta_min + (self.beta_max - self.beta_min) * t

    def alpha_bar(self, t):
        return np.exp(-(self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t))

    def levels(self, t):
        """``(alpha_bar, sigma)`` at continuous time ``t``."""
        abar = float(self.alpha_bar(t))
        return abar, float(np.sqrt(-np.expm1(-(self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t))))


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    beta: np.ndarray
    continuous_beta: tuple = (DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("beta must be a nonempty 1-D array")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("every beta_t must lie in (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        sigma = np.sqrt(1.0 - alpha_bar)
        abar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
        beta_tilde = (1.0 - abar_prev) / (1.0 - alpha_bar) * beta
        # sigma_t = sqrt(1 - alpha_bar_t) rounds to exactly 1.0 once alpha_bar_t
        # drops below machine epsilon, so only alpha_bar is checked strictly.
        if np.any(np.diff(alpha_bar) >= 0) or np.any(np.diff(sigma) < 0):
            raise ValueError("schedule is not strictly monotone")
        for name, value in [("beta", beta), ("alpha", alpha), ("alpha_bar", alpha_bar),
                            ("sigma", sigma), ("beta_tilde", beta_tilde)]:
            object.__setattr__(self, name, value)

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def _check(self, t, allow_zero=False):
        if int(t) != t or t < (0 if allow_zero else 1) or t > self.T:
            raise ValueError(f"timestep {t} outside [{0 if allow_zero else 1}, {self.T}]")
        return int(t)

    def alpha_bar_at(self, t) -> float:
        t = self._check(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def sigma_at(self, t) -> float:
        t = self._check(t, allow_zero=True)
        return 0.0 if t == 0 else float(self.sigma[t - 1])

    def alpha_at(self, t) -> float:
        return float(self.alpha[self._check(t) - 1])

    def beta_tilde_at(self, t) -> float:
        return float(self.beta_tilde[self._check(t) - 1])

    def levels(self, t):
        return self.alpha_bar_at(t), self.sigma_at(t)

    def continuous(self) -> VPSchedule:
        return VPSchedule(*self.continuous_beta)


def make_schedule(T=DEFAULT_T, beta_start=DEFAULT_BETA_START, beta_end=DEFAULT_BETA_END,
                  continuous_beta=(DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)) -> DiffusionSchedule:
    """Linear beta schedule."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return DiffusionSchedule(np.linspace(beta_start, beta_end, int(T)), tuple(continuous_beta))


def _check_matches(x, cov: AnisotropicCovariance):
    x = np.asarray(x, dtype=float)
    if x.shape[-len(cov.shape):] != cov.shape:
        raise ValueError(f"array shape {x.shape} does not match covariance shape {cov.shape}")
    if cov.is_fourier and x.ndim != 4:
        raise ValueError("field tensors must be (batch, channels, H, W)")
    if not cov.is_fourier and x.ndim != 2:
        raise ValueError("vector tensors must be (batch, d)")
    return x


def draw_noise(like, cov, seed, stream=0, rng=None):
    """``N(0, cov)`` noise shaped like ``like`` (raw mode)."""
    batch = like.shape[0]
    channels = like.shape[1] if cov.is_fourier else 1
    return sample_shaped_noise(cov, batch, channels, seed, NoiseMode.RAW, stream=stream, rng=rng)


def forward_sample(x0, t, sched: DiffusionSchedule, cov: AnisotropicCovariance, seed=0, *, rng=None):
    """Draw ``x_t ~ N(sqrt(abar_t) x0, sigma_t^2 cov)``; returns ``(x_t, eps_w)``."""
    x0 = _check_matches(x0, cov)
    abar, sigma = sched.levels(sched._check(t))
    eps = draw_noise(x0, cov, seed, rng=rng)
    return np.sqrt(abar) * x0 + sigma * eps, eps


def score_from_eps(eps_hat, t, sched, cov, zero_tol_rel=DEFAULT_ZERO_TOL):
    """``-(1/sigma_t) pinv(cov) eps_hat``; the projected score when cov is singular."""
    sigma = sched.sigma_at(t)
    if sigma == 0:
        raise ZeroDivisionError("score undefined at sigma_t = 0")
    return -apply_pinv(cov, eps_hat, zero_tol_rel) / sigma


def eps_from_score(score, t, sched, cov):
    return -sched.sigma_at(t) * cov.apply(score)


def x0_from_eps(x_t, eps_hat, t, sched):
    abar, sigma = sched.levels(sched._check(t))
    return (np.asarray(x_t) - sigma * np.asarray(eps_hat)) / np.sqrt(abar)


def posterior_params(x_t, x0, t, sched):
    """Mean and scalar variance factor of ``q(x_{t-1} | x_t, x0)``.

    The posterior covariance is ``beta_tilde_t * cov`` for the shared forward
    covariance, so only the scalar is returned.
    """
    x_t = np.asarray(x_t, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if x_t.shape != x0.shape:
        raise ValueError(f"x_t shape {x_t.shape} != x0 shape {x0.shape}")
    t = sched._check(t)
    alpha = sched.alpha_at(t)
    abar = sched.alpha_bar_at(t)
    mu = (x_t - (1.0 - alpha) / (1.0 - abar) * (x_t - np.sqrt(abar) * x0)) / np.sqrt(alpha)
    return mu, sched.beta_tilde_at(t)


def ddim_update(x_t, eps_hat, abar_t, abar_prev):
    """Deterministic (eta = 0) DDIM move between two noise levels."""
    x0_hat = (x_t - np.sqrt(1.0 - abar_t) * eps_hat) / np.sqrt(abar_t)
    return np.sqrt(abar_prev) * x0_hat + np.sqrt(1.0 - abar_prev) * eps_hat


def ddim_step(x_t, eps_hat, t, t_prev, sched):
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be smaller than t ({t})")
    return ddim_update(np.asarray(x_t, dtype=float), np.asarray(eps_hat, dtype=float),
                       sched.alpha_bar_at(t), sched.alpha_bar_at(t_prev))


def ddpm_step(x_t, eps_hat, t, sched, cov, seed=0, *, rng=None):
    """Ancestral step with ``N(0, cov)``-shaped injected noise.

    The noise stream is keyed on ``(seed, t)`` so a rollout with one seed
    draws fresh noise at every step. No noise is added at ``t = 1``.
    """
    x_t = _check_matches(x_t, cov)
    x0_hat = x0_from_eps(x_t, eps_hat, t, sched)
    mu, beta_tilde = posterior_params(x_t, x0_hat, t, sched)
    if t == 1 or beta_tilde == 0:
        return mu
    return mu + np.sqrt(beta_tilde) * draw_noise(x_t, cov, seed, stream=t, rng=rng)


def timevarying_marginal_cov(sched: DiffusionSchedule, weights_per_step):
    """Per-Fourier-bin variance of ``x_t | x0`` when step ``s`` uses weight ``w_s``.

    ``t`` is ``len(weights_per_step)``.
    """
    weights = list(weights_per_step)
    t = len(weights)
    if t < 1 or t > sched.T:
        raise ValueError(f"need between 1 and {sched.T} weights, got {t}")
    grid = weights[0].grid
    if any(not w.grid.same_as(grid) for w in weights):
        raise ValueError("all weights must share one frequency grid")
    alpha = sched.alpha[:t]
    beta = sched.beta[:t]
    # prod_{k=s+1}^{t} alpha_k for s = 1..t
    tail = np.concatenate([np.cumprod(alpha[::-1])[::-1][1:], [1.0]])
    total = np.zeros(grid.shape)
    for coef, w in zip(beta * tail, weights):
        total += coef * w.power
    return total


def forward_chain(x0, sched, covs, seed=0):
    """Run ``x_s = sqrt(alpha_s) x_{s-1} + sqrt(beta_s) eps_s`` with per-step covariances."""
    x = np.asarray(x0, dtype=float)
    for s, cov in enumerate(covs, start=1):
        eps = draw_noise(x, cov, seed, stream=s)
        x = np.sqrt(sched.alpha_at(s)) * x + np.sqrt(sched.beta[s - 1]) * eps
    return x
