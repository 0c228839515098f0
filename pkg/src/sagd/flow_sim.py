"""Probability-flow ODE transport and discrete reverse samplers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion_core import DiffusionSchedule, ddim_step, ddpm_step, eps_from_score, score_from_eps
from .errors import DivergenceError, NonFiniteError
from .spectral_ops import AnisotropicCovariance, NoiseMode, sample_shaped_noise

DEFAULT_T_MIN = 1e-3
DEFAULT_STEPS = 500
DEFAULT_SNAPSHOTS = 5
BLOWUP = 1e6


@dataclass
class ParticleEnsemble:
    states: np.ndarray
    time: float = 1.0

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if not np.all(np.isfinite(self.states)):
            raise ValueError("particle states must be finite")
        if not 0.0 <= self.time <= 1.0:
            raise ValueError(f"ensemble time {self.time} outside [0, 1]")

    @property
    def N(self):
        return self.states.shape[0]

    @property
    def dim(self):
        return self.states.shape[1]


@dataclass
class FlowTrajectory:
    times: np.ndarray
    snapshots: np.ndarray  # (S, N, dim)

    def ensemble(self, i) -> ParticleEnsemble:
        return ParticleEnsemble(self.snapshots[i], float(self.times[i]))

    @property
    def terminal(self):
        return self.snapshots[-1]


def pf_ode_drift(x, t, score_fn, cov: AnisotropicCovariance, beta_fn):
    """``-beta(t)/2 * (x + cov @ score(x, t))``."""
    score = score_fn(x, t)
    if not np.all(np.isfinite(score)):
        raise NonFiniteError(f"score is not finite at t={t}")
    beta = beta_fn(t)
    return -0.5 * beta * (x + cov.apply(score))


def integrate_flow(prior, score_fn, cov, beta_fn, steps=DEFAULT_STEPS, snapshots=DEFAULT_SNAPSHOTS,
                   integrator="heun", t_min=DEFAULT_T_MIN, t_max=1.0) -> FlowTrajectory:
    """Integrate the probability-flow ODE backwards from ``t_max`` to ``t_min``.

    Snapshots are taken at ``snapshots`` equally spaced times including both
    endpoints; ``steps`` is rounded per segment so each snapshot lands on a
    step boundary.
    """
    if integrator not in ("euler", "heun"):
        raise ValueError(f"unknown integrator {integrator!r}")
    if snapshots < 2 or steps < snapshots:
        raise ValueError("need steps >= snapshots >= 2")
    if not 0.0 < t_min < t_max <= 1.0:
        raise ValueError("need 0 < t_min < t_max <= 1")
    x = prior.states.copy() if isinstance(prior, ParticleEnsemble) else np.array(prior, dtype=float)

    snap_times = np.linspace(t_max, t_min, snapshots)
    per_segment = np.diff(np.round(np.linspace(0, steps, snapshots)).astype(int))
    out = [x.copy()]
    step = 0
    for seg, n_sub in enumerate(per_segment):
        ts = np.linspace(snap_times[seg], snap_times[seg + 1], n_sub + 1)
        for t0, t1 in zip(ts[:-1], ts[1:]):
            h = t1 - t0  # negative: integrating backwards in time
            k1 = pf_ode_drift(x, t0, score_fn, cov, beta_fn)
            if integrator == "euler":
                x = x + h * k1
            else:
                k2 = pf_ode_drift(x + h * k1, t1, score_fn, cov, beta_fn)
                x = x + 0.5 * h * (k1 + k2)
            step += 1
            if not np.all(np.isfinite(x)) or np.abs(x).max() > BLOWUP:
                raise DivergenceError(f"particles diverged at step {step} (t={t1:.4g})", step=step)
        out.append(x.copy())
    return FlowTrajectory(snap_times, np.stack(out))


def timestep_sequence(T: int, stride: int):
    """Descending timesteps ``T, T - stride, ...`` followed by 0."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ts = list(range(T, 0, -stride))
    return ts + [0]


def reverse_sample(eps_predictor, sched: DiffusionSchedule, cov: AnisotropicCovariance, n: int,
                   stride=1, seed=0, mode="ddim", project=None, channels=1, return_init=False):
    """Generate ``n`` samples from an epsilon predictor ``eps_predictor(x, t)``.

    The chain starts from ``N(0, sigma_T^2 cov)``. With ``project`` (default:
    whenever ``cov`` is rank deficient) predictions are routed through the
    pseudo-inverse score and back, i.e. projected onto ``range(cov)``.
    DDPM mode visits every step and ignores ``stride``.
    """
    if mode not in ("ddim", "ddpm"):
        raise ValueError(f"unknown sampler mode {mode!r}")
    if project is None:
        project = not cov.is_full_rank()
    x = sched.sigma_at(sched.T) * sample_shaped_noise(cov, n, channels, seed, NoiseMode.RAW, stream=0)
    x_init = x.copy()
    steps = timestep_sequence(sched.T, stride if mode == "ddim" else 1)
    for t, t_prev in zip(steps[:-1], steps[1:]):
        eps = np.asarray(eps_predictor(x, t), dtype=float)
        if not np.all(np.isfinite(eps)):
            raise NonFiniteError(f"predictor returned non-finite values at t={t}", step=t)
        if project:
            eps = eps_from_score(score_from_eps(eps, t, sched, cov), t, sched, cov)
        if mode == "ddim":
            x = ddim_step(x, eps, t, t_prev, sched)
        else:
            x = ddpm_step(x, eps, t, sched, cov, seed + 1)
    return (x, x_init) if return_init else x


def score_field_grid(score_fn, bounds, resolution, t):
    """Evaluate ``score_fn(points, t)`` on a regular grid.

    ``bounds = (xmin, xmax, ymin, ymax)``, ``resolution = (nx, ny)``.
    Returns ``(points, vectors)`` each shaped ``(ny, nx, 2)``.
    """
    xmin, xmax, ymin, ymax = bounds
    nx, ny = (resolution, resolution) if np.isscalar(resolution) else resolution
    xs = np.linspace(xmin, xmax, nx) if nx > 1 else np.array([0.5 * (xmin + xmax)])
    ys = np.linspace(ymin, ymax, ny) if ny > 1 else np.array([0.5 * (ymin + ymax)])
    X, Y = np.meshgrid(xs, ys)
    pts = np.stack([X, Y], axis=-1)
    vec = np.asarray(score_fn(pts.reshape(-1, 2), t)).reshape(pts.shape)
    return pts, vec
