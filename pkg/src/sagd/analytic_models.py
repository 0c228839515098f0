"""Closed-form Gaussian mixtures used as oracles.

Every function that depends on a noise level accepts ``(t, sched)`` where
``sched`` is anything with a ``levels(t) -> (alpha_bar, sigma)`` method: a
:class:`~sagd.diffusion_core.DiffusionSchedule` with integer ``t`` or a
:class:`~sagd.diffusion_core.VPSchedule` with continuous ``t``. The
``*_at_level`` variants take ``alpha_bar`` and ``sigma`` directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from .errors import ConsistencyError, DegenerateCovarianceError, DegenerateDensityError
from .spectral_ops import AnisotropicCovariance, explicit_covariance, identity_covariance, vector_stream

TWEEDIE_AGREEMENT = 1e-6


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        C = np.asarray(self.covs, dtype=float)
        if C.ndim == 2:
            C = C[None]
        K, d = mu.shape
        if w.shape != (K,) or C.shape != (K, d, d):
            raise ValueError(f"inconsistent mixture shapes: weights {w.shape}, means {mu.shape}, covs {C.shape}")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")
        if not np.allclose(C, np.swapaxes(C, 1, 2), rtol=0, atol=1e-12 * max(1.0, np.abs(C).max())):
            raise ValueError("mixture covariances must be symmetric")
        chols = []
        for k in range(K):
            try:
                chols.append(cho_factor(C[k], lower=True))
            except np.linalg.LinAlgError:
                raise DegenerateDensityError(f"component {k} covariance is not positive definite") from None
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covs", C)
        object.__setattr__(self, "_chols", chols)

    @property
    def K(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def _component_terms(self, x):
        """Per-component log(pi_k N(x; mu_k, C_k)) and scores, shapes (n, K), (n, K, d)."""
        x = np.atleast_2d(x)
        n, d = x.shape
        logp = np.empty((n, self.K))
        scores = np.empty((n, self.K, d))
        for k, (chol, w) in enumerate(zip(self._chols, self.weights)):
            diff = x - self.means[k]
            sol = cho_solve(chol, diff.T).T
            logdet = 2.0 * np.sum(np.log(np.diag(chol[0])))
            logp[:, k] = np.log(w) - 0.5 * (np.sum(diff * sol, axis=1) + logdet + d * np.log(2 * np.pi))
            scores[:, k] = -sol
        return logp, scores


def _as_points(gm, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != gm.dim:
        raise ValueError(f"points have dimension {x.shape[-1]}, mixture has {gm.dim}")
    return x


def gm_log_density(gm: GaussianMixture, x):
    x = _as_points(gm, x)
    logp, _ = gm._component_terms(x.reshape(-1, gm.dim))
    return logsumexp(logp, axis=1).reshape(x.shape[:-1])


def gm_responsibilities(gm: GaussianMixture, x):
    x = _as_points(gm, x)
    logp, _ = gm._component_terms(x.reshape(-1, gm.dim))
    r = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
    return r.reshape(x.shape[:-1] + (gm.K,))


def gm_score(gm: GaussianMixture, x):
    """``sum_k r_k(x) * (-C_k^{-1} (x - mu_k))``."""
    x = _as_points(gm, x)
    logp, scores = gm._component_terms(x.reshape(-1, gm.dim))
    r = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
    return np.einsum("nk,nkd->nd", r, scores).reshape(x.shape)


def gm_sample(gm: GaussianMixture, n: int, seed=0, rng=None):
    rng = vector_stream(seed) if rng is None else rng
    labels = rng.choice(gm.K, size=n, p=gm.weights)
    z = rng.standard_normal((n, gm.dim))
    L = np.linalg.cholesky(gm.covs)
    return gm.means[labels] + np.einsum("nij,nj->ni", L[labels], z)


def _explicit_matrix(cov: AnisotropicCovariance, dim: int):
    if cov.is_fourier:
        if cov.dim != dim:
            raise ValueError("covariance dimension does not match mixture")
        return cov.matrix()
    if cov.dim != dim:
        raise ValueError(f"covariance has dimension {cov.dim}, mixture has {dim}")
    return cov.matrix()


def smooth_mixture(gm: GaussianMixture, alpha_bar, sigma, cov: AnisotropicCovariance) -> GaussianMixture:
    """Law of ``sqrt(alpha_bar) x0 + sigma eps`` with ``x0 ~ gm``, ``eps ~ N(0, cov)``."""
    S = _explicit_matrix(cov, gm.dim)
    covs = alpha_bar * gm.covs + sigma ** 2 * S
    try:
        return GaussianMixture(gm.weights, np.sqrt(alpha_bar) * gm.means, covs)
    except DegenerateDensityError:
        raise DegenerateDensityError("smoothed mixture is not absolutely continuous (singular covariance)") from None


def gm_smoothed(gm, t, sched, cov) -> GaussianMixture:
    return smooth_mixture(gm, *sched.levels(t), cov)


def gm_smoothed_score(gm, t, sched, cov, x):
    return gm_score(gm_smoothed(gm, t, sched, cov), x)


def posterior_mean_at_level(gm: GaussianMixture, x_t, alpha_bar, sigma, cov, check=True):
    """``E[x0 | x_t]`` in closed form, cross-checked against Tweedie's formula.

    Returns ``(closed_form, tweedie)``. Raises :class:`ConsistencyError` when
    ``check`` is set and the two disagree by more than 1e-6 (relative).
    """
    x_t = _as_points(gm, x_t)
    pts = x_t.reshape(-1, gm.dim)
    z = pts / np.sqrt(alpha_bar)
    noise = (sigma ** 2 / alpha_bar) * _explicit_matrix(cov, gm.dim)
    law_z = GaussianMixture(gm.weights, gm.means, gm.covs + noise)

    logp, scores = law_z._component_terms(z)
    r = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
    # per component: mu_k + C_k (C_k + S)^{-1} (z - mu_k), and scores_k = -(C_k + S)^{-1} (z - mu_k)
    comp_means = gm.means[None] - np.einsum("kij,nkj->nki", gm.covs, scores)
    closed = np.einsum("nk,nkd->nd", r, comp_means)
    tweedie = z + np.einsum("ij,nj->ni", noise, gm_score(law_z, z))

    if check:
        scale = max(1.0, np.abs(closed).max())
        err = np.abs(closed - tweedie).max() / scale
        if err > TWEEDIE_AGREEMENT:
            raise ConsistencyError(f"closed-form and Tweedie posterior means differ by {err:.3e}")
    return closed.reshape(x_t.shape), tweedie.reshape(x_t.shape)


def gm_posterior_mean_x0(gm, x_t, t, sched, cov):
    if not cov.is_full_rank():
        raise DegenerateCovarianceError("posterior mean requires a full-rank covariance")
    return posterior_mean_at_level(gm, x_t, *sched.levels(t), cov)[0]


def optimal_eps_at_level(gm, x_t, alpha_bar, sigma, cov):
    """``E[eps_w | x_t] = (x_t - sqrt(alpha_bar) E[x0 | x_t]) / sigma``."""
    if sigma == 0:
        raise ZeroDivisionError("optimal predictor undefined at sigma = 0")
    x_t = _as_points(gm, x_t)
    mean, _ = posterior_mean_at_level(gm, x_t, alpha_bar, sigma, cov, check=False)
    return (x_t - np.sqrt(alpha_bar) * mean) / sigma


def optimal_eps_predictor(gm, x_t, t, sched, cov):
    return optimal_eps_at_level(gm, x_t, *sched.levels(t), cov)


def three_mode_preset() -> GaussianMixture:
    """Default 2-D target: three well-separated modes on a circle of radius 2."""
    angles = np.deg2rad([90.0, 210.0, 330.0])
    means = 2.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    base = np.array([[0.09, 0.0], [0.0, 0.09]])
    stretch = np.array([[0.16, 0.05], [0.05, 0.06]])
    covs = np.stack([base, stretch, stretch[::-1, ::-1]])
    return GaussianMixture(np.array([0.4, 0.3, 0.3]), means, covs)


def small_noise_score_error(gm, cov, sigma, points):
    """Largest per-point error between the data score and the score smoothed to level ``sigma``.

    The level uses ``alpha_bar = 1 - sigma**2``. Per point the error is
    ``|s_sigma - s_0| / max(1, |s_0|)``.
    """
    smoothed = smooth_mixture(gm, 1.0 - sigma ** 2, sigma, cov)
    s0 = gm_score(gm, points)
    diff = np.linalg.norm(gm_score(smoothed, points) - s0, axis=-1)
    return float(np.max(diff / np.maximum(1.0, np.linalg.norm(s0, axis=-1))))


def bulk_grid(gm, limit=3.0, n=41, min_density=1e-3):
    """Points of a regular ``n x n`` grid on ``[-limit, limit]^2`` where the
    mixture density is at least ``min_density``.

    Far in the tails the component responsibilities switch sharply, and
    smoothing moves those switching curves, so score convergence there is
    pointwise but very slow. Small-noise checks therefore use the bulk.
    """
    xs = np.linspace(-limit, limit, n)
    pts = np.stack(np.meshgrid(xs, xs), axis=-1).reshape(-1, 2)
    return pts[gm_log_density(gm, pts) >= np.log(min_density)]


HADAMARD_2 = np.array([[1.0, 1.0], [1.0, -1.0]]) / np.sqrt(2.0)
TILT_KAPPA = 3.0


def tilt_covariance(kind="iso", kappa=TILT_KAPPA) -> AnisotropicCovariance:
    """2-D forward covariances for flow comparisons.

    ``"iso"`` is the identity. ``"tilt+"`` has eigenvalues ``(1/kappa, kappa)``
    along ``(1, 1)/sqrt2`` and ``(1, -1)/sqrt2``; ``"tilt-"`` swaps them. All
    three have determinant 1.
    """
    if kind == "iso":
        return identity_covariance(2)
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    lam = np.array([1.0 / kappa, kappa])
    if kind == "tilt+":
        return explicit_covariance(HADAMARD_2, lam)
    if kind == "tilt-":
        return explicit_covariance(HADAMARD_2, lam[::-1])
    raise ValueError(f"unknown covariance preset {kind!r}")


def mixture_from_config(spec: dict) -> GaussianMixture:
    """Build a mixture from ``{"weights": [...], "means": [[...]], "covs": [[[...]]]}``."""
    return GaussianMixture(np.asarray(spec["weights"], dtype=float),
                           np.asarray(spec["means"], dtype=float),
                           np.asarray(spec["covs"], dtype=float))
