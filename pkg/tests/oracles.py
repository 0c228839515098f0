"""Brute-force numerical oracles that share no code with the library."""

import numpy as np


def normal_pdf(x, mean, var):
    return np.exp(-0.5 * (x - mean) ** 2 / var) / np.sqrt(2 * np.pi * var)


def grid_bayes_posterior(x0, x_t, abar_prev, alpha_t, lam, n=400_001, width=12.0):
    """Mean and variance of ``x_{t-1} | x_t, x0`` for a 1-D chain with noise scale ``lam``,
    obtained by normalizing prior times likelihood on a uniform grid."""
    prior_mean = np.sqrt(abar_prev) * x0
    prior_var = (1.0 - abar_prev) * lam
    like_var = (1.0 - alpha_t) * lam
    spread = np.sqrt(min(prior_var, like_var / alpha_t))  # bounds the posterior sd
    lo = min(prior_mean, x_t / np.sqrt(alpha_t)) - width * spread
    hi = max(prior_mean, x_t / np.sqrt(alpha_t)) + width * spread
    grid = np.linspace(lo, hi, n)
    log_w = -0.5 * (grid - prior_mean) ** 2 / prior_var - 0.5 * (x_t - np.sqrt(alpha_t) * grid) ** 2 / like_var
    w = np.exp(log_w - log_w.max())
    w /= w.sum()
    mean = np.sum(w * grid)
    return mean, np.sum(w * (grid - mean) ** 2)


def quadrature_posterior_mean_1d(weights, means, variances, x_t, abar, sigma, lam, n=200_001, width=12.0):
    """``E[x0 | x_t]`` for a 1-D Gaussian mixture prior by direct quadrature over ``x0``."""
    sd = np.sqrt(np.max(variances))
    grid = np.linspace(np.min(means) - width * sd, np.max(means) + width * sd, n)
    prior = sum(w * normal_pdf(grid, m, v) for w, m, v in zip(weights, means, variances))
    like = normal_pdf(x_t, np.sqrt(abar) * grid, sigma ** 2 * lam)
    post = prior * like
    return np.sum(post * grid) / np.sum(post)
