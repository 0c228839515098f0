"""Spectral and distributional measurements."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .spectral_ops import band_mask, build_frequency_grid


@dataclass
class RadialSpectrum:
    centers: np.ndarray  # mean normalized radius of the bins' members
    power: np.ndarray
    counts: np.ndarray


def _as_fields(fields):
    fields = np.asarray(fields, dtype=float)
    if fields.ndim == 2:
        fields = fields[None, None]
    elif fields.ndim == 3:
        fields = fields[:, None]
    if fields.ndim != 4:
        raise ValueError("fields must be (batch, channels, H, W)")
    if fields.shape[0] == 0:
        raise ValueError("empty batch")
    return fields


def power_spectrum(fields):
    """Mean over batch and channels of ``|unitary FFT|**2``, shape ``(H, W)``."""
    fields = _as_fields(fields)
    coeffs = np.fft.fft2(fields, norm="ortho")
    return np.mean(coeffs.real ** 2 + coeffs.imag ** 2, axis=(0, 1))


def rapsd(fields, bins=32) -> RadialSpectrum:
    """Radially averaged power spectrum over equal-width bins in normalized radius.

    Power is averaged before any log is taken; the DC bin is excluded and
    empty bins are dropped.
    """
    if bins < 4:
        raise ValueError("need at least 4 radial bins")
    fields = _as_fields(fields)
    grid = build_frequency_grid(*fields.shape[-2:])
    psd = power_spectrum(fields).ravel()
    d = grid.norm_radius.ravel()
    keep = d > 0
    idx = np.clip(np.ceil(d[keep] * bins).astype(int) - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    psum = np.bincount(idx, weights=psd[keep], minlength=bins)
    dsum = np.bincount(idx, weights=d[keep], minlength=bins)
    nz = counts > 0
    return RadialSpectrum(dsum[nz] / counts[nz], psum[nz] / counts[nz], counts[nz])


def fit_loglog_slope(spec: RadialSpectrum, d_lo=0.1, d_hi=0.8):
    """OLS fit of ``log power`` against ``log d`` over ``[d_lo, d_hi]``.

    Returns ``(slope, intercept)``. Bins with nonpositive power are excluded
    with a warning.
    """
    sel = (spec.centers >= d_lo) & (spec.centers <= d_hi)
    bad = sel & ~(spec.power > 0)
    if bad.any():
        warnings.warn(f"excluded {int(bad.sum())} nonpositive power bins from slope fit", RuntimeWarning)
    sel &= spec.power > 0
    if sel.sum() < 3:
        raise ValueError(f"need at least 3 bins inside [{d_lo}, {d_hi}], found {int(sel.sum())}")
    slope, intercept = np.polyfit(np.log(spec.centers[sel]), np.log(spec.power[sel]), 1)
    return float(slope), float(intercept)


def band_energy(fields, a, b):
    """Mean over samples of the in-band Fourier power divided by ``H*W``.

    Over the full band ``[0, 1]`` this is the spatial mean square (Parseval).
    Channels are averaged.
    """
    fields = _as_fields(fields)
    H, W = fields.shape[-2:]
    mask = band_mask(build_frequency_grid(H, W), a, b)
    return float(np.sum(power_spectrum(fields) * mask) / (H * W))


def empirical_fourier_cov(fields, n_pairs=10_000, seed=0, return_pairs=False):
    """Per-bin variance of unitary Fourier coefficients and the largest
    absolute off-diagonal correlation over a random subset of bin pairs.

    Pairs are drawn among bins in the non-redundant half plane (a bin and its
    mirror image are exact complex conjugates of each other for real fields).
    """
    fields = _as_fields(fields)
    n = fields.shape[0] * fields.shape[1]
    if n < 100:
        raise ValueError(f"need at least 100 samples, got {n}")
    H, W = fields.shape[-2:]
    coeffs = np.fft.fft2(fields, norm="ortho").reshape(n, H * W)
    centered = coeffs - coeffs.mean(axis=0)
    var = np.mean(np.abs(centered) ** 2, axis=0)

    ky, kx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    mirror = ((-ky) % H) * W + ((-kx) % W)
    flat = np.arange(H * W)
    half = flat[(flat <= mirror.ravel()) & (var > 0)]
    corr = np.zeros(0)
    if half.size >= 2:
        rng = np.random.Generator(np.random.Philox(key=[int(seed), 0x5A6D]))
        total = half.size * (half.size - 1) // 2
        m = min(n_pairs, total)
        if total <= n_pairs:
            ii, jj = np.triu_indices(half.size, k=1)
        else:
            ii = rng.integers(0, half.size, size=2 * m)
            jj = rng.integers(0, half.size, size=2 * m)
            ok = ii != jj
            ii, jj = ii[ok][:m], jj[ok][:m]
        i, j = half[ii], half[jj]
        num = np.empty(len(i))
        block = max(1, 2 ** 24 // n)  # keeps each gathered block near 256 MB
        for s in range(0, len(i), block):
            bi, bj = i[s:s + block], j[s:s + block]
            num[s:s + block] = np.abs(np.mean(centered[:, bi] * np.conj(centered[:, bj]), axis=0))
        corr = num / np.sqrt(var[i] * var[j])
    max_corr = float(corr.max()) if corr.size else 0.0
    var = var.reshape(H, W)
    if return_pairs:
        return var, max_corr, corr
    return var, max_corr


def _distance_sum(a, b, block=1024):
    """Sum of all pairwise distances and of the paired (i, i) distances."""
    total = 0.0
    for i in range(0, len(a), block):
        total += cdist(a[i:i + block], b).sum()
    k = min(len(a), len(b))
    paired = np.linalg.norm(a[:k] - b[:k], axis=1).sum()
    return total, paired


def energy_distance(a, b, unbiased=False):
    """Energy distance ``2 E|A-B| - E|A-A'| - E|B-B'|``.

    The default V-statistic is the energy distance between the two empirical
    measures: nonnegative, symmetric and exactly 0 for identical multisets.
    ``unbiased=True`` drops self-pairs from the within-sample terms (and, for
    equal sizes, the paired cross terms), giving an unbiased U-statistic that
    can be slightly negative.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("sample sets must be nonempty")
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    m, n = len(a), len(b)
    s_ab, paired = _distance_sum(a, b)
    s_aa, _ = _distance_sum(a, a)
    s_bb, _ = _distance_sum(b, b)
    if not unbiased:
        return float(max(2 * s_ab / (m * n) - s_aa / m ** 2 - s_bb / n ** 2, 0.0))
    if m < 2 or n < 2:
        raise ValueError("unbiased estimator needs at least 2 samples per set")
    e_ab = (s_ab - paired) / (m * (m - 1)) if m == n else s_ab / (m * n)
    return float(2 * e_ab - s_aa / (m * (m - 1)) - s_bb / (n * (n - 1)))


def finite_diff_score_check(log_density_fn, score_fn, points, h=1e-5):
    """Max error between ``score_fn`` and central differences of ``log_density_fn``.

    Per point the error is ``max|fd - score| / max(1, max|score|)``; that is,
    relative for large scores and absolute for small ones.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    analytic = np.atleast_2d(score_fn(pts))
    fd = np.empty_like(pts)
    for j in range(pts.shape[1]):
        step = np.zeros(pts.shape[1])
        step[j] = h
        fd[:, j] = (log_density_fn(pts + step) - log_density_fn(pts - step)) / (2 * h)
    scale = np.maximum(1.0, np.abs(analytic).max(axis=1))
    return float(np.max(np.abs(fd - analytic).max(axis=1) / scale))


def out_of_band_spectral_distance(fields, reference, a, b, bins=16):
    """Mean absolute log ratio of two RAPSDs over bins outside ``[a, b]``."""
    s1 = rapsd(fields, bins)
    s2 = rapsd(reference, bins)
    sel = ((s1.centers < a) | (s1.centers > b)) & (s1.power > 0) & (s2.power > 0)
    return float(np.mean(np.abs(np.log(s1.power[sel]) - np.log(s2.power[sel]))))
