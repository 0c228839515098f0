"""Spectral weights, the shaped-noise operator and its covariance.

Fields are real arrays whose last two axes are ``(H, W)``. All transforms use
the unitary DFT, so a white field has unit variance in every Fourier bin and
shaped noise has variance ``|w(f)|**2`` in bin ``f``.

Low-dimensional toys use the same covariance type with an explicit
orthonormal basis; there the last axis of an array is the state dimension.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateCovarianceError, DegenerateWeightError

DEFAULT_FLOOR = 1e-10
DEFAULT_ZERO_TOL = 1e-12
STD_GUARD = 1e-8


class NoiseMode(str, enum.Enum):
    RAW = "raw"
    PER_SAMPLE_STD = "per_sample_std"
    ENERGY_CALIBRATED = "energy_calibrated"


@dataclass(frozen=True, eq=False)
class FrequencyGrid:
    """DFT frequencies of an ``H x W`` grid in cycles/pixel.

    ``fx``/``fy`` follow ``np.fft.fftfreq`` ordering, so the DC bin sits at
    index ``(0, 0)``. ``norm_radius`` is the radius divided by the largest
    radius on the grid (0 on a 1x1 grid).
    """

    height: int
    width: int
    fx: np.ndarray
    fy: np.ndarray
    radius: np.ndarray
    norm_radius: np.ndarray

    @property
    def shape(self):
        return (self.height, self.width)

    def same_as(self, other: "FrequencyGrid") -> bool:
        return self.shape == other.shape


def build_frequency_grid(height: int, width: int) -> FrequencyGrid:
    if int(height) != height or int(width) != width or height < 1 or width < 1:
        raise ValueError(f"grid dimensions must be positive integers, got {height}x{width}")
    height, width = int(height), int(width)
    fy = np.fft.fftfreq(height)
    fx = np.fft.fftfreq(width)
    radius = np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    r_max = radius.max()
    if r_max > 0:
        norm_radius = radius / r_max
    else:
        norm_radius = np.zeros_like(radius)
    return FrequencyGrid(height, width, fx, fy, radius, norm_radius)


@dataclass(frozen=True, eq=False)
class SpectralWeight:
    grid: FrequencyGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.grid.shape:
            raise ValueError(f"weight shape {values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError("spectral weights must be finite and nonnegative")
        object.__setattr__(self, "values", values)

    @property
    def power(self):
        """Per-bin variance ``|w|**2``."""
        return self.values ** 2


def power_law_weight(grid: FrequencyGrid, alpha: float, floor: float = DEFAULT_FLOOR) -> SpectralWeight:
    """Radial power law ``(r + floor) ** alpha``.

    The RAPSD of noise shaped this way has log-log slope ``2 * alpha``.
    """
    if not floor > 0:
        raise ValueError(f"floor must be positive, got {floor}")
    return SpectralWeight(grid, (grid.radius + floor) ** alpha)


def _check_band(a, b):
    if not (0.0 <= a <= 1.0 and 0.0 <= b <= 1.0):
        raise ValueError(f"band cutoffs must lie in [0, 1], got [{a}, {b}]")
    if a > b:
        raise ValueError(f"band lower cutoff {a} exceeds upper cutoff {b}")


def band_mask(grid: FrequencyGrid, a: float, b: float) -> np.ndarray:
    _check_band(a, b)
    d = grid.norm_radius
    return ((d >= a) & (d <= b)).astype(float)


def band_pass_weight(grid: FrequencyGrid, a: float, b: float) -> SpectralWeight:
    """Binary mask, 1 where ``a <= d(f) <= b`` (closed on both ends)."""
    return SpectralWeight(grid, band_mask(grid, a, b))


def two_band_weight(grid, gamma_l, band_l, gamma_h, band_h) -> SpectralWeight:
    """``gamma_l * M[band_l] + gamma_h * M[band_h]``.

    With ``band_l[1] < band_h[0]`` the gap between the bands gets weight 0,
    which makes the covariance rank deficient (selective omission).
    """
    if gamma_l < 0 or gamma_h < 0:
        raise ValueError("band gains must be nonnegative")
    values = gamma_l * band_mask(grid, *band_l) + gamma_h * band_mask(grid, *band_h)
    return SpectralWeight(grid, values)


def energy_calibration(weight: SpectralWeight) -> float:
    mean_power = float(np.mean(weight.power))
    if mean_power == 0.0:
        raise DegenerateWeightError("energy calibration undefined for an all-zero weight")
    return mean_power ** -0.5


@dataclass(frozen=True, eq=False)
class AnisotropicCovariance:
    """Covariance ``U diag(eigenvalues) U^T``.

    ``basis`` is either the string ``"fourier"`` (matrix-free, eigenvalues on
    an ``H x W`` grid) or an explicit ``(d, d)`` orthonormal matrix whose
    columns are eigenvectors.
    """

    basis: object
    eigenvalues: np.ndarray
    weight: SpectralWeight | None = field(default=None, repr=False)

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float)
        if not np.all(np.isfinite(lam)) or np.any(lam < 0):
            raise ValueError("covariance eigenvalues must be finite and nonnegative")
        object.__setattr__(self, "eigenvalues", lam)
        if isinstance(self.basis, str):
            if self.basis != "fourier":
                raise ValueError(f"unknown basis {self.basis!r}")
            if lam.ndim != 2:
                raise ValueError("fourier covariance needs an (H, W) eigenvalue grid")
        else:
            U = np.asarray(self.basis, dtype=float)
            if U.ndim != 2 or U.shape[0] != U.shape[1] or U.shape[0] != lam.size:
                raise ValueError("explicit basis must be (d, d) with d eigenvalues")
            if not np.allclose(U.T @ U, np.eye(U.shape[0]), atol=1e-10, rtol=0):
                raise ValueError("explicit basis is not orthonormal to 1e-10")
            object.__setattr__(self, "basis", U)
            object.__setattr__(self, "eigenvalues", lam.reshape(-1))

    @property
    def is_fourier(self) -> bool:
        return isinstance(self.basis, str)

    @property
    def dim(self) -> int:
        return int(self.eigenvalues.size)

    @property
    def shape(self):
        """Trailing shape of arrays this covariance acts on."""
        return self.eigenvalues.shape

    def _spectral(self, x, factor):
        x = np.asarray(x, dtype=float)
        if x.shape[-factor.ndim:] != factor.shape:
            raise ValueError(f"array trailing shape {x.shape[-factor.ndim:]} does not match covariance {factor.shape}")
        if self.is_fourier:
            coeffs = np.fft.fft2(x, norm="ortho") * factor
            return np.fft.ifft2(coeffs, norm="ortho").real
        U = self.basis
        return ((x @ U) * factor) @ U.T

    def apply(self, x):
        return self._spectral(x, self.eigenvalues)

    def apply_sqrt(self, x):
        """The shaping operator ``T_w`` (symmetric square root)."""
        return self._spectral(x, np.sqrt(self.eigenvalues))

    def threshold(self, zero_tol_rel=DEFAULT_ZERO_TOL):
        if zero_tol_rel < 0:
            raise ValueError("zero_tol_rel must be nonnegative")
        lam_max = self.eigenvalues.max()
        if lam_max <= 0:
            raise DegenerateCovarianceError("all covariance eigenvalues are zero")
        return zero_tol_rel * lam_max

    def support(self, zero_tol_rel=DEFAULT_ZERO_TOL):
        return self.eigenvalues > self.threshold(zero_tol_rel)

    def is_full_rank(self, zero_tol_rel=DEFAULT_ZERO_TOL) -> bool:
        return bool(np.all(self.support(zero_tol_rel)))

    def matrix(self):
        """Dense matrix. Only sensible for small dimensions."""
        if not self.is_fourier:
            return (self.basis * self.eigenvalues) @ self.basis.T
        H, W = self.shape
        eye = np.eye(H * W).reshape(H * W, H, W)
        return self.apply(eye).reshape(H * W, H * W).T


def make_covariance(weight: SpectralWeight) -> AnisotropicCovariance:
    return AnisotropicCovariance("fourier", weight.power, weight=weight)


def explicit_covariance(basis, eigenvalues) -> AnisotropicCovariance:
    return AnisotropicCovariance(np.asarray(basis, dtype=float), np.asarray(eigenvalues, dtype=float))


def identity_covariance(shape) -> AnisotropicCovariance:
    """Identity in the Fourier basis for ``(H, W)`` or explicit for ``d``."""
    if isinstance(shape, int):
        return explicit_covariance(np.eye(shape), np.ones(shape))
    grid = build_frequency_grid(*shape)
    return make_covariance(SpectralWeight(grid, np.ones(grid.shape)))


def apply_pinv(cov: AnisotropicCovariance, x, zero_tol_rel=DEFAULT_ZERO_TOL):
    keep = cov.support(zero_tol_rel)
    inv = np.zeros_like(cov.eigenvalues)
    inv[keep] = 1.0 / cov.eigenvalues[keep]
    return cov._spectral(x, inv)


def support_projector(cov: AnisotropicCovariance, zero_tol_rel=DEFAULT_ZERO_TOL) -> AnisotropicCovariance:
    """Orthogonal projector onto ``range(cov)``, as a covariance-shaped operator."""
    mask = cov.support(zero_tol_rel).astype(float)
    return AnisotropicCovariance(cov.basis, mask)


# -- sampling ---------------------------------------------------------------

def _field_stream(seed, stream, channel, index):
    # Counter-based: each (sample, channel) owns a disjoint Philox counter range.
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream) & 0xFFFFFFFFFFFFFFFF]
    return np.random.Generator(np.random.Philox(key=key, counter=[0, 0, int(channel), int(index)]))


def vector_stream(seed, stream=0):
    """One generator for a whole call on vector-valued toys."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream) & 0xFFFFFFFFFFFFFFFF]
    return np.random.Generator(np.random.Philox(key=key))


def white_fields(batch, channels, shape, seed, stream=0, offset=0):
    """Standard normal fields; sample ``offset + i`` depends only on
    ``(seed, stream, offset + i, channel)``."""
    out = np.empty((batch, channels) + tuple(shape))
    for i in range(batch):
        for c in range(channels):
            out[i, c] = _field_stream(seed, stream, c, offset + i).standard_normal(shape)
    return out


def sample_shaped_noise(cov: AnisotropicCovariance, batch: int, channels: int = 1, seed: int = 0,
                        mode=NoiseMode.RAW, *, stream: int = 0, offset: int = 0, rng=None):
    """Draw ``batch`` samples of ``N(0, cov)``.

    Fourier covariances return ``(batch, channels, H, W)`` fields, one
    independent draw per channel. Explicit covariances return ``(batch, d)``
    and ignore ``channels``. Passing ``rng`` draws from that generator
    instead of the counter-based per-sample streams.
    """
    if batch < 0 or channels < 1:
        raise ValueError("batch must be >= 0 and channels >= 1")
    mode = NoiseMode(mode)
    if mode is NoiseMode.ENERGY_CALIBRATED and cov.weight is None:
        raise ValueError("energy_calibrated mode needs a covariance built from a spectral weight")

    if cov.is_fourier:
        shape = cov.shape
        if rng is None:
            xi = white_fields(batch, channels, shape, seed, stream, offset)
        else:
            xi = rng.standard_normal((batch, channels) + shape)
        coeffs = np.fft.fft2(xi, norm="ortho") * np.sqrt(cov.eigenvalues)
        shaped = np.fft.ifft2(coeffs, norm="ortho")
        scale = np.abs(shaped.real).max() if shaped.size else 0.0
        if shaped.size and np.abs(shaped.imag).max() > 1e-6 * max(scale, 1.0):
            raise RuntimeError("shaped noise has a non-negligible imaginary part; weight is not Hermitian-symmetric")
        eps = shaped.real
        axes = (-2, -1)
    else:
        if rng is None:
            rng = vector_stream(seed, stream)
        eps = cov.apply_sqrt(rng.standard_normal((batch, cov.dim)))
        axes = (-1,)

    if mode is NoiseMode.PER_SAMPLE_STD:
        eps = eps / (eps.std(axis=axes, keepdims=True) + STD_GUARD)
    elif mode is NoiseMode.ENERGY_CALIBRATED:
        eps = eps * energy_calibration(cov.weight)
    return eps
