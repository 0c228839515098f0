"""Gaussian diffusion with frequency-shaped forward covariance.

Submodules:

- ``spectral_ops``: frequency grids, spectral weights, the shaped-noise
  operator and its covariance.
- ``diffusion_core``: schedules, forward sampling, score/epsilon conversion,
  DDIM and DDPM updates.
- ``analytic_models``: closed-form Gaussian mixtures used as oracles.
- ``flow_sim``: probability-flow ODE transport and reverse samplers.
- ``diagnostics``: radial spectra, band energies, energy distance.
- ``toy_denoiser``: a numpy MLP epsilon-predictor and the omission experiment.
- ``cli``, ``config``, ``tensorfile``, ``pgm``: command line and file formats.
"""

from .diffusion_core import DiffusionSchedule, VPSchedule, make_schedule
from .errors import (
    ConsistencyError,
    DegenerateCovarianceError,
    DegenerateDensityError,
    DegenerateWeightError,
    DivergenceError,
    NonFiniteError,
)
from .spectral_ops import (
    AnisotropicCovariance,
    FrequencyGrid,
    NoiseMode,
    SpectralWeight,
    band_pass_weight,
    build_frequency_grid,
    make_covariance,
    power_law_weight,
    sample_shaped_noise,
    two_band_weight,
)

__version__ = "0.1.0"
