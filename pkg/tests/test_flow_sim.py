import numpy as np
import pytest

from sagd.analytic_models import (
    HADAMARD_2,
    GaussianMixture,
    gm_sample,
    gm_smoothed_score,
    optimal_eps_predictor,
    three_mode_preset,
    tilt_covariance,
)
from sagd.diagnostics import energy_distance
from sagd.diffusion_core import VPSchedule, make_schedule
from sagd.errors import DivergenceError, NonFiniteError
from sagd.flow_sim import (
    ParticleEnsemble,
    integrate_flow,
    pf_ode_drift,
    reverse_sample,
    score_field_grid,
    timestep_sequence,
)
from sagd.spectral_ops import explicit_covariance, identity_covariance, sample_shaped_noise

VP = VPSchedule()


def smoothed_score_fn(gm, cov, sched=VP):
    return lambda x, t: gm_smoothed_score(gm, t, sched, cov, x)


# -- ensembles -------------------------------------------------------------------------

def test_ensemble_validation():
    ens = ParticleEnsemble(np.zeros((5, 2)), 0.3)
    assert (ens.N, ens.dim) == (5, 2)
    with pytest.raises(ValueError):
        ParticleEnsemble(np.array([[np.nan, 0.0]]))
    with pytest.raises(ValueError):
        ParticleEnsemble(np.zeros((1, 2)), time=1.5)


# -- drift ----------------------------------------------------------------------------

def test_drift_isotropic_reduces_to_standard_vp():
    gm = three_mode_preset()
    cov = identity_covariance(2)
    x = np.random.default_rng(0).standard_normal((7, 2))
    t = 0.4
    expected = -0.5 * VP.beta(t) * (x + gm_smoothed_score(gm, t, VP, cov, x))
    np.testing.assert_allclose(pf_ode_drift(x, t, smoothed_score_fn(gm, cov), cov, VP.beta), expected, rtol=1e-14)


def test_drift_vanishes_at_symmetric_fixed_point():
    cov = tilt_covariance("tilt+")
    gm = GaussianMixture([1.0], [[0.0, 0.0]], [cov.matrix()])
    drift = pf_ode_drift(np.zeros((1, 2)), 0.6, smoothed_score_fn(gm, cov), cov, VP.beta)
    np.testing.assert_array_equal(drift, 0.0)


def test_drift_hand_evaluation_diag_cov():
    # Single standard-normal component, Sigma = diag(4, 1): the smoothed law is
    # N(0, diag(abar + 4 s^2, abar + s^2)), so the drift decouples per axis.
    gm = GaussianMixture([1.0], [[0.0, 0.0]], [np.eye(2)])
    lam = np.array([4.0, 1.0])
    cov = explicit_covariance(np.eye(2), lam)
    x = np.array([[0.7, -1.3]])
    t = 0.35
    abar = np.exp(-(0.1 * t + 0.5 * 19.9 * t * t))
    s2 = 1.0 - abar
    beta = 0.1 + 19.9 * t
    hand = -0.5 * beta * (x - lam * x / (abar + lam * s2))
    got = pf_ode_drift(x, t, smoothed_score_fn(gm, cov), cov, VP.beta)
    np.testing.assert_allclose(got, hand, atol=1e-10, rtol=0)


def test_drift_nonfinite_score():
    cov = identity_covariance(2)
    with pytest.raises(NonFiniteError):
        pf_ode_drift(np.zeros((1, 2)), 0.5, lambda x, t: np.full_like(x, np.inf), cov, VP.beta)


# -- integration --------------------------------------------------------------------

def test_integrate_flow_shapes_and_times():
    gm = three_mode_preset()
    cov = identity_covariance(2)
    prior = ParticleEnsemble(sample_shaped_noise(cov, 64, seed=1))
    traj = integrate_flow(prior, smoothed_score_fn(gm, cov), cov, VP.beta, steps=40, snapshots=5)
    assert traj.snapshots.shape == (5, 64, 2)
    assert traj.times[0] == 1.0 and traj.times[-1] == pytest.approx(1e-3)
    assert np.all(np.diff(traj.times) < 0)
    np.testing.assert_array_equal(traj.snapshots[0], prior.states)
    assert traj.ensemble(2).time == pytest.approx(traj.times[2])


@pytest.mark.parametrize("kwargs", [dict(integrator="rk4"), dict(snapshots=1), dict(steps=3, snapshots=5),
                                    dict(t_min=0.0)])
def test_integrate_flow_rejects_bad_arguments(kwargs):
    cov = identity_covariance(2)
    args = dict(steps=10, snapshots=2)
    args.update(kwargs)
    with pytest.raises(ValueError):
        integrate_flow(np.zeros((2, 2)), lambda x, t: -x, cov, VP.beta, **args)


def test_identity_target_preserves_prior():
    # data ~ N(0, I) with isotropic noise is stationary under the VP flow
    cov = identity_covariance(2)
    gm = GaussianMixture([1.0], [[0.0, 0.0]], [np.eye(2)])
    prior = sample_shaped_noise(cov, 2048, seed=2)
    traj = integrate_flow(prior, smoothed_score_fn(gm, cov), cov, VP.beta, steps=100, snapshots=2)
    assert energy_distance(traj.terminal, sample_shaped_noise(cov, 2048, seed=3)) < 0.02


def test_flow_is_deterministic():
    gm = three_mode_preset()
    cov = tilt_covariance("tilt-")
    prior = sample_shaped_noise(cov, 128, seed=4)
    a = integrate_flow(prior, smoothed_score_fn(gm, cov), cov, VP.beta, steps=50)
    b = integrate_flow(prior, smoothed_score_fn(gm, cov), cov, VP.beta, steps=50)
    np.testing.assert_array_equal(a.snapshots, b.snapshots)


def test_heun_second_order():
    gm = three_mode_preset()
    cov = tilt_covariance("tilt+")
    prior = sample_shaped_noise(cov, 64, seed=5)
    score = smoothed_score_fn(gm, cov)

    def terminal(n):
        return integrate_flow(prior, score, cov, VP.beta, steps=n, snapshots=2, t_min=0.05).terminal

    ref = terminal(800)
    e1 = np.abs(terminal(100) - ref).max()
    e2 = np.abs(terminal(200) - ref).max()
    assert 3.0 < e1 / e2 < 5.0


def test_euler_first_order():
    gm = three_mode_preset()
    cov = identity_covariance(2)
    prior = sample_shaped_noise(cov, 64, seed=6)
    score = smoothed_score_fn(gm, cov)

    def terminal(n):
        return integrate_flow(prior, score, cov, VP.beta, steps=n, snapshots=2, integrator="euler",
                              t_min=0.05).terminal

    ref = integrate_flow(prior, score, cov, VP.beta, steps=1600, snapshots=2, t_min=0.05).terminal
    assert 1.6 < np.abs(terminal(200) - ref).max() / np.abs(terminal(400) - ref).max() < 2.4


def test_divergence_names_step():
    cov = identity_covariance(2)
    with pytest.raises(DivergenceError) as info:
        integrate_flow(np.ones((3, 2)), lambda x, t: -1e4 * x, cov, VP.beta, steps=50, snapshots=2)
    assert info.value.step is not None and 1 <= info.value.step <= 50


def test_tilted_flows_share_endpoint_but_not_path():
    gm = three_mode_preset()
    ends, mids = {}, {}
    for kind in ("iso", "tilt+"):
        cov = tilt_covariance(kind)
        traj = integrate_flow(sample_shaped_noise(cov, 1024, seed=7), smoothed_score_fn(gm, cov), cov,
                              VP.beta, steps=200)
        ends[kind], mids[kind] = traj.terminal, traj.snapshots[2]
    assert energy_distance(ends["iso"], ends["tilt+"]) < 0.03
    assert energy_distance(mids["iso"], mids["tilt+"]) > 0.03


# -- discrete samplers ------------------------------------------------------------------

def test_timestep_sequence():
    assert timestep_sequence(10, 3) == [10, 7, 4, 1, 0]
    assert timestep_sequence(4, 1) == [4, 3, 2, 1, 0]
    with pytest.raises(ValueError):
        timestep_sequence(10, 0)


def test_reverse_sample_rejects_unknown_mode():
    with pytest.raises(ValueError):
        reverse_sample(lambda x, t: x, make_schedule(), identity_covariance(2), 4, mode="sde")


def test_reverse_sample_nonfinite_predictor_names_step():
    with pytest.raises(NonFiniteError) as info:
        reverse_sample(lambda x, t: np.full_like(x, np.nan), make_schedule(), identity_covariance(2), 4)
    assert info.value.step == 1000


@pytest.mark.slow
def test_oracle_ddim_and_ddpm_reach_target():
    gm = three_mode_preset()
    sched = make_schedule()
    cov = tilt_covariance("tilt+")

    def oracle(x, t):
        return optimal_eps_predictor(gm, x, t, sched, cov)

    ref = gm_sample(gm, 4096, seed=8)
    ddim = reverse_sample(oracle, sched, cov, 4096, seed=9, mode="ddim")
    ddpm = reverse_sample(oracle, sched, cov, 4096, seed=10, mode="ddpm")
    assert energy_distance(ddim, ref) < 0.03
    assert energy_distance(ddpm, ref) < 0.03
    assert energy_distance(ddim, ddpm) < 0.03


def test_singular_sampling_stays_in_range():
    cov = explicit_covariance(HADAMARD_2, [1.0, 0.0])
    null = HADAMARD_2[:, 1]
    sched = make_schedule(T=50)
    rng = np.random.default_rng(11)

    def noisy_predictor(x, t):
        return rng.standard_normal(x.shape)

    x, x_init = reverse_sample(noisy_predictor, sched, cov, 256, stride=5, seed=12, return_init=True)
    assert np.abs(x_init @ null).max() <= 1e-12
    assert np.abs(x @ null).max() <= 1e-10


# -- score field ---------------------------------------------------------------------

def test_score_field_matches_pointwise_score():
    gm = three_mode_preset()
    cov = tilt_covariance("tilt-")
    pts, vec = score_field_grid(smoothed_score_fn(gm, cov), (-2, 2, -1, 1), (5, 3), 0.3)
    assert pts.shape == vec.shape == (3, 5, 2)
    np.testing.assert_allclose(vec.reshape(-1, 2), gm_smoothed_score(gm, 0.3, VP, cov, pts.reshape(-1, 2)))


def test_score_field_single_cell():
    pts, vec = score_field_grid(lambda x, t: -x, (0, 2, 0, 4), 1, 0.5)
    assert pts.shape == (1, 1, 2)
    np.testing.assert_array_equal(vec[0, 0], [-1.0, -2.0])


def test_score_field_antisymmetric_for_symmetric_mixture():
    gm = GaussianMixture([0.5, 0.5], [[-1.5, 0.0], [1.5, 0.0]], [np.eye(2) * 0.3, np.eye(2) * 0.3])
    cov = identity_covariance(2)
    pts, vec = score_field_grid(smoothed_score_fn(gm, cov), (-2, 2, -2, 2), 9, 0.2)
    # mirror in x: the x-component flips sign, the y-component is unchanged
    np.testing.assert_allclose(vec[:, ::-1, 0], -vec[:, :, 0], atol=1e-12)
    np.testing.assert_allclose(vec[:, ::-1, 1], vec[:, :, 1], atol=1e-12)
