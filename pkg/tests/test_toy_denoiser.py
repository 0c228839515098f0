import numpy as np
import pytest

from sagd.analytic_models import GaussianMixture, gm_sample, optimal_eps_predictor, tilt_covariance
from sagd.diagnostics import band_energy
from sagd.diffusion_core import forward_sample, make_schedule
from sagd.errors import NonFiniteError
from sagd.spectral_ops import build_frequency_grid, identity_covariance, sample_shaped_noise, vector_stream
from sagd.toy_denoiser import (
    DenseNet,
    TrainConfig,
    corruption_sampler,
    gradient_check,
    loss_and_grads,
    mse_loss,
    noisy_batch,
    null_band_fraction,
    omission_covariance,
    omission_experiment,
    oracle_relative_error,
    shapes_dataset,
    silu,
    silu_grad,
    time_embedding,
    train_eps_predictor,
)


def probe(dim=2, n=16, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, dim)), rng.uniform(size=n), rng.standard_normal((n, dim))


# -- building blocks -------------------------------------------------------------------

def test_silu_derivative():
    z = np.linspace(-6, 6, 101)
    h = 1e-6
    np.testing.assert_allclose(silu_grad(z), (silu(z + h) - silu(z - h)) / (2 * h), atol=1e-8)


def test_time_embedding():
    emb = time_embedding([0.0, 0.5, 1.0], 8)
    assert emb.shape == (3, 8)
    np.testing.assert_array_equal(emb[0], [0, 0, 0, 0, 1, 1, 1, 1])
    with pytest.raises(ValueError):
        DenseNet(2, embed_dim=5)


def test_mse_loss_gradient():
    pred = np.array([[1.0, 2.0]])
    loss, grad = mse_loss(pred, np.zeros((1, 2)))
    assert loss == 2.5
    np.testing.assert_array_equal(grad, [[1.0, 2.0]])


def test_net_shapes():
    net = DenseNet(3, hidden=(8, 4), embed_dim=6)
    assert net.widths == [9, 8, 4, 3]
    assert net.n_params() == 9 * 8 + 8 + 8 * 4 + 4 + 4 * 3 + 3
    x = np.zeros((5, 3))
    assert net(x, np.full(5, 0.1)).shape == (5, 3)


# -- gradients -------------------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    dict(hidden=(32, 32), embed_dim=8),
    dict(hidden=(16,), embed_dim=4),
    dict(hidden=(24, 24, 24), embed_dim=16, seed=3),
    dict(hidden=(16, 16), embed_dim=8, activation="identity"),
])
def test_gradient_check_fresh_nets(kwargs):
    net = DenseNet(2, **kwargs)
    assert gradient_check(net, *probe()) < 1e-4


def test_gradient_check_image_sized_input():
    net = DenseNet(64, hidden=(32, 32), embed_dim=8)
    assert gradient_check(net, *probe(dim=64, n=8), n_params=300) < 1e-4


def test_gradient_check_restores_parameters():
    net = DenseNet(2, hidden=(8,), embed_dim=4)
    before = net.get_flat().copy()
    gradient_check(net, *probe())
    np.testing.assert_array_equal(net.get_flat(), before)


def test_single_layer_gradient_closed_form():
    net = DenseNet(2, hidden=(), embed_dim=4, activation="identity")
    x, t, target = probe()
    inputs = np.concatenate([x, time_embedding(t, 4)], axis=1)
    W, b = net.params[0]
    resid = inputs @ W + b - target
    _, grads = loss_and_grads(net, x, t, target)
    np.testing.assert_allclose(grads[0][0], 2 * inputs.T @ resid / resid.size, rtol=1e-12)
    np.testing.assert_allclose(grads[0][1], 2 * resid.sum(0) / resid.size, rtol=1e-12)


def test_zero_input_has_finite_gradients():
    net = DenseNet(2, hidden=(16, 16))
    _, grads = loss_and_grads(net, np.zeros((4, 2)), np.zeros(4), np.zeros((4, 2)))
    assert all(np.all(np.isfinite(g)) for pair in grads for g in pair)


# -- skip term and serialization -----------------------------------------------------------

def test_skip_term_and_predictor():
    sched = make_schedule()
    cov = tilt_covariance("tilt+")
    net = DenseNet(2, hidden=(8,), embed_dim=4, skip=True)
    x = np.random.default_rng(1).standard_normal((3, 2))
    expected = net(x, np.full(3, 0.5)) + sched.sigma_at(500) * cov.apply(x)
    np.testing.assert_allclose(net.predictor(sched, cov)(x, 500), expected, rtol=1e-14)
    with pytest.raises(ValueError):
        net.predictor(sched)
    assert DenseNet(2, skip=False).skip_term(x, 0.3, cov) is None


def test_state_dict_round_trip(tmp_path):
    net = DenseNet(2, hidden=(8, 8), seed=5)
    np.savez(tmp_path / "ckpt.npz", **net.state_dict())
    other = DenseNet(2, hidden=(8, 8), seed=6)
    with np.load(tmp_path / "ckpt.npz") as state:
        other.load_state_dict(state)
    np.testing.assert_array_equal(other.get_flat(), net.get_flat())
    with pytest.raises(ValueError):
        DenseNet(2, hidden=(4, 8)).load_state_dict(net.state_dict())


# -- training --------------------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [dict(steps=0), dict(batch_size=0), dict(lr=-1.0), dict(optimizer="lbfgs")])
def test_train_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_noisy_batch_law():
    sched = make_schedule()
    cov = tilt_covariance("tilt-")
    rng = np.random.default_rng(2)
    x_t, t, eps, x0 = noisy_batch(lambda n, r: np.zeros((n, 2)), sched, cov, 20000, rng)
    assert t.min() >= 1 and t.max() <= 1000
    np.testing.assert_allclose(np.cov(eps.T), cov.matrix(), atol=0.08)
    np.testing.assert_allclose(x_t, sched.sigma[t - 1][:, None] * eps)


@pytest.mark.parametrize("optimizer, lr", [("sgd", 2e-2), ("momentum", 1e-2), ("adam", 1e-3)])
def test_training_reduces_loss(optimizer, lr):
    gm = GaussianMixture([1.0], [[0.5, -0.3]], [[[1.0, 0.6], [0.6, 0.8]]])
    cfg = TrainConfig(steps=400, batch_size=128, lr=lr, optimizer=optimizer, hidden=(32, 32))
    result = train_eps_predictor(lambda n, rng: gm_sample(gm, n, rng=rng), make_schedule(), tilt_covariance("tilt+"), cfg)
    assert result.losses[-50:].mean() < 0.8 * result.losses[:50].mean()


def test_training_is_deterministic():
    cfg = TrainConfig(steps=30, batch_size=16, hidden=(8,))
    runs = [train_eps_predictor(lambda n, rng: rng.standard_normal((n, 2)), make_schedule(), identity_covariance(2), cfg)
            for _ in range(2)]
    np.testing.assert_array_equal(runs[0].losses, runs[1].losses)
    np.testing.assert_array_equal(runs[0].net.get_flat(), runs[1].net.get_flat())


def test_training_aborts_on_nonfinite_loss():
    cfg = TrainConfig(steps=5, batch_size=4, hidden=(4,))
    with pytest.raises(NonFiniteError) as info:
        train_eps_predictor(lambda n, rng: np.full((n, 2), np.nan), make_schedule(), identity_covariance(2), cfg)
    assert info.value.step == 0


@pytest.mark.slow
def test_zero_variance_data_matches_closed_form():
    sched = make_schedule()
    cov = tilt_covariance("tilt+")
    c = np.array([0.5, -0.3])
    cfg = TrainConfig(steps=6000, lr=3e-3, optimizer="adam", hidden=(64, 64))
    net = train_eps_predictor(lambda n, rng: np.tile(c, (n, 1)), sched, cov, cfg).net
    rng = vector_stream(1, stream=1)
    ts = rng.integers(1, sched.T + 1, size=1000)
    pred, opt = np.empty((1000, 2)), np.empty((1000, 2))
    for i, t in enumerate(ts):
        x_t, _ = forward_sample(c[None], int(t), sched, cov, rng=rng)
        pred[i] = net.predictor(sched)(x_t, int(t))[0]
        opt[i] = (x_t[0] - np.sqrt(sched.alpha_bar[t - 1]) * c) / sched.sigma[t - 1]
    assert np.linalg.norm(pred - opt) / np.linalg.norm(opt) < 0.05


@pytest.mark.slow
def test_trained_loss_approaches_oracle_loss():
    gm = GaussianMixture([1.0], [[0.5, -0.3]], [[[1.0, 0.6], [0.6, 0.8]]])
    sched = make_schedule()
    cov = tilt_covariance("tilt+")
    cfg = TrainConfig(steps=6000, lr=3e-3, optimizer="adam", hidden=(64, 64))
    net = train_eps_predictor(lambda n, rng: gm_sample(gm, n, rng=rng), sched, cov, cfg).net
    rng = np.random.default_rng(7)
    x_t, t, eps, _ = noisy_batch(lambda n, r: gm_sample(gm, n, rng=r), sched, cov, 4000, rng)
    predict = net.predictor(sched)
    learned = np.mean([np.sum((predict(x_t[i:i + 1], int(t[i]))[0] - eps[i]) ** 2) for i in range(len(t))])
    oracle = np.mean([np.sum((optimal_eps_predictor(gm, x_t[i:i + 1], int(t[i]), sched, cov)[0] - eps[i]) ** 2)
                      for i in range(len(t))])
    assert oracle <= learned < 1.1 * oracle
    agg, _ = oracle_relative_error(net, gm, sched, cov, n=500)
    assert agg < 0.1


# -- omission pieces --------------------------------------------------------------------

def test_shapes_dataset():
    rng = np.random.default_rng(3)
    x = shapes_dataset(8, rng)
    assert x.shape == (8, 1, 16, 16)
    assert set(np.unique(x)) <= {-1.0, 1.0}
    soft = shapes_dataset(8, np.random.default_rng(3), supersample=4)
    assert soft.min() >= -1 and soft.max() <= 1
    assert np.any((soft > -1) & (soft < 1))
    np.testing.assert_array_equal(shapes_dataset(2, np.random.default_rng(9)), shapes_dataset(2, np.random.default_rng(9)))


def test_corruption_only_touches_its_band():
    grid = build_frequency_grid(16, 16)
    clean = shapes_dataset(32, np.random.default_rng(4))
    dirty = corruption_sampler(lambda n, rng: clean, grid, (0.4, 0.5), 1.0)(32, np.random.default_rng(5))
    coeff_clean = np.fft.fft2(clean, norm="ortho")
    coeff_dirty = np.fft.fft2(dirty, norm="ortho")
    outside = (grid.norm_radius < 0.4) | (grid.norm_radius > 0.5)
    np.testing.assert_allclose(coeff_dirty[..., outside], coeff_clean[..., outside], atol=1e-12)
    assert band_energy(dirty, 0.4, 0.5) > band_energy(clean, 0.4, 0.5)


def test_omission_covariance_leaves_band_unsupported():
    grid = build_frequency_grid(16, 16)
    cov = omission_covariance(grid, (0.4, 0.5))
    # both keep-bands are closed, so the shells at exactly 0.4 and 0.5 stay supported
    inside = (grid.norm_radius > 0.4) & (grid.norm_radius < 0.5)
    np.testing.assert_array_equal(cov.support(), ~inside)
    assert null_band_fraction(sample_shaped_noise(cov, 16, seed=1), cov) < 1e-12
    assert null_band_fraction(np.random.default_rng(0).standard_normal((4, 16, 16)), cov) > 0.1


def test_omission_experiment_smoke():
    sched = make_schedule(T=100)
    cfg = TrainConfig(steps=20, batch_size=8, hidden=(16,), embed_dim=4, optimizer="adam", skip=True)
    report = omission_experiment(lambda n, rng: shapes_dataset(n, rng, size=8), (0.4, 0.5), sched, cfg,
                                 shape=(8, 8), n_samples=8, stride=25)
    assert report.sagd_null_score_max <= 1e-10
    assert report.sagd_samples.shape == (8, 1, 8, 8)
    names = [k for k, _ in report.rows()]
    assert "band" not in names and "sagd_samples" not in names
    assert all(np.isfinite(v) for _, v in report.rows())
