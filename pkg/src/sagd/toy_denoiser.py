"""A small fully connected epsilon-predictor trained with shaped forward noise.

The network is plain numpy with hand-written backpropagation. Inputs are the
flattened noisy state concatenated with a sinusoidal embedding of ``t / T``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .analytic_models import gm_sample, optimal_eps_predictor
from .diagnostics import band_energy, out_of_band_spectral_distance
from .diffusion_core import DiffusionSchedule, forward_sample, score_from_eps
from .errors import NonFiniteError
from .flow_sim import reverse_sample
from .spectral_ops import (
    AnisotropicCovariance,
    band_pass_weight,
    build_frequency_grid,
    identity_covariance,
    make_covariance,
    sample_shaped_noise,
    two_band_weight,
    vector_stream,
)


def silu(z):
    return z / (1.0 + np.exp(-z))


def silu_grad(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


ACTIVATIONS = {
    "silu": (silu, silu_grad),
    "identity": (lambda z: z, lambda z: np.ones_like(z)),
}


def time_embedding(t_frac, size):
    """Sinusoidal features of ``t_frac`` in [0, 1], ``size`` must be even."""
    t_frac = np.asarray(t_frac, dtype=float).reshape(-1, 1)
    freqs = np.pi * np.geomspace(1.0, 100.0, size // 2)
    angles = t_frac * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class DenseNet:
    """MLP ``[x, emb(t/T)] -> hidden -> ... -> x_dim``.

    Parameters are stored as a list of ``(W, b)`` with ``W`` shaped
    ``(fan_in, fan_out)``. With ``skip=True`` the sampler-facing predictor
    adds the parameter-free term ``sigma_t * cov @ x_t`` (the optimal linear
    predictor for zero-mean, unit-variance data), so the MLP only learns the
    correction. This matters at large ``t``, where errors in the predicted
    noise are amplified by ``sigma_t / sqrt(alpha_bar_t)``.
    """

    def __init__(self, dim, hidden=(128, 128), embed_dim=16, activation="silu", seed=0, skip=False):
        if embed_dim % 2:
            raise ValueError("embed_dim must be even")
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.embed_dim = int(embed_dim)
        self.activation = activation
        self.skip = bool(skip)
        self._act, self._act_grad = ACTIVATIONS[activation]
        rng = vector_stream(seed, stream=0xD0)
        widths = [self.dim + self.embed_dim, *self.hidden, self.dim]
        self.params = []
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            gain = 0.5 if i == len(widths) - 2 else 1.0
            W = rng.standard_normal((n_in, n_out)) * gain / np.sqrt(n_in)
            self.params.append([W, np.zeros(n_out)])

    @property
    def widths(self):
        return [self.params[0][0].shape[0]] + [W.shape[1] for W, _ in self.params]

    def n_params(self):
        return sum(W.size + b.size for W, b in self.params)

    def forward(self, x, t_frac, base=None):
        """Returns ``(output, cache)``; ``base`` (same shape as ``x``) is added to the output."""
        x = np.asarray(x, dtype=float).reshape(len(x), -1)
        h = np.concatenate([x, time_embedding(t_frac, self.embed_dim) * np.ones((len(x), 1))], axis=1)
        cache = []
        for i, (W, b) in enumerate(self.params):
            z = h @ W + b
            cache.append((h, z))
            h = z if i == len(self.params) - 1 else self._act(z)
        if base is not None:
            h = h + np.reshape(base, h.shape)
        return h, cache

    def backward(self, cache, dout):
        grads = [None] * len(self.params)
        g = dout
        for i in reversed(range(len(self.params))):
            h_in, z = cache[i]
            if i != len(self.params) - 1:
                g = g * self._act_grad(z)
            W, _ = self.params[i]
            grads[i] = [h_in.T @ g, g.sum(axis=0)]
            g = g @ W.T
        return grads

    def __call__(self, x, t_frac, base=None):
        shape = np.shape(x)
        return self.forward(x, t_frac, base)[0].reshape(shape)

    def skip_term(self, x, sigma, cov):
        """``sigma * cov @ x`` per sample when the net uses a skip, else None."""
        if not self.skip:
            return None
        x = np.asarray(x, dtype=float)
        sigma = np.reshape(sigma, (-1,) + (1,) * (x.ndim - 1))
        return sigma * cov.apply(x)

    def predictor(self, sched, cov=None):
        """Adapter to the ``eps_predictor(x, t)`` signature used by samplers."""
        if self.skip and cov is None:
            raise ValueError("a skip-connected net needs the training covariance")

        def eps_hat(x, t):
            return self(x, np.full(len(x), t / sched.T), self.skip_term(x, sched.sigma_at(t), cov))

        return eps_hat

    def get_flat(self):
        return np.concatenate([p.ravel() for pair in self.params for p in pair])

    def set_flat(self, flat):
        i = 0
        for pair in self.params:
            for j, p in enumerate(pair):
                pair[j] = flat[i:i + p.size].reshape(p.shape).copy()
                i += p.size

    def state_dict(self):
        out = {}
        for i, (W, b) in enumerate(self.params):
            out[f"layer{i}.weight"] = W
            out[f"layer{i}.bias"] = b
        return out

    def load_state_dict(self, state):
        for i, pair in enumerate(self.params):
            for j, key in enumerate(("weight", "bias")):
                arr = np.asarray(state[f"layer{i}.{key}"], dtype=float)
                if arr.shape != pair[j].shape:
                    raise ValueError(f"layer{i}.{key}: expected {pair[j].shape}, got {arr.shape}")
                pair[j] = arr


def mse_loss(pred, target):
    """Per-coordinate mean squared error and its gradient w.r.t. ``pred``."""
    diff = pred - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def loss_and_grads(net: DenseNet, x, t_frac, target, base=None):
    pred, cache = net.forward(x, t_frac, base)
    loss, dout = mse_loss(pred, np.asarray(target, dtype=float).reshape(pred.shape))
    return loss, net.backward(cache, dout)


def gradient_check(net: DenseNet, x, t_frac, target, n_params=1000, h=1e-5, seed=0, floor=1e-8):
    """Largest relative error between backprop and central-difference gradients.

    Checks up to ``n_params`` randomly chosen parameters. The relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    _, grads = loss_and_grads(net, x, t_frac, target)
    analytic = np.concatenate([g.ravel() for pair in grads for g in pair])
    theta = net.get_flat()
    rng = vector_stream(seed, stream=0x6C)
    idx = rng.choice(theta.size, size=min(n_params, theta.size), replace=False)
    worst = 0.0
    try:
        for i in idx:
            orig = theta[i]
            theta[i] = orig + h
            net.set_flat(theta)
            up = loss_and_grads(net, x, t_frac, target)[0]
            theta[i] = orig - h
            net.set_flat(theta)
            down = loss_and_grads(net, x, t_frac, target)[0]
            theta[i] = orig
            numeric = (up - down) / (2 * h)
            err = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), floor)
            worst = max(worst, err)
    finally:
        net.set_flat(theta)
    return worst


@dataclass
class TrainConfig:
    steps: int = 20_000
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    optimizer: str = "momentum"
    momentum: float = 0.9
    adam_betas: tuple = (0.9, 0.999)
    embed_dim: int = 16
    hidden: tuple = (128, 128)
    skip: bool = False
    lr_final_frac: float = 0.05
    grad_clip: float = 10.0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("steps, batch_size and lr must be positive")
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        self.hidden = tuple(int(h) for h in self.hidden)

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    net: DenseNet
    losses: np.ndarray = field(repr=False)


def _noise_like(cov: AnisotropicCovariance, x0, rng):
    if cov.is_fourier:
        return sample_shaped_noise(cov, x0.shape[0], x0.shape[1], rng=rng)
    return cov.apply_sqrt(rng.standard_normal(x0.shape))


def noisy_batch(sample_x0, sched: DiffusionSchedule, cov, batch, rng):
    """Draw ``(x_t, t, eps_w, x0)`` with ``t`` uniform on ``1..T``."""
    x0 = np.asarray(sample_x0(batch, rng), dtype=float)
    t = rng.integers(1, sched.T + 1, size=batch)
    eps = _noise_like(cov, x0, rng)
    shape = (batch,) + (1,) * (x0.ndim - 1)
    abar = sched.alpha_bar[t - 1].reshape(shape)
    sigma = sched.sigma[t - 1].reshape(shape)
    return np.sqrt(abar) * x0 + sigma * eps, t, eps, x0


def train_eps_predictor(sample_x0, sched: DiffusionSchedule, cov, config: TrainConfig, net=None) -> TrainResult:
    """Minimize ``E |eps_w - eps_theta(x_t, t)|^2`` with ``t`` uniform.

    ``sample_x0(n, rng)`` returns ``n`` clean draws shaped ``(n, d)`` or
    ``(n, C, H, W)``. The learning rate follows a cosine decay down to
    ``lr * lr_final_frac``.
    """
    if config.batch_size < 1:
        raise ValueError("batch size must be positive")
    rng = vector_stream(config.seed, stream=0x7A)
    probe = np.asarray(sample_x0(1, rng))
    dim = int(np.prod(probe.shape[1:]))
    if net is None:
        net = DenseNet(dim, config.hidden, config.embed_dim, seed=config.seed, skip=config.skip)
    first = [[np.zeros_like(p) for p in pair] for pair in net.params]
    second = [[np.zeros_like(p) for p in pair] for pair in net.params]
    mu = config.momentum if config.optimizer == "momentum" else 0.0
    b1, b2 = config.adam_betas
    losses = np.empty(config.steps)
    for step in range(config.steps):
        x_t, t, eps, _ = noisy_batch(sample_x0, sched, cov, config.batch_size, rng)
        base = net.skip_term(x_t, sched.sigma[t - 1], cov)
        loss, grads = loss_and_grads(net, x_t, t / sched.T, eps, base)
        if not np.isfinite(loss):
            raise NonFiniteError(f"training loss became non-finite at step {step}", step=step)
        losses[step] = loss
        norm = np.sqrt(sum(np.sum(g * g) for pair in grads for g in pair))
        scale = min(1.0, config.grad_clip / norm) if norm > 0 else 1.0
        frac = step / max(config.steps - 1, 1)
        lr = config.lr * (config.lr_final_frac + (1 - config.lr_final_frac) * 0.5 * (1 + np.cos(np.pi * frac)))
        for pair, gpair, mpair, vpair in zip(net.params, grads, first, second):
            for j in range(2):
                g = scale * gpair[j]
                if config.optimizer == "adam":
                    mpair[j] = b1 * mpair[j] + (1 - b1) * g
                    vpair[j] = b2 * vpair[j] + (1 - b2) * g * g
                    m_hat = mpair[j] / (1 - b1 ** (step + 1))
                    v_hat = vpair[j] / (1 - b2 ** (step + 1))
                    pair[j] = pair[j] - lr * m_hat / (np.sqrt(v_hat) + 1e-8)
                else:
                    mpair[j] = mu * mpair[j] - lr * g
                    pair[j] = pair[j] + mpair[j]
    return TrainResult(net, losses)


def oracle_relative_error(net: DenseNet, gm, sched: DiffusionSchedule, cov, n=2000, seed=0):
    """Compare a trained predictor with the closed-form optimum on ``n`` test pairs.

    Test pairs ``(x_t, t)`` come from ``x0 ~ gm`` and ``t`` uniform on
    ``1..T``. Returns ``(aggregate, per_sample_mean)`` where ``aggregate`` is
    ``||pred - opt|| / ||opt||`` over the whole test set and
    ``per_sample_mean`` averages the per-pair ratios.
    """
    rng = vector_stream(seed, stream=0x7E)
    x0 = gm_sample(gm, n, rng=rng)
    ts = rng.integers(1, sched.T + 1, size=n)
    predict = net.predictor(sched, cov)
    pred = np.empty_like(x0)
    opt = np.empty_like(x0)
    for t in np.unique(ts):
        sel = ts == t
        x_t, _ = forward_sample(x0[sel], int(t), sched, cov, rng=rng)
        pred[sel] = predict(x_t, int(t))
        opt[sel] = optimal_eps_predictor(gm, x_t, int(t), sched, cov)
    aggregate = float(np.linalg.norm(pred - opt) / np.linalg.norm(opt))
    per_sample = np.linalg.norm(pred - opt, axis=1) / np.linalg.norm(opt, axis=1)
    return aggregate, float(per_sample.mean())


# -- selective omission -------------------------------------------------------

def shapes_dataset(n, rng, size=16, supersample=1, count=(2, 5), extent=(1.0, 3.5)):
    """Random disks and rectangles at +1 on a -1 background.

    Each image holds ``count[0]..count[1]`` shapes whose radius / half-sides
    are drawn from ``extent`` (pixels). With ``supersample > 1`` shapes are
    rendered on a finer grid and box-filtered, which softens the edges; the
    default keeps hard pixel edges so the fields carry energy up to the
    highest frequencies.
    """
    hi = size * supersample
    coords = (np.arange(hi) + 0.5) / supersample
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    lo, hi_r = extent
    out = np.empty((n, 1, size, size))
    for i in range(n):
        canvas = np.zeros((hi, hi))
        for _ in range(rng.integers(count[0], count[1] + 1)):
            cy, cx = rng.uniform(1, size - 1, size=2)
            if rng.random() < 0.5:
                radius = rng.uniform(lo, hi_r)
                shape = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
            else:
                hy, hx = rng.uniform(0.7 * lo, 0.9 * hi_r, size=2)
                shape = (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
            canvas[shape] = 1.0
        low = canvas.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
        out[i, 0] = 2.0 * low - 1.0
    return out


@dataclass
class OmissionReport:
    band: tuple
    clean_band_energy: float
    corrupted_band_energy: float
    baseline_band_energy: float
    sagd_band_energy: float
    baseline_oob_distance: float
    sagd_oob_distance: float
    sagd_null_score_max: float
    baseline_final_loss: float
    sagd_final_loss: float
    baseline_samples: np.ndarray = field(default=None, repr=False)
    sagd_samples: np.ndarray = field(default=None, repr=False)

    def rows(self):
        skip = ("band", "baseline_samples", "sagd_samples")
        return [(k, getattr(self, k)) for k in self.__dataclass_fields__ if k not in skip]


def corruption_sampler(clean_sampler, grid, band, gamma_c):
    corruption = make_covariance(band_pass_weight(grid, *band))

    def sample(n, rng):
        x = np.asarray(clean_sampler(n, rng), dtype=float)
        return x + gamma_c * sample_shaped_noise(corruption, n, x.shape[1], rng=rng)

    return sample


def omission_covariance(grid, band):
    """Two-band covariance that leaves ``band`` unsupported."""
    a_c, b_c = band
    return make_covariance(two_band_weight(grid, 1.0, (0.0, a_c), 1.0, (b_c, 1.0)))


def null_band_fraction(fields, cov: AnisotropicCovariance):
    """Largest Fourier magnitude outside ``range(cov)`` relative to the largest overall."""
    coeffs = np.abs(np.fft.fft2(fields, norm="ortho"))
    null = ~cov.support()
    top = coeffs.max()
    return float(coeffs[..., null].max() / top) if top > 0 and null.any() else 0.0


def omission_experiment(clean_sampler, corruption_band, sched: DiffusionSchedule, config: TrainConfig,
                        shape=(16, 16), gamma_c=1.0, n_samples=512, stride=10, seed=0) -> OmissionReport:
    """Train an isotropic baseline and a band-omitting model on corrupted data.

    ``clean_sampler(n, rng)`` returns ``(n, 1, H, W)`` clean fields. Data are
    corrupted as ``x + gamma_c * eps_[a_c, b_c]``. Both models sample with
    DDIM; the omitting model goes through the pseudo-inverse score.
    """
    grid = build_frequency_grid(*shape)
    corrupted = corruption_sampler(clean_sampler, grid, corruption_band, gamma_c)
    base_cov = identity_covariance(shape)
    sagd_cov = omission_covariance(grid, corruption_band)

    base = train_eps_predictor(corrupted, sched, base_cov, config)
    sagd = train_eps_predictor(corrupted, sched, sagd_cov, config)

    base_samples = reverse_sample(base.net.predictor(sched, base_cov), sched, base_cov, n_samples, stride, seed)
    sagd_samples = reverse_sample(sagd.net.predictor(sched, sagd_cov), sched, sagd_cov, n_samples, stride, seed)

    eval_rng = vector_stream(seed, stream=0xE7)
    clean = clean_sampler(n_samples, eval_rng)
    dirty = corrupted(n_samples, eval_rng)

    x_t, t, _, _ = noisy_batch(corrupted, sched, sagd_cov, 64, eval_rng)
    predict = sagd.net.predictor(sched, sagd_cov)
    eps_hat = np.stack([predict(x_t[i:i + 1], int(t[i]))[0] for i in range(len(t))])
    scores = np.stack([score_from_eps(eps_hat[i], int(t[i]), sched, sagd_cov) for i in range(len(t))])

    a, b = corruption_band
    tail = max(1, config.steps // 20)
    return OmissionReport(
        band=(a, b),
        clean_band_energy=band_energy(clean, a, b),
        corrupted_band_energy=band_energy(dirty, a, b),
        baseline_band_energy=band_energy(base_samples, a, b),
        sagd_band_energy=band_energy(sagd_samples, a, b),
        baseline_oob_distance=out_of_band_spectral_distance(base_samples, clean, a, b),
        sagd_oob_distance=out_of_band_spectral_distance(sagd_samples, clean, a, b),
        sagd_null_score_max=null_band_fraction(scores, sagd_cov),
        baseline_final_loss=float(base.losses[-tail:].mean()),
        sagd_final_loss=float(sagd.losses[-tail:].mean()),
        baseline_samples=base_samples,
        sagd_samples=sagd_samples,
    )
