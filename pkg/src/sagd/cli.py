"""Command-line entry point: ``sagd <command> [--config F] [--set k=v ...] [--out DIR] [--seed N]``.

Every run writes its fully resolved configuration to ``DIR/config.txt``;
passing that file back with ``--config`` reproduces the run. Exit status is
0 on success, 1 when a check fails or a run aborts, and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

import numpy as np

from . import analytic_models as am
from .config import ConfigError, RunConfig
from .diagnostics import band_energy, energy_distance, finite_diff_score_check, fit_loglog_slope, rapsd
from .diffusion_core import VPSchedule, make_schedule, score_from_eps
from .errors import NonFiniteError
from .flow_sim import ParticleEnsemble, integrate_flow, score_field_grid
from .pgm import read_pgm, to_unit_range
from .spectral_ops import (
    NoiseMode,
    band_pass_weight,
    build_frequency_grid,
    explicit_covariance,
    make_covariance,
    power_law_weight,
    sample_shaped_noise,
    support_projector,
    two_band_weight,
    vector_stream,
)
from .tensorfile import read_tensor, write_tensor
from .toy_denoiser import (
    TrainConfig,
    gradient_check,
    omission_experiment,
    oracle_relative_error,
    shapes_dataset,
    train_eps_predictor,
)

SCHEDULE = {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02}
TRAIN = {
    "steps": 20000, "batch_size": 256, "lr": 1e-3, "optimizer": "momentum", "momentum": 0.9,
    "embed_dim": 16, "hidden": (128, 128), "skip": False, "lr_final_frac": 0.05, "grad_clip": 10.0,
}

DEFAULTS = {
    "noise": {
        "operator": "plw", "alpha": 0.0, "floor": 1e-10, "a": 0.0, "b": 1.0,
        "gamma_l": 1.0, "band_l": (0.0, 0.3), "gamma_h": 1.0, "band_h": (0.6, 1.0),
        "height": 16, "width": 16, "n": 1000, "channels": 1, "mode": "raw",
        "bins": 32, "fit_band": (0.1, 0.8),
    },
    "rapsd": {"input": "", "bins": 32, "fit_band": (0.1, 0.8)},
    "flow": {
        "covs": ("iso", "tilt+", "tilt-"), "kappa": am.TILT_KAPPA, "n": 4096, "n_ref": 4096,
        "steps": 500, "snapshots": 5, "integrator": "heun", "t_min": 1e-3,
        "beta_min": 0.1, "beta_max": 20.0, "svg": False,
    },
    "score-check": {
        "cov": "iso", "kappa": am.TILT_KAPPA, "n_points": 100,
        "sigmas": (0.3, 0.1, 0.03, 0.01), **SCHEDULE,
    },
    "train-toy": {
        "cov": "tilt+", "kappa": am.TILT_KAPPA, "mean": (0.5, -0.3), "data_cov": (1.0, 0.6, 0.6, 0.8),
        "n_test": 2000, "tolerance": 0.05, **SCHEDULE, **TRAIN, "optimizer": "adam",
    },
    "omit": {
        "a_c": 0.4, "b_c": 0.5, "gamma_c": 1.0, "size": 16, "images": "", "n_samples": 512, "stride": 10,
        **SCHEDULE, **TRAIN,
        "steps": 4000, "batch_size": 128, "optimizer": "adam", "embed_dim": 32, "hidden": (512, 512), "skip": True,
    },
}
for _d in DEFAULTS.values():
    _d["seed"] = 0


# -- output helpers -------------------------------------------------------------

def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def write_svg_panels(path, panels, bounds, size=220):
    """One square panel per ``(title, points, arrows)``; ``arrows`` is ``(origins, vectors)`` or None."""
    xmin, xmax, ymin, ymax = bounds

    def to_px(p, k):
        u = (p[:, 0] - xmin) / (xmax - xmin) * size + k * (size + 10)
        v = (ymax - p[:, 1]) / (ymax - ymin) * size + 20
        return u, v

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{len(panels) * (size + 10)}" '
             f'height="{size + 30}" font-family="sans-serif" font-size="11">']
    for k, (title, pts, arrows) in enumerate(panels):
        x0 = k * (size + 10)
        parts.append(f'<rect x="{x0}" y="20" width="{size}" height="{size}" fill="none" stroke="#999"/>')
        parts.append(f'<text x="{x0 + 4}" y="14">{title}</text>')
        u, v = to_px(pts, k)
        inside = (u >= x0) & (u <= x0 + size) & (v >= 20) & (v <= 20 + size)
        parts.extend(f'<circle cx="{a:.1f}" cy="{b:.1f}" r="1" fill="#1f5fa8" fill-opacity="0.5"/>'
                     for a, b in zip(u[inside], v[inside]))
        if arrows is not None:
            origins, vecs = arrows
            norms = np.linalg.norm(vecs, axis=1)
            scale = 0.06 * (xmax - xmin) / max(norms.max(), 1e-12)
            ou, ov = to_px(origins, k)
            eu, ev = to_px(origins + scale * vecs, k)
            parts.extend(f'<line x1="{a:.1f}" y1="{b:.1f}" x2="{c:.1f}" y2="{d:.1f}" stroke="#c0392b"/>'
                         for a, b, c, d in zip(ou, ov, eu, ev))
    parts.append("</svg>\n")
    Path(path).write_text("\n".join(parts))


def _schedule(cfg):
    return make_schedule(cfg["T"], cfg["beta_start"], cfg["beta_end"])


def _train_config(cfg):
    return TrainConfig(steps=cfg["steps"], batch_size=cfg["batch_size"], lr=cfg["lr"], seed=cfg["seed"],
                       optimizer=cfg["optimizer"], momentum=cfg["momentum"], embed_dim=cfg["embed_dim"],
                       hidden=cfg["hidden"], skip=cfg["skip"], lr_final_frac=cfg["lr_final_frac"],
                       grad_clip=cfg["grad_clip"])


def _spectrum_outputs(out, fields, cfg, extra=()):
    spec = rapsd(fields, cfg["bins"])
    write_csv(out / "spectrum.csv", ["d", "power", "count"], zip(spec.centers, spec.power, spec.counts))
    try:
        slope, intercept = fit_loglog_slope(spec, *cfg["fit_band"])
    except ValueError:
        slope = intercept = math.nan
    rows = [("slope", slope), ("intercept", intercept), ("mean_square", band_energy(fields, 0.0, 1.0)), *extra]
    write_csv(out / "summary.csv", ["metric", "value"], rows)


# -- commands ---------------------------------------------------------------------

def cmd_noise(cfg, out):
    grid = build_frequency_grid(cfg["height"], cfg["width"])
    op = cfg["operator"]
    if op == "plw":
        weight = power_law_weight(grid, cfg["alpha"], cfg["floor"])
    elif op == "bpm":
        weight = band_pass_weight(grid, cfg["a"], cfg["b"])
    elif op == "two_band":
        weight = two_band_weight(grid, cfg["gamma_l"], cfg["band_l"], cfg["gamma_h"], cfg["band_h"])
    else:
        raise ConfigError(f"operator must be plw, bpm or two_band, got {op!r}")
    try:
        mode = NoiseMode(cfg["mode"])
    except ValueError:
        raise ConfigError(f"unknown noise mode {cfg['mode']!r}") from None
    cov = make_covariance(weight)
    fields = sample_shaped_noise(cov, cfg["n"], cfg["channels"], cfg["seed"], mode)
    write_tensor(out / "samples.sagdtf", fields)
    coeffs = np.fft.fft2(fields, norm="ortho")
    off = ~cov.support()
    off_energy = float(np.mean(np.sum(np.abs(coeffs[..., off]) ** 2, axis=-1)) / grid.radius.size)
    _spectrum_outputs(out, fields, cfg, [("out_of_support_energy", off_energy)])
    return 0


def cmd_rapsd(cfg, out):
    if not cfg["input"]:
        raise ConfigError("rapsd needs input=<tensor file>")
    try:
        fields = read_tensor(cfg["input"]).astype(float)
    except OSError as exc:
        raise ConfigError(f"cannot read {cfg['input']}: {exc.strerror}") from None
    _spectrum_outputs(out, fields, cfg)
    return 0


def cmd_flow(cfg, out):
    gm = am.three_mode_preset()
    vp = VPSchedule(cfg["beta_min"], cfg["beta_max"])
    ref = am.gm_sample(gm, cfg["n_ref"], seed=cfg["seed"] + 1)
    summary = []
    for name in cfg["covs"]:
        try:
            cov = am.tilt_covariance(name, cfg["kappa"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        prior = ParticleEnsemble(sample_shaped_noise(cov, cfg["n"], seed=cfg["seed"]))

        def score_fn(x, t, cov=cov):
            return am.gm_smoothed_score(gm, t, vp, cov, x)

        traj = integrate_flow(prior, score_fn, cov, vp.beta, cfg["steps"], cfg["snapshots"],
                              cfg["integrator"], cfg["t_min"])
        tag = name.replace("+", "p").replace("-", "m")
        S, N, d = traj.snapshots.shape
        rows = ((i, traj.times[i], j, *traj.snapshots[i, j]) for i in range(S) for j in range(N))
        write_csv(out / f"trajectory_{tag}.csv", ["snapshot_index", "t", "particle_id"] + [f"x_{k}" for k in range(d)], rows)
        summary.append((name, energy_distance(traj.terminal, ref)))
        if cfg["svg"]:
            panels = []
            for i in range(S):
                t = max(float(traj.times[i]), cfg["t_min"])
                pts, vecs = score_field_grid(score_fn, (-3, 3, -3, 3), 9, t)
                panels.append((f"{name} t={traj.times[i]:.3f}", traj.snapshots[i, :1024],
                               (pts.reshape(-1, 2), cov.apply(vecs.reshape(-1, 2)))))
            write_svg_panels(out / f"trajectory_{tag}.svg", panels, (-3, 3, -3, 3))
    write_csv(out / "summary.csv", ["cov", "terminal_energy_distance"], summary)
    return 0


def _rel_err(a, b):
    """Per-point ``|a - b| / max(1, |b|)``, maximized."""
    a = np.asarray(a).reshape(len(a), -1)
    b = np.asarray(b).reshape(len(b), -1)
    return float(np.max(np.linalg.norm(a - b, axis=1) / np.maximum(1.0, np.linalg.norm(b, axis=1))))


def score_check_rows(cfg):
    """Rows ``(check, measured, tolerance, status)`` for the identity checks."""
    name = cfg["cov"]
    if name == "singular":
        cov = explicit_covariance(am.HADAMARD_2, np.array([1.0, 0.0]))
    else:
        try:
            cov = am.tilt_covariance(name, cfg["kappa"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    full = cov.is_full_rank()
    gm = am.three_mode_preset()
    sched = _schedule(cfg)
    rng = vector_stream(cfg["seed"], stream=0x5C)
    n = cfg["n_points"]
    xs = rng.uniform(-3, 3, size=(n, 2))
    ts = rng.integers(1, sched.T + 1, size=n)
    rows = []

    def row(check, measured, tol, ok=None):
        status = "pass" if (measured <= tol if ok is None else ok) else "fail"
        rows.append((check, measured, tol, status))

    converted = np.stack([score_from_eps(am.optimal_eps_predictor(gm, x[None], int(t), sched, cov), int(t), sched, cov)[0]
                          for x, t in zip(xs, ts)])
    exact = np.stack([am.gm_smoothed_score(gm, int(t), sched, cov, x[None])[0] for x, t in zip(xs, ts)])
    if full:
        row("score_eps", _rel_err(converted, exact), 1e-6)
    else:
        proj = support_projector(cov)
        row("projected_score_eps", _rel_err(converted, proj.apply(exact)), 1e-6)

    if full:
        errs = []
        for x, t in zip(xs, ts):
            closed, tweedie = am.posterior_mean_at_level(gm, x[None], *sched.levels(int(t)), cov, check=False)
            errs.append(_rel_err(tweedie, closed))
        row("tweedie", max(errs), 1e-8)
    else:
        rows.append(("tweedie", math.nan, 1e-8, "skipped-degenerate"))

    fd = 0.0
    for t in np.unique(ts)[:10]:
        smoothed = am.gm_smoothed(gm, int(t), sched, cov)
        fd = max(fd, finite_diff_score_check(lambda p: am.gm_log_density(smoothed, p),
                                             lambda p: am.gm_score(smoothed, p), xs[:20]))
    row("finite_difference", fd, 1e-5)

    if full:
        grid = am.bulk_grid(gm)
        sweep = [am.small_noise_score_error(gm, cov, s, grid) for s in cfg["sigmas"]]
        for s, e in zip(cfg["sigmas"], sweep):
            rows.append((f"small_noise_sigma={s:g}", e, math.nan, "info"))
        row("small_noise_monotone", float(np.max(np.diff(sweep), initial=-np.inf)), 0.0,
            ok=bool(np.all(np.diff(sweep) < 0)))
        row("small_noise_final", sweep[-1], 1e-2)
    else:
        rows.append(("small_noise_final", math.nan, 1e-2, "skipped-degenerate"))
    return rows


def cmd_score_check(cfg, out):
    rows = score_check_rows(cfg)
    write_csv(out / "report.csv", ["check", "measured", "tolerance", "status"], rows)
    return 1 if any(r[3] == "fail" for r in rows) else 0


def cmd_train_toy(cfg, out):
    cov = am.tilt_covariance(cfg["cov"], cfg["kappa"])
    C = np.asarray(cfg["data_cov"], dtype=float).reshape(2, 2)
    gm = am.GaussianMixture(np.array([1.0]), np.asarray(cfg["mean"])[None], C[None])
    sched = _schedule(cfg)
    result = train_eps_predictor(lambda n, rng: am.gm_sample(gm, n, rng=rng), sched, cov, _train_config(cfg))
    np.savez(out / "checkpoint.npz", **result.net.state_dict())
    write_csv(out / "loss.csv", ["step", "loss"], enumerate(result.losses))
    rel, per_sample = oracle_relative_error(result.net, gm, sched, cov, cfg["n_test"], cfg["seed"])
    probe_rng = vector_stream(cfg["seed"], stream=0x9C)
    x = probe_rng.standard_normal((16, 2))
    grad = gradient_check(result.net, x, probe_rng.uniform(size=16), probe_rng.standard_normal((16, 2)),
                          seed=cfg["seed"])
    rows = [
        ("oracle_relative_error", rel, cfg["tolerance"], "pass" if rel < cfg["tolerance"] else "fail"),
        ("oracle_per_sample_error", per_sample, math.nan, "info"),
        ("gradient_check", grad, 1e-4, "pass" if grad < 1e-4 else "fail"),
        ("final_loss", float(result.losses[-max(1, len(result.losses) // 20):].mean()), math.nan, "info"),
    ]
    write_csv(out / "summary.csv", ["check", "measured", "tolerance", "status"], rows)
    return 1 if any(r[3] == "fail" for r in rows) else 0


def _image_sampler(path, size):
    p = Path(path)
    files = sorted(p.glob("*.pgm")) if p.is_dir() else [p]
    if not files:
        raise ConfigError(f"no .pgm files under {path}")
    try:
        images = np.stack([to_unit_range(read_pgm(f)) for f in files])
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load images from {path}: {exc}") from None
    if images.shape[1:] != (size, size):
        raise ConfigError(f"images must be {size}x{size}, got {images.shape[1]}x{images.shape[2]}")

    def sample(n, rng):
        return images[rng.integers(0, len(images), size=n)][:, None]

    return sample


def cmd_omit(cfg, out):
    size = cfg["size"]
    if cfg["images"]:
        clean = _image_sampler(cfg["images"], size)
    else:
        def clean(n, rng):
            return shapes_dataset(n, rng, size=size)
    report = omission_experiment(clean, (cfg["a_c"], cfg["b_c"]), _schedule(cfg), _train_config(cfg),
                                 shape=(size, size), gamma_c=cfg["gamma_c"], n_samples=cfg["n_samples"],
                                 stride=cfg["stride"], seed=cfg["seed"])
    rows = report.rows()
    write_csv(out / "report.csv", [k for k, _ in rows], [[v for _, v in rows]])
    write_tensor(out / "samples_baseline.sagdtf", report.baseline_samples)
    write_tensor(out / "samples_sagd.sagdtf", report.sagd_samples)
    return 0


COMMANDS = {
    "noise": cmd_noise,
    "rapsd": cmd_rapsd,
    "flow": cmd_flow,
    "score-check": cmd_score_check,
    "train-toy": cmd_train_toy,
    "omit": cmd_omit,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="sagd", description="Spectrally shaped Gaussian diffusion experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", help=f"output directory (default ./sagd-{name})")
        p.add_argument("--seed", type=int, help="overrides the seed key")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig(DEFAULTS[args.command])
    if args.config:
        cfg.update_from_file(args.config)
    cfg.apply_overrides(args.set)
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must fit in an unsigned 64-bit integer")
        cfg.set("seed", str(args.seed))
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        out = Path(args.out or f"sagd-{args.command}")
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "config.txt").write_text(cfg.to_text())
        except OSError as exc:
            raise ConfigError(f"cannot write to {out}: {exc.strerror}") from None
        return COMMANDS[args.command](cfg, out)
    except (RuntimeError, NonFiniteError) as exc:
        # divergence, non-finite training loss, failed consistency checks
        where = f" (step {exc.step})" if getattr(exc, "step", None) is not None else ""
        print(f"sagd: run aborted{where}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        # bad config values, unreadable inputs, unwritable outputs
        print(f"sagd: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
