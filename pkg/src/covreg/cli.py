"""Command-line interface.

Subcommands: simulate, fit, baseline, diagnose, predict, emit-series.
Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical error.
Every effective setting (including defaults) is echoed to the log and into
the run manifest; nothing is applied silently.
"""

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (
    fit_homoscedastic_gp_mean,
    fit_homoscedastic_latent_factor,
    mdw_sample_trajectories,
)
from .diagnostics import (
    conditional_predictive,
    frobenius_error,
    hpd_interval,
    predictive_kl_study,
    psrf,
)
from .errors import CovRegError, DataFormatError, NumericalError
from .gibbs import (
    INIT_DATA_DRIVEN,
    INIT_PRIOR,
    KAPPA_FIXED,
    KAPPA_GRID,
    KAPPA_HEURISTIC,
    ChainConfig,
    PosteriorArchive,
    kappa_heuristic,
    run_chain,
)
from .io import (
    RunManifest,
    load_archive,
    load_dataset,
    save_archive,
    save_dataset,
    sha256_of_file,
    write_series_csv,
)
from .kernels import KernelParams
from .model import (
    LATENT_MEAN,
    ZERO_MEAN,
    CovarianceTrajectory,
    Dataset,
    Hyperparameters,
    prior_generating_hyper,
    default_inference_hyper,
    simulate_from_prior_dataset,
    simulate_spline_covariance,
)
from .plots import plot_element_bands, plot_error_curves, plot_traces

log = logging.getLogger("covreg")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _read_config_file(path) -> dict:
    """Flat key=value config file; '#' starts a comment, blank lines ignored."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataFormatError(f"{path}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = val
    return out


def _apply_config(args, parser, config: dict):
    """Config values fill in only options the command line left at default."""
    defaults = {a.dest: a.default for a in parser._actions}
    for key, val in config.items():
        if not hasattr(args, key):
            raise DataFormatError(f"unknown config key {key!r}")
        if getattr(args, key) != defaults.get(key):
            continue  # explicit command-line value wins
        current = defaults.get(key)
        if isinstance(current, bool):
            setattr(args, key, val.lower() in ("1", "true", "yes", "on"))
        elif isinstance(current, int):
            setattr(args, key, int(val))
        elif isinstance(current, float):
            setattr(args, key, float(val))
        else:
            setattr(args, key, val)


def _echo_settings(args, keys):
    settings = {k: getattr(args, k) for k in keys}
    for k, v in sorted(settings.items()):
        log.info("setting %s = %r", k, v)
    return settings


def _load_truth(path) -> CovarianceTrajectory:
    with np.load(path) as npz:
        sigmas = npz["sigmas"]
        mus = npz["mus"] if "mus" in npz.files else None
    return CovarianceTrajectory(sigmas=sigmas, mus=mus)


def _save_truth(path, truth: CovarianceTrajectory):
    arrays = {"sigmas": truth.sigmas}
    if truth.mus is not None:
        arrays["mus"] = truth.mus
    np.savez_compressed(path, **arrays)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.preset == "gp-prior":
        data, truth = simulate_from_prior_dataset(rng, p=args.p)
    elif args.preset == "spline":
        truth = simulate_spline_covariance(rng, p=args.p, n=args.n)
        xs = np.arange(1, truth.n + 1, dtype=float)
        y = np.empty((truth.n, truth.p))
        from .kernels import chol_psd
        for i in range(truth.n):
            y[i] = chol_psd(truth.sigmas[i]) @ rng.standard_normal(truth.p)
        data = Dataset(xs=xs, y=y,
                       observed=np.ones((truth.n, truth.p), dtype=bool))
    else:
        raise DataFormatError(f"unknown preset {args.preset!r}")

    if args.missing > 0:
        from .diagnostics import biased_missingness_mask
        base = args.missing * 0.6
        spread = args.missing * 0.8
        mask = biased_missingness_mask(data.y, rng, base=base, spread=spread)
        data = Dataset(xs=data.xs, y=data.y, observed=mask)
        log.info("masked %.1f%% of entries", 100 * (1 - mask.mean()))

    save_dataset(args.out, data)
    log.info("wrote dataset %s (%d rows, %d responses)", args.out, data.n, data.p)
    if args.truth_out:
        _save_truth(args.truth_out, truth)
        log.info("wrote truth %s", args.truth_out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _run_one_chain(payload):
    config, hyper, data = payload
    return run_chain(config, hyper, data)


def _prepare_dataset(args, data: Dataset):
    scale = 1.0
    if args.scale == "max-var":
        var = np.nanvar(np.where(data.observed, data.y, np.nan), axis=0)
        scale = 1.0 / float(np.max(var))
        data = Dataset(xs=data.xs, y=data.y * np.sqrt(scale),
                       observed=data.observed)
        log.info("scaled responses by sqrt(%.6g) (max variance rule)", scale)
    if args.rescale_x:
        x = data.xs[:, 0]
        lo, hi = x.min(), x.max()
        span = hi - lo if hi > lo else 1.0
        xr = (x - lo) / span * (1.0 - 1.0 / data.n) + 1.0 / data.n
        data = Dataset(xs=xr, y=data.y, observed=data.observed)
        log.info("rescaled predictors to (0, 1]")
    return data, scale


def cmd_fit(args) -> int:
    if args.config:
        _apply_config(args, args.subparser, _read_config_file(args.config))
    keys = ["data", "iterations", "burn_in", "thin", "seed", "chains", "mode",
            "init", "kappa", "a1", "a2", "a_sigma", "b_sigma", "L", "k",
            "nugget", "impute", "scale", "rescale_x", "out"]
    settings = _echo_settings(args, keys)

    data = load_dataset(args.data)
    digest = sha256_of_file(args.data)
    data, scale = _prepare_dataset(args, data)

    if args.kappa == "heuristic":
        kappa_policy = KAPPA_HEURISTIC
        kappa_value = kappa_heuristic(data)
        log.info("kappa heuristic: %.4g (rounds to %g)", kappa_value,
                 round(kappa_value))
        kappa_policy = KAPPA_FIXED
        kappa_value = max(round(kappa_value), 1e-6)
    elif args.kappa.startswith("grid:"):
        kappa_policy = KAPPA_GRID
        grid = tuple(float(v) for v in args.kappa[5:].split(","))
        kappa_value = grid[0]
    else:
        kappa_policy = KAPPA_FIXED
        kappa_value = float(args.kappa)
        grid = ()
    if kappa_policy != KAPPA_GRID:
        grid = ()

    hyper = Hyperparameters(
        a1=args.a1, a2=args.a2, a_sigma=args.a_sigma, b_sigma=args.b_sigma,
        L_star=args.L, k_star=args.k,
        kernel=KernelParams(kappa=kappa_value, nugget=args.nugget),
    )

    configs = [
        ChainConfig(
            n_iterations=args.iterations, burn_in=args.burn_in, thin=args.thin,
            seed=args.seed + c, init=args.init, mode=args.mode,
            kappa_policy=kappa_policy, kappa_grid=grid, impute=args.impute,
        )
        for c in range(args.chains)
    ]
    if args.chains == 1:
        archives = [run_chain(configs[0], hyper, data)]
    else:
        with ProcessPoolExecutor(max_workers=args.chains) as pool:
            archives = list(pool.map(
                _run_one_chain, [(c, hyper, data) for c in configs]
            ))

    settings["response_scale"] = scale
    settings["kappa_effective"] = kappa_value
    for c, archive in enumerate(archives):
        out = args.out if args.chains == 1 else _chain_path(args.out, c)
        manifest = RunManifest(settings=settings, input_sha256=digest)
        save_archive(out, archive, manifest=manifest)
        log.info("wrote archive %s (%d kept draws, %.1fs)", out,
                 archive.n_draws, archive.manifest["wall_seconds"])
    return EXIT_OK


def _chain_path(out, c) -> str:
    p = Path(out)
    return str(p.with_name(f"{p.stem}.chain{c}{p.suffix}"))


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------

def cmd_baseline(args) -> int:
    keys = ["method", "data", "seed", "out"]
    data = load_dataset(args.data)
    digest = sha256_of_file(args.data)
    rng = np.random.default_rng(args.seed)

    if args.method == "mdw":
        beta = args.beta if args.beta is not None else 1.0 - 1.0 / args.h0
        log.info("matrix discounting: h0 = %g, beta = %g", args.h0, beta)
        keys += ["h0", "draws"]
        settings = _echo_settings(args, keys)
        settings["beta"] = beta
        sigmas = mdw_sample_trajectories(
            data.y, beta=beta, h0=args.h0, D0=np.eye(data.p) * args.h0,
            n_draws=args.draws, rng=rng,
        )
        archive = PosteriorArchive(
            sigmas=sigmas, mus=None, traces={},
            manifest={"model": "mdw", "beta": beta, "h0": args.h0,
                      "seed": args.seed},
        )
    else:
        keys += ["iterations", "burn_in", "thin", "kappa", "impute"]
        settings = _echo_settings(args, keys)
        config = ChainConfig(n_iterations=args.iterations, burn_in=args.burn_in,
                             thin=args.thin, seed=args.seed, impute=args.impute)
        if args.method == "homo-gp":
            archive = fit_homoscedastic_gp_mean(
                data, KernelParams(kappa=float(args.kappa)), config,
            )
        elif args.method == "homo-lf":
            hyper = default_inference_hyper(kappa=float(args.kappa))
            archive = fit_homoscedastic_latent_factor(data, hyper, config)
        else:
            raise DataFormatError(f"unknown baseline {args.method!r}")

    save_archive(args.out, archive,
                 manifest=RunManifest(settings=settings, input_sha256=digest))
    log.info("wrote archive %s (%d draws)", args.out, archive.n_draws)
    return EXIT_OK


# ---------------------------------------------------------------------------
# diagnose
# ---------------------------------------------------------------------------

def cmd_diagnose(args) -> int:
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    data = load_dataset(args.data)
    archives = {}
    for spec_str in args.archive:
        if "=" in spec_str:
            name, path = spec_str.split("=", 1)
        else:
            name, path = Path(spec_str).stem, spec_str
        archives[name] = load_archive(path)
    truth = _load_truth(args.truth) if args.truth else None

    report = {"tool_version": __version__, "archives": list(archives)}

    if truth is not None:
        errors = {}
        for name, archive in archives.items():
            est = archive.mean_trajectory()
            errors[name] = frobenius_error(est, truth).tolist()
        report["frobenius_mean"] = {
            name: float(np.mean(v)) for name, v in errors.items()
        }
        with open(outdir / "frobenius.csv", "w") as fh:
            fh.write("x," + ",".join(errors) + "\n")
            for t in range(data.n):
                fh.write(",".join(
                    [repr(float(data.xs[t, 0]))]
                    + [repr(errors[m][t]) for m in errors]) + "\n")
        plot_error_curves(outdir / "frobenius.png", data.xs,
                          {k: np.asarray(v) for k, v in errors.items()})
        log.info("frobenius means: %s", report["frobenius_mean"])

        if not data.observed.all():
            kls = predictive_kl_study(archives, data, truth)
            report["predictive_kl"] = kls
            log.info("predictive KL: %s", kls)

    psrf_report = {}
    for varname in ("sigma0", "delta"):
        series = [a.traces[varname] for a in archives.values()
                  if varname in a.traces]
        if len(series) >= 2:
            width = min(s.shape[1] for s in series)
            vals = [float(psrf(np.stack([s[:, c] for s in series])))
                    for c in range(width)]
            psrf_report[varname] = vals
    if psrf_report:
        report["psrf"] = psrf_report
        flat = [v for vals in psrf_report.values() for v in vals]
        log.info("PSRF: %d/%d traces below 1.2",
                 sum(v < 1.2 for v in flat), len(flat))

    first = next(iter(archives.values()))
    if first.traces:
        plot_traces(outdir / "traces.png", first.traces)

    hpd_rows = []
    m = first.sigmas.shape[0]
    if m >= 20:
        for i in range(min(first.sigmas.shape[2], 3)):
            mid = data.n // 2
            iv = hpd_interval(first.sigmas[:, mid, i, i], mass=0.95)
            hpd_rows.append({"element": f"{i + 1},{i + 1}", "x_index": mid,
                             "lower": iv.lower, "upper": iv.upper})
        report["hpd_examples"] = hpd_rows

    report_path = outdir / "report.json"
    report_path.write_text(json.dumps(report, indent=2))
    log.info("wrote %s", report_path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------

def cmd_predict(args) -> int:
    data = load_dataset(args.data)
    archive = load_archive(args.archive)
    traj = archive.mean_trajectory()
    i = args.row
    if not (0 <= i < data.n):
        raise DataFormatError(f"row {i} outside dataset of {data.n} rows")
    mu = traj.mus[i] if traj.mus is not None else np.zeros(data.p)
    pred = conditional_predictive(mu, traj.sigmas[i], data.y_masked()[i],
                                  data.observed[i])
    out = {
        "row": i,
        "x": data.xs[i].tolist(),
        "missing_components": (pred.index_map + 1).tolist(),
        "mean": pred.mean.tolist(),
        "covariance": pred.covariance.tolist(),
    }
    text = json.dumps(out, indent=2)
    if args.out:
        Path(args.out).write_text(text)
        log.info("wrote %s", args.out)
    else:
        print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# emit-series
# ---------------------------------------------------------------------------

def cmd_emit_series(args) -> int:
    data = load_dataset(args.data)
    archive = load_archive(args.archive)
    if archive.sigmas.shape[1] != data.n:
        raise DataFormatError("archive grid size does not match dataset")
    mean = archive.sigmas.mean(axis=0)
    lower = upper = None
    if archive.n_draws >= 20:
        n, p = data.n, data.p
        lower = np.empty((n, p, p))
        upper = np.empty((n, p, p))
        for t in range(n):
            for i in range(p):
                for j in range(i, p):
                    iv = hpd_interval(archive.sigmas[:, t, i, j], mass=args.mass)
                    lower[t, i, j] = lower[t, j, i] = iv.lower
                    upper[t, i, j] = upper[t, j, i] = iv.upper
    write_series_csv(args.out, mean, data.xs, lower=lower, upper=upper)
    log.info("wrote series %s", args.out)
    fig_path = str(Path(args.out).with_suffix(".png"))
    truth = _load_truth(args.truth).sigmas if args.truth else None
    plot_element_bands(fig_path, data.xs, mean, lower, upper, truth=truth)
    log.info("wrote figure %s", fig_path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="covreg",
        description="Covariance regression with GP dictionary functions.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--preset", choices=["gp-prior", "spline"], default="gp-prior")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--p", type=int, default=10)
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--missing", type=float, default=0.0,
                   help="target missing fraction (biased by row norm)")
    s.add_argument("--out", required=True)
    s.add_argument("--truth-out", default=None)

    f = sub.add_parser("fit", help="run the Gibbs sampler")
    f.add_argument("--data", required=True)
    f.add_argument("--config", default=None,
                   help="flat key=value file supplying defaults")
    f.add_argument("--iterations", type=int, default=5000)
    f.add_argument("--burn-in", type=int, default=2500)
    f.add_argument("--thin", type=int, default=10)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--chains", type=int, default=1)
    f.add_argument("--mode", choices=[ZERO_MEAN, LATENT_MEAN],
                   default=LATENT_MEAN)
    f.add_argument("--init", choices=[INIT_PRIOR, INIT_DATA_DRIVEN],
                   default=INIT_PRIOR)
    f.add_argument("--kappa", default="10",
                   help="number, 'heuristic', or 'grid:v1,v2,...'")
    f.add_argument("--a1", type=float, default=2.0)
    f.add_argument("--a2", type=float, default=2.0)
    f.add_argument("--a-sigma", type=float, default=1.0)
    f.add_argument("--b-sigma", type=float, default=0.1)
    f.add_argument("--L", type=int, default=10)
    f.add_argument("--k", type=int, default=10)
    f.add_argument("--nugget", type=float, default=1e-5)
    f.add_argument("--impute", action="store_true")
    f.add_argument("--scale", choices=["none", "max-var"], default="none")
    f.add_argument("--rescale-x", action="store_true")
    f.add_argument("--out", required=True)
    f.set_defaults(subparser=f)

    b = sub.add_parser("baseline", help="fit a comparison model")
    b.add_argument("method", choices=["mdw", "homo-gp", "homo-lf"])
    b.add_argument("--data", required=True)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--h0", type=float, default=40.0)
    b.add_argument("--beta", type=float, default=None)
    b.add_argument("--draws", type=int, default=100)
    b.add_argument("--iterations", type=int, default=2000)
    b.add_argument("--burn-in", type=int, default=1000)
    b.add_argument("--thin", type=int, default=5)
    b.add_argument("--kappa", default="10")
    b.add_argument("--impute", action="store_true")
    b.add_argument("--out", required=True)

    d = sub.add_parser("diagnose", help="summaries, KL study, PSRF, figures")
    d.add_argument("--data", required=True)
    d.add_argument("--archive", action="append", required=True,
                   help="name=path, repeatable")
    d.add_argument("--truth", default=None)
    d.add_argument("--outdir", required=True)

    p = sub.add_parser("predict", help="conditional predictive for one row")
    p.add_argument("--data", required=True)
    p.add_argument("--archive", required=True)
    p.add_argument("--row", type=int, required=True)
    p.add_argument("--out", default=None)

    e = sub.add_parser("emit-series", help="per-element curves with HPD bands")
    e.add_argument("--data", required=True)
    e.add_argument("--archive", required=True)
    e.add_argument("--truth", default=None)
    e.add_argument("--mass", type=float, default=0.95)
    e.add_argument("--out", required=True)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "fit":
            return cmd_fit(args)
        if args.command == "baseline":
            return cmd_baseline(args)
        if args.command == "diagnose":
            return cmd_diagnose(args)
        if args.command == "predict":
            return cmd_predict(args)
        if args.command == "emit-series":
            return cmd_emit_series(args)
        parser.error(f"unknown command {args.command!r}")
    except (DataFormatError, FileNotFoundError) as err:
        log.error("%s", err)
        return EXIT_DATA
    except NumericalError as err:
        log.error("numerical failure: %s", err)
        return EXIT_NUMERICAL
    except CovRegError as err:
        log.error("%s", err)
        return EXIT_DATA
    except ValueError as err:
        log.error("%s", err)
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
