"""Command-line experiment runner.

Subcommands::

    ngvi run --config cfg.json
    ngvi sweep --config cfg.json --gammas 0.1,0.5,1 --threshold 120
    ngvi certify --config cfg.json
    ngvi replicate --figure poisson_instability --out results/

Configs are flat JSON objects with dotted keys; see ``DEFAULTS``. Exit codes:
0 success, 1 configuration error, 2 the run diverged.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .data import PIXEL_SCALE, filter_binary, load_csv, load_idx, mnist_paths, synth
from .diagnostics import (
    UnsupportedModelError,
    bfbe,
    certify_relative_smoothness,
    moduli,
    optimal_value,
    sufficient_constants,
)
from .geometry import DomainBox, StandardParams, project_box, to_expectation
from .models import STREAM_INIT, EstimatorConfig, LikelihoodModel, objective, rng_stream
from .optimizers import ALGORITHMS, StepSchedule, run

log = logging.getLogger("ngvi")

OUTPUT_DIR_ENV = "NGVI_OUTPUT_DIR"
TRACE_HEADER = ["t", "gamma", "elbo", "grad_norm", "bfbe", "elapsed_s"]
EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2
SWEEP_SEEDS = 5
FIGURES = ("poisson_instability", "poisson_projection", "stepsize_robustness")

DEFAULTS = {
    "model.kind": "poisson",
    "model.noise_variance": 1.0,
    "data.source": "synth",  # synth | csv | mnist
    "data.n": 1,
    "data.d": 1,
    "data.seed": 0,
    "data.path": None,
    "data.classes": [6, 8],
    "algorithm": "proj_sngd",
    "schedule.kind": "constant",
    "schedule.gamma": 0.1,
    "schedule.L": None,
    "schedule.V2": None,
    "schedule.lambda0": None,
    "schedule.mu_B": None,
    "T": 100,
    "seed": 0,
    "box.U": 4.0,
    "box.D": 25.0,
    "estimator.batch_size": None,  # None means exact gradients
    "estimator.mc_samples": 1,
    "init.mu": 0.0,
    "init.sigma2": 1.0,
    "init.mu_uniform": None,  # [lo, hi]: draw every initial mean uniformly, keyed by seed
    "proj_sgd.M": None,
    "grad_noise": 0.0,
    "log_every": 1,
    "bfbe.rho": None,
    "ell_star.compute": False,
    "ell_star.gamma": None,
    "sweep.algorithms": ["sngd", "proj_sngd"],
    "sweep.threshold_fraction": None,
    "timing": False,
    "output_dir": None,
}


class ConfigError(ValueError):
    pass


# --- config ------------------------------------------------------------------------


def resolve_config(raw: dict) -> dict:
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = dict(DEFAULTS)
    cfg.update(raw)
    if cfg["algorithm"] not in ALGORITHMS:
        raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {cfg['algorithm']!r}")
    if cfg["data.source"] not in ("synth", "csv", "mnist"):
        raise ConfigError(f"data.source must be synth, csv or mnist, got {cfg['data.source']!r}")
    if cfg["data.source"] == "csv" and not (cfg["data.path"] and Path(cfg["data.path"]).exists()):
        raise ConfigError(f"CSV file not found: {cfg['data.path']!r}")
    if int(cfg["T"]) < 0 or int(cfg["log_every"]) < 1:
        raise ConfigError("T must be nonnegative and log_every positive")
    if cfg["output_dir"] is None:
        cfg["output_dir"] = os.environ.get(OUTPUT_DIR_ENV, "ngvi_out")
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return resolve_config(raw)


def build_model(cfg: dict) -> LikelihoodModel:
    kind = cfg["model.kind"]
    source = cfg["data.source"]
    if source == "synth":
        synth_kind = "poisson_point" if kind == "poisson" else kind
        data = synth(synth_kind, int(cfg["data.n"]), int(cfg["data.d"]), int(cfg["data.seed"]))
    elif source == "csv":
        data = load_csv(cfg["data.path"])
    else:
        paths = mnist_paths(cfg["data.path"])
        if paths is None:
            raise ConfigError("MNIST files not found; set data.path or NGVI_MNIST_DIR")
        a, b = cfg["data.classes"]
        data = filter_binary(load_idx(*paths), int(a), int(b))
    try:
        return LikelihoodModel(kind, data, float(cfg["model.noise_variance"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_box(cfg: dict, d: int) -> DomainBox:
    return DomainBox(float(cfg["box.U"]), float(cfg["box.D"]), d)


def build_schedule(cfg: dict, gamma: float | None = None) -> StepSchedule:
    kind = cfg["schedule.kind"]
    T = int(cfg["T"])
    g = float(cfg["schedule.gamma"]) if gamma is None else gamma
    try:
        if kind == "constant":
            return StepSchedule.constant(g)
        if kind == "inv_sqrt":
            return StepSchedule.inv_sqrt(g)
        if kind == "theorem_constant":
            return StepSchedule.theorem_constant(cfg["schedule.L"], cfg["schedule.V2"], cfg["schedule.lambda0"], T)
        if kind == "fast_conv":
            return StepSchedule.fast_conv(cfg["schedule.L"], cfg["schedule.mu_B"], T)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad schedule parameters: {exc}") from exc
    raise ConfigError(f"unknown schedule kind {kind!r}")


def build_init(cfg: dict, d: int, seed: int) -> StandardParams:
    if cfg["init.mu_uniform"] is not None:
        lo, hi = cfg["init.mu_uniform"]
        mu = rng_stream(seed, 0, STREAM_INIT).uniform(lo, hi, size=d)
    else:
        mu = np.broadcast_to(np.asarray(cfg["init.mu"], dtype=float), (d,)).copy()
    s2 = np.broadcast_to(np.asarray(cfg["init.sigma2"], dtype=float), (d,)).copy()
    return StandardParams(mu, s2)


def build_estimator(cfg: dict, seed: int) -> EstimatorConfig | None:
    if cfg["estimator.batch_size"] is None:
        return None
    return EstimatorConfig(int(cfg["estimator.batch_size"]), int(cfg["estimator.mc_samples"]), seed)


# --- output helpers --------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def write_trace(path: Path, trace, timing: bool) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(TRACE_HEADER)
        for r in trace.records:
            wr.writerow([r.t, _fmt(r.gamma), _fmt(r.elbo), _fmt(r.grad_norm), _fmt(r.extras.get("bfbe")),
                         _fmt(r.elapsed) if timing else ""])
        if trace.diverged and trace.records[-1].t <= trace.divergence_t:
            t = trace.divergence_t
            wr.writerow([t + 1, _fmt(trace.gammas[t]), "inf", "", "", ""])


def read_trace_column(path: Path, column: str = "elbo") -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([int(r["t"]) for r in rows]), np.array([float(r[column]) for r in rows])


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _run_from_config(cfg: dict, model, box, gamma=None, seed=None, algorithm=None):
    seed = int(cfg["seed"]) if seed is None else seed
    algorithm = algorithm or cfg["algorithm"]
    init = build_init(cfg, model.d, seed)
    if algorithm == "proj_sngd":
        init = project_box(to_expectation(init), box)
    extra = None
    if cfg["bfbe.rho"] is not None:
        rho = float(cfg["bfbe.rho"])
        extra = lambda w: {"bfbe": bfbe(w, rho, model, box).value if box.contains(w) else None}  # noqa: E731
    return run(
        algorithm,
        model,
        init,
        build_schedule(cfg, gamma),
        int(cfg["T"]),
        seed=seed,
        box=box,
        estimator=build_estimator(cfg, seed),
        log_every=int(cfg["log_every"]),
        M=cfg["proj_sgd.M"],
        grad_noise=float(cfg["grad_noise"]),
        extra_metrics=extra,
    )


def _ell_star(cfg: dict, model, box) -> float:
    gamma = cfg["ell_star.gamma"]
    opt = optimal_value(model, box, gamma=None if gamma is None else float(gamma))
    if not opt.converged:
        log.warning("optimal value oracle stopped after %d steps with gradient mapping %.3g; "
                    "set ell_star.gamma to a larger step", opt.iterations, opt.step_norm)
    return opt.value


# --- commands ------------------------------------------------------------------------


def cmd_run(config_path) -> int:
    cfg = load_config(config_path)
    model = build_model(cfg)
    box = build_box(cfg, model.d)
    build_schedule(cfg)  # fail on bad schedule parameters before touching the output directory
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    trace = _run_from_config(cfg, model, box)
    meta = {
        "config": cfg,
        "version": __version__,
        "pixel_scale": 1 / PIXEL_SCALE,
        "n": model.n,
        "d": model.d,
        "diverged": trace.diverged,
        "divergence_t": trace.divergence_t,
        "sampled_index": trace.sampled_index,
        "final_objective": trace.records[-1].elbo,
        "wall_time_s": time.perf_counter() - start,
    }
    if cfg["ell_star.compute"]:
        meta["ell_star"] = _ell_star(cfg, model, box)
    write_trace(out / "trace.csv", trace, bool(cfg["timing"]))
    _write_json(out / "meta.json", meta)
    if trace.diverged:
        log.warning("run diverged at iteration %d", trace.divergence_t)
        return EXIT_DIVERGED
    return EXIT_OK


def iterations_to_threshold(trace, threshold: float) -> int:
    for r in trace.records:
        if r.elbo <= threshold:
            return int(r.t)
    return -1


def _sweep_job(args):
    cfg, algorithm, gamma, seed, threshold = args
    model = build_model(cfg)
    box = build_box(cfg, model.d)
    trace = _run_from_config(cfg, model, box, gamma=gamma, seed=seed, algorithm=algorithm)
    return algorithm, gamma, seed, iterations_to_threshold(trace, threshold)


def sweep_rows(cfg: dict, gammas, threshold: float, workers: int = 1) -> list:
    base = int(cfg["seed"])
    jobs = [
        (cfg, alg, float(g), base + k, threshold)
        for alg in cfg["sweep.algorithms"]
        for g in gammas
        for k in range(SWEEP_SEEDS)
    ]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_sweep_job, jobs))
    return [_sweep_job(j) for j in jobs]


def resolve_threshold(cfg: dict, model, box, threshold, fraction) -> dict:
    """Absolute threshold, or ``l* + fraction (l(w0) - l*)`` for a relative one."""
    if fraction is None:
        if threshold is None:
            raise ConfigError("sweep needs --threshold or --threshold-fraction")
        return {"threshold": float(threshold)}
    ell_star = _ell_star(cfg, model, box)
    w0 = project_box(to_expectation(build_init(cfg, model.d, int(cfg["seed"]))), box)
    ell0 = objective(w0, model)
    return {
        "threshold": ell_star + float(fraction) * (ell0 - ell_star),
        "threshold_fraction": float(fraction),
        "ell_star": ell_star,
        "ell_init": ell0,
    }


def cmd_sweep(config_path, gammas, threshold=None, threshold_fraction=None, workers: int = 1) -> int:
    cfg = load_config(config_path)
    model = build_model(cfg)
    box = build_box(cfg, model.d)
    if threshold_fraction is None:
        threshold_fraction = cfg["sweep.threshold_fraction"]
    info = resolve_threshold(cfg, model, box, threshold, threshold_fraction)
    rows = sweep_rows(cfg, gammas, info["threshold"], workers)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["algorithm", "gamma0", "seed", "iterations"])
        for alg, g, seed, it in rows:
            wr.writerow([alg, repr(g), seed, it])
    _write_json(out / "meta.json", {"config": cfg, "version": __version__, "gammas": list(gammas), **info})
    return EXIT_OK


def certificate_dict(cfg: dict, model, box) -> dict:
    cert = certify_relative_smoothness(model, box)
    mods = moduli(box)
    try:
        suff = sufficient_constants(model.kind, model.data, box, model.noise_variance)
        suff_d = {"L1": suff.L1 if np.isfinite(suff.L1) else None, "L2": suff.L2,
                  "beta_loglik": suff.beta, "heuristic": suff.heuristic}
    except UnsupportedModelError as exc:
        suff_d = {"unavailable": str(exc)}
    return {
        "model.kind": model.kind,
        "n": model.n,
        "d": model.d,
        "alpha": cert.alpha,
        "beta": cert.beta,
        "min_slack": cert.min_slack,
        "passed": cert.passed,
        "sampled": cert.sampled,
        "grid": {"points": int(cert.grid.shape[0]), "points_per_axis": 15, "U": box.U, "D": box.D},
        "iff_agreement": cert.iff_agreement,
        "warnings": cert.warnings,
        "sufficient": suff_d,
        "mu_C": mods.mu_C,
        "mu_H": mods.mu_H,
        "C_S": mods.C_S,
        "C_L": mods.C_L,
        "mu_B": mods.mu_B,
    }


def cmd_certify(config_path) -> int:
    cfg = load_config(config_path)
    model = build_model(cfg)
    box = build_box(cfg, model.d)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "certificate.json", certificate_dict(cfg, model, box))
    return EXIT_OK


# --- replication ------------------------------------------------------------------------

REPLICATE_RUNS = 10
REPLICATE_T = 100
REPLICATE_GAMMAS = (0.5, 0.3, 0.1)
REPLICATE_SIGMA2 = (2.0, 0.4)
REPLICATE_MU_RANGE = (-3.0, 0.0)


def quartile_summary(values: np.ndarray) -> np.ndarray:
    """Rows of (median, Q1, Q3) over runs for each iteration; ``values`` is (runs, T+1)."""
    return np.stack([np.median(values, axis=0), np.quantile(values, 0.25, axis=0),
                     np.quantile(values, 0.75, axis=0)], axis=1)


def _padded_objective(trace, T: int) -> np.ndarray:
    vals = np.full(T + 1, np.inf)
    obj = trace.objective
    vals[trace.t] = obj
    return vals


def replicate_group(out: Path, name: str, algorithm: str, sigma2: float, gamma: float, box=None,
                    seed: int = 0, T: int = REPLICATE_T) -> np.ndarray:
    model = LikelihoodModel("poisson", synth("poisson_point"))
    runs = []
    for k in range(REPLICATE_RUNS):
        mu0 = rng_stream(seed, k, STREAM_INIT).uniform(*REPLICATE_MU_RANGE)
        init = to_expectation(StandardParams([mu0], [sigma2]))
        if algorithm == "proj_sngd":
            init = project_box(init, box)
        trace = run(algorithm, model, init, StepSchedule.constant(gamma), T, seed=seed + k, box=box)
        write_trace(out / f"{name}_run{k}.csv", trace, timing=False)
        runs.append(_padded_objective(trace, T))
    values = np.array(runs)
    summary = quartile_summary(values)
    write_summary(out / f"{name}_summary.csv", summary)
    return values


def write_summary(path: Path, summary: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["t", "median", "q1", "q3"])
        for t, (med, q1, q3) in enumerate(summary):
            wr.writerow([t, repr(float(med)), repr(float(q1)), repr(float(q3))])


def cmd_replicate(figure: str, out_dir, seed: int = 0) -> int:
    if figure not in FIGURES:
        raise ConfigError(f"unknown figure {figure!r}; expected one of {FIGURES}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"figure": figure, "version": __version__, "runs": REPLICATE_RUNS, "T": REPLICATE_T, "seed": seed,
            "mu0_range": REPLICATE_MU_RANGE}
    box = DomainBox(4.0, 25.0, 1)
    if figure in ("poisson_instability", "poisson_projection"):
        model = LikelihoodModel("poisson", synth("poisson_point"))
        meta["ell_star"] = optimal_value(model, box, gamma=0.1).value
        groups = []
        if figure == "poisson_instability":
            for s2 in REPLICATE_SIGMA2:
                for g in REPLICATE_GAMMAS:
                    groups.append((f"sngd_sigma2_{s2}_gamma_{g}", "sngd", s2, g))
        else:
            for g in REPLICATE_GAMMAS:
                groups.append((f"sngd_sigma2_2.0_gamma_{g}", "sngd", 2.0, g))
                groups.append((f"proj_sngd_sigma2_2.0_gamma_{g}", "proj_sngd", 2.0, g))
            meta["box"] = {"U": box.U, "D": box.D}
        finals = {}
        for name, alg, s2, g in groups:
            values = replicate_group(out, name, alg, s2, g, box=box, seed=seed)
            finals[name] = float(np.median(values[:, -1]))
        meta["median_final_objective"] = finals
    else:
        cfg = resolve_config(stepsize_robustness_config(str(out)))
        model = build_model(cfg)
        box = build_box(cfg, model.d)
        info = resolve_threshold(cfg, model, box, None, cfg["sweep.threshold_fraction"])
        gammas = STEPSIZE_GAMMAS
        rows = sweep_rows(cfg, gammas, info["threshold"])
        with open(out / "sweep.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["algorithm", "gamma0", "seed", "iterations"])
            for alg, g, s, it in rows:
                wr.writerow([alg, repr(g), s, it])
        meta.update(info)
        meta["config"] = cfg
        meta["gammas"] = list(gammas)
    _write_json(out / "meta.json", meta)
    return EXIT_OK


STEPSIZE_GAMMAS = (0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0, 30.0)


def stepsize_robustness_config(output_dir: str) -> dict:
    """Desk-scale logistic sweep: n=200, d=5, minibatches with an inverse square-root schedule."""
    return {
        "model.kind": "logistic",
        "data.source": "synth",
        "data.n": 200,
        "data.d": 5,
        "data.seed": 0,
        "schedule.kind": "inv_sqrt",
        "T": 200,
        "box.U": 4.0,
        "box.D": 4.0,
        "estimator.batch_size": 50,
        "estimator.mc_samples": 10,
        "init.mu": 0.0,
        "init.sigma2": 1.0,
        "log_every": 1,
        "sweep.threshold_fraction": 0.1,
        "output_dir": output_dir,
    }


# --- entry point -------------------------------------------------------------------------


def _gamma_list(text: str) -> list:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad step-size list {text!r}") from exc
    if not vals or any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError("step sizes must be a nonempty list of positive numbers")
    return vals


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors; exit status 2 is reserved for divergence
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ngvi", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one optimizer and write trace.csv and meta.json")
    r.add_argument("--config", required=True)
    s = sub.add_parser("sweep", help="iterations-to-threshold over step sizes and seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--gammas", required=True, type=_gamma_list)
    s.add_argument("--threshold", type=float)
    s.add_argument("--threshold-fraction", type=float)
    s.add_argument("--workers", type=int, default=1)
    c = sub.add_parser("certify", help="relative smoothness certificate and moduli")
    c.add_argument("--config", required=True)
    rp = sub.add_parser("replicate", help="fixed replication protocols")
    rp.add_argument("--figure", required=True, help=f"one of {', '.join(FIGURES)}")
    rp.add_argument("--out", default=None)
    rp.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args.config)
        if args.command == "sweep":
            return cmd_sweep(args.config, args.gammas, args.threshold, args.threshold_fraction, args.workers)
        if args.command == "certify":
            return cmd_certify(args.config)
        out = args.out or os.environ.get(OUTPUT_DIR_ENV, "ngvi_out")
        return cmd_replicate(args.figure, out, args.seed)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
