"""Command-line front end: simulate, fit, forecast, report, bench list.

Every stage reads and writes plain files so runs are resumable:

    simulate  -> clean.csv, noisy.csv, manifest.json, recipe.json, spec.json
    fit       -> config.json, trace.csv, chain.csv (chain_<k>.csv per extra chain), summary.json, map.json, spec.json
    forecast  -> forecast_config.json, forecast.csv, forecast.json

Diagnostics go to stderr; stdout carries only requested output.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from . import __version__, kernels
from .benchmarks import RECIPES, generate, get_recipe
from .data import DataError, build_pairs, load_manifest, normalize, save_trajectory, write_manifest
from .dynamics import ModelSpec, physical_theta
from .forecast import map_estimate, posterior_forecast, write_forecast
from .posterior import HyperPriors
from .precondition import PreconditionConfig, PreconditionError, adam_minimize
from .sampler import HmcConfig, PosteriorSamples, hmc_run, run_chains

log = logging.getLogger("odehmc")


class CliError(Exception):
    pass


def _dump_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CliError(f"missing file: {path}") from None


def stage_seeds(seed: int, n: int = 2) -> list[int]:
    """Split one top-level seed into independent per-stage integer seeds."""
    return [int(s.generate_state(1, np.uint64)[0] >> np.uint64(1)) for s in np.random.SeedSequence(seed).spawn(n)]


# ---------------------------------------------------------------------------
# fit pipeline (also used by the acceptance suite)
# ---------------------------------------------------------------------------


@dataclass
class FitOutput:
    spec: ModelSpec
    sigma: np.ndarray
    pre: object
    samples: PosteriorSamples


def fit_dataset(spec: ModelSpec, dataset, pre_cfg: PreconditionConfig, hmc_cfg: HmcConfig,
                hyper: HyperPriors = HyperPriors()) -> FitOutput:
    spec = spec.with_state_scale(dataset.sigma)
    pre = adam_minimize(spec, dataset, pre_cfg)
    samples = hmc_run(spec, pre.params, dataset, hyper, hmc_cfg)
    return FitOutput(spec, dataset.sigma, pre, samples)


def fit_recipe(name: str, seed: int, **overrides) -> FitOutput:
    """Generate a recipe's data with ``seed`` and fit it with the recipe's settings."""
    recipe = get_recipe(name)
    _, noisy = generate(recipe, seed)
    ds, sigma = normalize(build_pairs(noisy, recipe.dt_target))
    pre_kw = dict(recipe.precondition, seed=stage_seeds(seed)[0])
    hmc_kw = dict(recipe.hmc, seed=stage_seeds(seed)[1])
    pre_kw.update(overrides.get("precondition", {}))
    hmc_kw.update(overrides.get("hmc", {}))
    return fit_dataset(recipe.fit_spec(sigma), ds, PreconditionConfig(**pre_kw), HmcConfig(**hmc_kw))


def _summary(spec: ModelSpec, samples: PosteriorSamples, sigma) -> dict:
    R = samples.retained()
    phys = physical_theta(spec, R[:, :-2], sigma)
    summ = samples.summary(np.column_stack([phys, R[:, -2:]]))
    summ["units"] = "dictionary coefficients and built-in parameters in physical units; closure weights raw"
    return summ


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    try:
        recipe = get_recipe(args.recipe)
    except KeyError as e:
        raise CliError(f"{e.args[0]}") from None
    over = {}
    if args.noise is not None:
        over["noise"] = args.noise
    if args.n_pairs is not None:
        over["n_pairs"] = args.n_pairs
    if args.dt_target is not None:
        over["dt_target"] = args.dt_target
    recipe = recipe.with_overrides(**over)
    os.makedirs(args.out, exist_ok=True)
    _dump_json(os.path.join(args.out, "recipe.json"), dict(recipe.to_dict(), seed=args.seed))
    clean, noisy = generate(recipe, args.seed)
    clean_path = os.path.join(args.out, "clean.csv")
    noisy_path = os.path.join(args.out, "noisy.csv")
    save_trajectory(clean, clean_path)
    save_trajectory(noisy, noisy_path)
    ds, sigma = normalize(build_pairs(noisy, recipe.dt_target))
    write_manifest(os.path.join(args.out, "manifest.json"), [noisy_path], recipe.dt_target, args.seed, sigma,
                   {"recipe": recipe.name, "n_pairs": ds.n})
    with open(os.path.join(args.out, "spec.json"), "w") as fh:
        fh.write(recipe.fit_spec(sigma).to_json())
    log.info("wrote %d observations to %s", clean.m, args.out)
    return 0


PRE_FLAGS = {f.name: f for f in fields(PreconditionConfig) if f.name != "seed"}
HMC_FLAGS = {f.name: f for f in fields(HmcConfig) if f.name != "seed"}


def _resolve(defaults: dict, args, prefix: str, names) -> dict:
    out = dict(defaults)
    for n in names:
        v = getattr(args, prefix + n)
        if v is not None:
            out[n] = v
    return out


def cmd_fit(args) -> int:
    ds, doc = load_manifest(args.manifest)
    recipe = get_recipe(doc["recipe"]) if doc.get("recipe") in RECIPES else None
    if args.spec is not None:
        with open(args.spec) as fh:
            spec = ModelSpec.from_json(fh.read())
    elif recipe is not None:
        spec = recipe.fit_spec(ds.sigma)
    else:
        raise CliError("--spec is required when the manifest does not name a recipe")
    spec = spec.with_state_scale(ds.sigma)
    pre_seed, hmc_seed = stage_seeds(args.seed)
    pre_kw = asdict(PreconditionConfig())
    hmc_kw = asdict(HmcConfig())
    if recipe is not None and not args.no_recipe_tuning:
        pre_kw.update(recipe.precondition)
        hmc_kw.update(recipe.hmc)
    pre_kw = _resolve(pre_kw, args, "pre_", PRE_FLAGS)
    hmc_kw = _resolve(hmc_kw, args, "", HMC_FLAGS)
    pre_kw["seed"], hmc_kw["seed"] = pre_seed, hmc_seed
    if args.keep_last is None and hmc_kw["keep_last"] > hmc_kw["total_steps"]:
        hmc_kw["keep_last"] = hmc_kw["total_steps"]
    try:
        pre_cfg, hmc_cfg = PreconditionConfig(**pre_kw), HmcConfig(**hmc_kw)
    except ValueError as e:
        raise CliError(str(e)) from None
    os.makedirs(args.out, exist_ok=True)
    config = {
        "version": __version__,
        "manifest": os.path.abspath(args.manifest),
        "spec": os.path.abspath(args.spec) if args.spec else None,
        "recipe": doc.get("recipe"),
        "seed": args.seed,
        "backend": kernels.BACKEND,
        "precondition": asdict(pre_cfg),
        "hmc": asdict(hmc_cfg),
        "hyper": asdict(HyperPriors()),
        "sigma": [float(s) for s in ds.sigma],
        "dt_target": ds.dt_target,
        "n_pairs": ds.n,
    }
    _dump_json(os.path.join(args.out, "config.json"), config)
    with open(os.path.join(args.out, "spec.json"), "w") as fh:
        fh.write(spec.to_json())
    try:
        pre = adam_minimize(spec, ds, pre_cfg)
    except PreconditionError as e:
        raise CliError(f"preconditioning failed: {e}") from None
    pre.write_trace(os.path.join(args.out, "trace.csv"))
    log.info("preconditioned: residual mse %.3g, log gamma %.3f", pre.residual_mse, pre.params.log_gamma)
    if hmc_cfg.chains > 1:
        chains = run_chains(spec, pre.params, ds, HyperPriors(), hmc_cfg)
    else:
        chains = [hmc_run(spec, pre.params, ds, HyperPriors(), hmc_cfg)]
    samples = chains[0]
    samples.to_csv(os.path.join(args.out, "chain.csv"))
    # extra chains are written alongside; summaries and the MAP use chain 0
    for k, extra in enumerate(chains[1:], start=1):
        extra.to_csv(os.path.join(args.out, f"chain_{k}.csv"))
    _dump_json(os.path.join(args.out, "summary.json"), _summary(spec, samples, ds.sigma))
    best = map_estimate(samples)
    names = spec.param_names()
    _dump_json(os.path.join(args.out, "map.json"), {
        "theta_physical": dict(zip(names, (float(v) for v in physical_theta(spec, best.theta, ds.sigma)))),
        "theta_normalized": [float(v) for v in best.theta],
        "log_lambda": best.log_lambda,
        "log_gamma": best.log_gamma,
    })
    log.info("hmc: acceptance %.3f, divergences %d", samples.acceptance_rate, samples.divergences)
    return 0


def _load_run(run_dir):
    config = _load_json(os.path.join(run_dir, "config.json"))
    with open(os.path.join(run_dir, "spec.json")) as fh:
        spec = ModelSpec.from_json(fh.read())
    chain_path = os.path.join(run_dir, "chain.csv")
    if not os.path.exists(chain_path):
        raise CliError(f"missing file: {chain_path}")
    samples = PosteriorSamples.from_csv(chain_path, HmcConfig(**config["hmc"]))
    return config, spec, samples


def cmd_forecast(args) -> int:
    config, spec, samples = _load_run(args.run)
    sigma = np.array(config["sigma"])
    try:
        x0 = np.array([float(v) for v in args.x0.split(",")])
    except ValueError:
        raise CliError("--x0 must be comma-separated numbers") from None
    if x0.shape != (spec.dim,):
        raise CliError(f"--x0 has {x0.size} values; the model has {spec.dim} states")
    if args.horizon < 0 or not args.dt > 0:
        raise CliError("--horizon must be >= 0 and --dt > 0")
    n = int(round(args.horizon / args.dt))
    times = np.linspace(0.0, args.horizon, n + 1) if n else np.array([0.0])
    out = args.out or args.run
    os.makedirs(out, exist_ok=True)
    _dump_json(os.path.join(out, "forecast_config.json"), {
        "run": os.path.abspath(args.run), "x0": list(x0), "horizon": args.horizon, "dt": args.dt,
        "n_samples": args.n_samples, "include_noise": args.include_noise, "seed": args.seed,
        "emit_members": args.emit_members, "dt_target": config.get("dt_target") or 0.01,
    })
    ens = posterior_forecast(spec, samples, x0, times, sigma, args.n_samples, args.include_noise, args.seed,
                             config.get("dt_target") or 0.01)
    write_forecast(ens, os.path.join(out, "forecast.csv"), os.path.join(out, "forecast.json"),
                   spec.var_names, args.emit_members)
    if ens.unreliable:
        log.warning("%d of %d ensemble members diverged; forecast flagged unreliable", ens.excluded, ens.n_requested)
    return 0


def render_report(summary: dict, map_doc: dict, fmt: str = "text", truth: Optional[dict] = None,
                  max_rows: int = 40) -> str:
    rows = []
    coords = summary["coordinates"]
    map_phys = map_doc.get("theta_physical", {})
    for name, st in list(coords.items())[:max_rows]:
        rows.append([name, map_phys.get(name, float("nan")), st["mean"], st["sd"], st["q1"], st["median"], st["q3"]]
                    + ([truth.get(name, float("nan"))] if truth else []))
    head = ["parameter", "MAP", "mean", "sd", "Q1", "median", "Q3"] + (["truth"] if truth else [])
    fmt_row = [rows_i[:1] + [f"{v:.4g}" for v in rows_i[1:]] for rows_i in rows]
    lines = [f"acceptance rate {summary['acceptance_rate']:.3f}, divergences {summary['divergences']}, "
             f"retained {summary['retained']} of {summary['total_steps']}", ""]
    if fmt == "markdown":
        lines.append("| " + " | ".join(head) + " |")
        lines.append("|" + "---|" * len(head))
        lines += ["| " + " | ".join(r) + " |" for r in fmt_row]
    else:
        widths = [max(len(str(x)) for x in col) for col in zip(head, *fmt_row)]
        lines.append("  ".join(h.ljust(w) for h, w in zip(head, widths)))
        lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in fmt_row]
    if len(coords) > max_rows:
        lines.append(f"... {len(coords) - max_rows} more coordinates in summary.json")
    return "\n".join(lines) + "\n"


def _truth_names(recipe_name: Optional[str], spec: ModelSpec) -> Optional[dict]:
    if recipe_name not in RECIPES:
        return None
    recipe = get_recipe(recipe_name)
    names = spec.param_names()
    tt = recipe.truth_theta(spec)
    return dict(zip(names, (float(v) for v in tt)))


def cmd_report(args) -> int:
    summary = _load_json(os.path.join(args.run, "summary.json"))
    map_doc = _load_json(os.path.join(args.run, "map.json"))
    config = _load_json(os.path.join(args.run, "config.json"))
    with open(os.path.join(args.run, "spec.json")) as fh:
        spec = ModelSpec.from_json(fh.read())
    sys.stdout.write(render_report(summary, map_doc, args.format, _truth_names(config.get("recipe"), spec)))
    return 0


def cmd_bench_list(args) -> int:
    for name, r in RECIPES.items():
        truth = ", ".join(f"{k}={v:g}" for k, v in r.truth.items())
        sys.stdout.write(f"{name}\n    {r.description}\n    system={r.system} x0={list(r.x0)} t_end={r.t_end:g} "
                         f"sampling={r.sampling} n_pairs={r.n_pairs} noise={r.noise:g} ({r.noise_kind}) "
                         f"dt_target={r.dt_target:g}\n    truth: {truth}\n")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="odehmc", description="Bayesian identification of ODE models with HMC.")
    p.add_argument("--version", action="version", version=f"odehmc {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")
    p.add_argument("--backend", choices=["compiled", "python"], help="force an integration backend")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate benchmark data")
    s.add_argument("recipe")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, help="override the recipe noise level")
    s.add_argument("--n-pairs", type=int)
    s.add_argument("--dt-target", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="precondition and sample the posterior")
    f.add_argument("--manifest", required=True)
    f.add_argument("--spec", help="model spec JSON (default: the manifest's recipe spec)")
    f.add_argument("--out", required=True)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--no-recipe-tuning", action="store_true",
                   help="ignore per-recipe tuning and use the module defaults")
    f.add_argument("--iterations", dest="pre_iterations", type=int)
    f.add_argument("--learning-rate", dest="pre_learning_rate", type=float)
    f.add_argument("--l1-weight", dest="pre_l1_weight", type=float)
    f.add_argument("--adam-beta1", dest="pre_beta1", type=float)
    f.add_argument("--adam-beta2", dest="pre_beta2", type=float)
    f.add_argument("--adam-eps", dest="pre_eps", type=float)
    f.add_argument("--step-size", type=float)
    f.add_argument("--leapfrog-steps", type=int)
    f.add_argument("--total-steps", type=int)
    f.add_argument("--keep-last", type=int)
    f.add_argument("--update-mode", choices=["joint", "gibbs"])
    f.add_argument("--chains", type=int)
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("forecast", help="posterior-predictive trajectories from a fit")
    c.add_argument("run", help="fit output directory")
    c.add_argument("--x0", required=True, help="comma-separated initial state, physical units")
    c.add_argument("--horizon", type=float, required=True)
    c.add_argument("--dt", type=float, default=0.01, help="output grid spacing")
    c.add_argument("--n-samples", type=int)
    c.add_argument("--include-noise", action="store_true")
    c.add_argument("--emit-members", action="store_true")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_forecast)

    r = sub.add_parser("report", help="render a fit summary")
    r.add_argument("run")
    r.add_argument("--format", choices=["text", "markdown"], default="text")
    r.set_defaults(func=cmd_report)

    b = sub.add_parser("bench", help="benchmark recipes")
    bsub = b.add_subparsers(dest="bench_command", required=True)
    bl = bsub.add_parser("list", help="print recipe ids and parameters")
    bl.set_defaults(func=cmd_bench_list)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    previous = kernels.BACKEND
    try:
        if args.backend:
            kernels.set_backend(args.backend)
        return args.func(args)
    except (CliError, DataError, KeyError, ValueError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        sys.stderr.write(f"odehmc: error: {msg}\n")
        return 2
    finally:
        kernels.set_backend(previous)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
