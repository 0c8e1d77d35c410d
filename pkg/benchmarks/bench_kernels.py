"""Compare the compiled and pure-Python RK4 backends on every benchmark recipe.

Times one log-likelihood gradient (forward pass plus adjoint) over the full
training set and checks that both backends agree.

    python benchmarks/bench_kernels.py [--repeat 5] [--recipes a,b] [--json out.json]
"""
import argparse
import json
import sys
import time

import numpy as np

from odehmc import kernels
from odehmc.benchmarks import generate, get_recipe, list_recipes
from odehmc.data import build_pairs, normalize
from odehmc.precondition import PreconditionConfig, adam_minimize


def _time(fn, repeat):
    fn()  # warm up
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def bench(name, repeat):
    r = get_recipe(name)
    _, noisy = generate(r, 0)
    ds, sigma = normalize(build_pairs(noisy, r.dt_target))
    spec = r.fit_spec(sigma).with_state_scale(sigma)
    # a short Adam run gives a representative, non-trivial parameter vector
    theta = adam_minimize(spec, ds, PreconditionConfig(iterations=20, **{
        k: v for k, v in r.precondition.items() if k != "iterations"})).params.theta
    args = (spec, theta, ds.x_start, ds.x_end, ds.h, ds.n_steps)
    row = {"recipe": name, "pairs": ds.n, "substeps": int(ds.n_steps.sum()), "P": spec.P}
    results = {}
    for b in kernels.available_backends():
        kernels.set_backend(b)
        results[b] = kernels.sse_and_grad(*args)
        row[f"{b}_ms"] = 1e3 * _time(lambda: kernels.sse_and_grad(*args), repeat)
    if len(results) == 2:
        (sa, ga), (sb, gb) = results["compiled"], results["python"]
        row["speedup"] = row["python_ms"] / row["compiled_ms"]
        row["max_rel_diff"] = float(max(abs(sa - sb) / abs(sb),
                                        np.max(np.abs(ga - gb)) / max(np.max(np.abs(gb)), 1e-300)))
    return row


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--recipes", help="comma-separated recipe ids (default: all)")
    p.add_argument("--json", help="also write the rows as JSON")
    args = p.parse_args(argv)
    names = args.recipes.split(",") if args.recipes else list_recipes()
    previous = kernels.BACKEND
    try:
        rows = [bench(n, args.repeat) for n in names]
    finally:
        kernels.set_backend(previous)
    head = f"{'recipe':<24}{'pairs':>7}{'substeps':>10}{'P':>5}{'compiled ms':>13}{'python ms':>12}{'speedup':>9}{'rel diff':>11}"
    print(head)
    for r in rows:
        print(f"{r['recipe']:<24}{r['pairs']:>7}{r['substeps']:>10}{r['P']:>5}"
              f"{r.get('compiled_ms', float('nan')):>13.2f}{r['python_ms']:>12.2f}"
              f"{r.get('speedup', float('nan')):>9.1f}{r.get('max_rel_diff', float('nan')):>11.1e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
