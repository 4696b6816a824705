"""Compare the compiled and pure-Python kernel backends.

Times the MCMC sweep kernel and a full EP run on the migration chain under
each available backend and checks that the outputs agree.

    python benchmarks/bench_kernels.py [--sides 2 3 4] [--repeats 3]
"""
import argparse
import time

import numpy as np

from gcgm import kernels
from gcgm.birdsim import GridConfig, build_chain_model, generate
from gcgm.cgm import sample_posterior_baseline
from gcgm.ep import EPOptions, run_ep
from gcgm.gaussian import build_moments, factorize
from gcgm.model import compute_marginals


def _best(fn, repeats):
    best, out = np.inf, None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_ep(side, repeats):
    ds = generate(GridConfig(side, 5, N=100 * side * side, seed=0))
    model = build_chain_model(ds.config)
    moments = build_moments(model, compute_marginals(model), ds.config.N)
    factored = factorize(moments, model)
    obs = ds.observations()
    rows = {}
    for name in kernels.backends():
        opts = EPOptions(backend=name)
        rows[name] = _best(lambda: run_ep(model, moments, obs, options=opts, factored=factored),
                           repeats)
    return rows


def bench_mcmc(side, repeats):
    ds = generate(GridConfig(side, 4, N=200, seed=1))
    model = build_chain_model(ds.config)
    obs = ds.observations()
    rows = {}
    for name in kernels.backends():
        rows[name] = _best(lambda: sample_posterior_baseline(
            model, obs, 200, burn_in=0, iters=50, seed=3, backend=name), repeats)
    return rows


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sides", type=int, nargs="+", default=[2, 4, 6, 8, 10])
    p.add_argument("--repeats", type=int, default=3)
    args = p.parse_args()
    names = list(kernels.backends())
    print(f"active backend: {kernels.BACKEND}; available: {', '.join(names)}")
    print(f"{'kernel':6} {'L':>4} " + " ".join(f"{n + ' [s]':>14}" for n in names)
          + f" {'speedup':>8} {'max |diff|':>11}")
    for side in args.sides:
        for label, fn in (("ep", bench_ep), ("mcmc", bench_mcmc)):
            if label == "mcmc" and side > 4:
                continue
            rows = fn(side, args.repeats)
            times = [rows[n][0] for n in names]
            if label == "ep":
                outs = [rows[n][1].full_means for n in names]
            else:
                outs = [rows[n][1].node_means for n in names]
            diff = max(float(np.abs(o - outs[0]).max()) for o in outs)
            speed = times[0] / times[-1] if len(times) > 1 else 1.0  # python / compiled
            print(f"{label:6} {side * side:>4} " + " ".join(f"{t:>14.5f}" for t in times)
                  + f" {speed:>8.2f} {diff:>11.2e}")


if __name__ == "__main__":
    main()
