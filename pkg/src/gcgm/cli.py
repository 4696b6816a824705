"""Command-line front end.

Exit codes: 0 success, 2 usage error, 3 numerical failure, 4 I/O error.

Every subcommand accepts ``--config FILE`` (a JSON object of option
values, optionally with a nested object per subcommand), ``--seed`` and
``--out-dir``.  Explicit flags override the config file, which overrides
the built-in defaults.  The resolved settings are embedded in every output.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
import warnings

import numpy as np

from . import __version__
from .errors import (
    DegenerateMarginal,
    DomainError,
    FormatError,
    NonFinite,
    NumericalOverflow,
    SingularBlock,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

DEFAULTS = {
    "common": {"seed": 0, "out_dir": "."},
    "simulate": {"side": 2, "horizon": 5, "N": 1000, "lam": 1.0, "w": [1.0, 2.0, 2.0, 2.0]},
    "infer": {"noise": None, "variance": 1.0, "lam": None},
    "oracle": {"noise": None, "variance": 1.0, "lam": None, "guard": 10**7},
    "mcmc": {"noise": None, "variance": 1.0, "lam": None, "burn_in": 1000, "iters": 10000,
             "batches": 20, "backend": None},
    "learn": {"init_w": [0.2, 0.4, 0.4, 0.4], "true_w": None, "max_em_iters": 50,
              "em_tol": 1e-4},
    "benchmark": {"L_list": [16, 36, 64, 100], "N_factor": 100, "horizon": 20, "repeats": 3,
                  "w": [1.0, 2.0, 2.0, 2.0], "lam": 1.0},
    "ep": {"max_sweeps": 50, "ep_tol": 1e-6, "damping": 1.0, "inner_max_iters": 200,
           "inner_tol": 1e-8},
}
EP_COMMANDS = ("infer", "learn", "benchmark")
INPUT_COMMANDS = ("infer", "oracle", "mcmc", "learn")


class UsageError(Exception):
    pass


def _floats(text):
    try:
        return [float(x) for x in str(text).replace(",", " ").split()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected numbers, got {text!r}") from exc


def _ints(text):
    try:
        return [int(x) for x in str(text).replace(",", " ").split()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from exc


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option values")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out-dir", dest="out_dir", default=None)

    ep = argparse.ArgumentParser(add_help=False)
    ep.add_argument("--max-sweeps", dest="max_sweeps", type=int, default=None)
    ep.add_argument("--ep-tol", dest="ep_tol", type=float, default=None)
    ep.add_argument("--damping", type=float, default=None)
    ep.add_argument("--inner-max-iters", dest="inner_max_iters", type=int, default=None)
    ep.add_argument("--inner-tol", dest="inner_tol", type=float, default=None,
                    help="inner gradient tolerance, relative to N")

    inputs = argparse.ArgumentParser(add_help=False)
    inputs.add_argument("--dataset", help="dataset file written by 'simulate'")
    inputs.add_argument("--model", help="JSON model file (with --observations and --N)")
    inputs.add_argument("--observations", help="columnar observation file")
    inputs.add_argument("--N", type=int, default=None, help="population size")

    noise = argparse.ArgumentParser(add_help=False)
    noise.add_argument("--noise", choices=["exact", "gaussian", "poisson"], default=None)
    noise.add_argument("--variance", type=float, default=None)
    noise.add_argument("--lam", type=float, default=None)

    p = argparse.ArgumentParser(prog="gcgm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a migration dataset")
    s.add_argument("--side", type=int, default=None)
    s.add_argument("--horizon", type=int, default=None)
    s.add_argument("--N", type=int, default=None)
    s.add_argument("--lam", type=float, default=None)
    s.add_argument("--w", type=_floats, default=None, help="four coefficients, comma separated")

    s = sub.add_parser("infer", parents=[common, inputs, noise, ep],
                       help="GCGM + EP posterior node and edge means")
    s.add_argument("--reference", help="estimates file to compare node means against")

    s = sub.add_parser("oracle", parents=[common, inputs, noise], help="exact posterior means")
    s.add_argument("--guard", type=int, default=None)

    s = sub.add_parser("mcmc", parents=[common, inputs, noise], help="MCMC posterior means")
    s.add_argument("--burn-in", dest="burn_in", type=int, default=None)
    s.add_argument("--iters", type=int, default=None)
    s.add_argument("--batches", type=int, default=None)
    s.add_argument("--backend", choices=["cython", "python"], default=None)

    s = sub.add_parser("learn", parents=[common, inputs, ep], help="EM estimate of w")
    s.add_argument("--init-w", dest="init_w", type=_floats, default=None)
    s.add_argument("--true-w", dest="true_w", type=_floats, default=None)
    s.add_argument("--max-em-iters", dest="max_em_iters", type=int, default=None)
    s.add_argument("--em-tol", dest="em_tol", type=float, default=None)

    s = sub.add_parser("benchmark", parents=[common, ep], help="timing sweep over L")
    s.add_argument("--L-list", dest="L_list", type=_ints, default=None)
    s.add_argument("--N-factor", dest="N_factor", type=int, default=None)
    s.add_argument("--horizon", type=int, default=None)
    s.add_argument("--repeats", type=int, default=None)
    return p


def resolve(args):
    """Merge defaults, config file and explicit flags (flags win)."""
    cmd = args.command
    cfg = dict(DEFAULTS["common"])
    cfg.update(DEFAULTS.get(cmd, {}))
    if cmd in EP_COMMANDS:
        cfg.update(DEFAULTS["ep"])
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            try:
                filecfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{args.config}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
        if not isinstance(filecfg, dict):
            raise FormatError(f"{args.config}: top level must be an object")
        section = filecfg.get(cmd, {})
        flat = {k: v for k, v in filecfg.items() if not isinstance(v, dict)}
        for src in (flat, section):
            for k, v in src.items():
                cfg[k.replace("-", "_")] = v
    for k, v in vars(args).items():
        if k in ("config", "command") or v is None:
            continue
        cfg[k] = v
    cfg["command"] = cmd
    return cfg


# helpers ------------------------------------------------------------------

def _ep_options(cfg):
    from .ep import EPOptions

    try:
        return EPOptions(max_sweeps=int(cfg["max_sweeps"]), tol=float(cfg["ep_tol"]),
                         damping=float(cfg["damping"]),
                         inner_max_iters=int(cfg["inner_max_iters"]),
                         inner_tol=float(cfg["inner_tol"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _noise(cfg, dataset):
    from .counts import NoiseModel

    kind = cfg.get("noise") or "poisson"
    if kind == "exact":
        return NoiseModel.exact()
    if kind == "gaussian":
        return NoiseModel.gaussian(float(cfg["variance"]))
    lam = cfg.get("lam")
    if lam is None:
        lam = dataset.config.lam if dataset is not None else 1.0
    return NoiseModel.poisson(float(lam))


def _load_problem(cfg):
    """(model, observations, N, dataset or None) from the resolved config."""
    from .birdsim import build_chain_model
    from .counts import ObservationSet
    from .io import read_dataset, read_model, read_observations

    if cfg.get("dataset"):
        ds = read_dataset(cfg["dataset"])
        model = build_chain_model(ds.config)
        noise = _noise(cfg, ds)
        return model, ObservationSet.full(ds.y, noise), int(ds.config.N), ds
    if cfg.get("model"):
        if not cfg.get("observations") or cfg.get("N") is None:
            raise UsageError("--model needs --observations and --N")
        model = read_model(cfg["model"])
        obs = read_observations(cfg["observations"], model.node_count, model.domain_size)
        if cfg.get("noise"):
            obs = ObservationSet(obs.y, obs.observed, _noise(cfg, None))
        return model, obs, int(cfg["N"]), None
    raise UsageError("an input is required: --dataset, or --model with --observations")


def _out(cfg, name):
    d = cfg.get("out_dir") or "."
    os.makedirs(d, exist_ok=True)
    return os.path.join(d, name)


def _public(cfg):
    return {k: v for k, v in sorted(cfg.items()) if k != "command"}


def _write_report(path, items):
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in items.items():
            if isinstance(v, (list, tuple)):
                v = " ".join(f"{x:.6g}" if isinstance(x, float) else str(x) for x in v)
            fh.write(f"{k}: {v}\n")


def relative_l1(estimate, reference):
    estimate = np.asarray(estimate, dtype=float)
    reference = np.asarray(reference, dtype=float)
    return float(np.abs(estimate - reference).sum() / np.abs(reference).sum())


def gcgm_inference(model, obs, N, options, edges=True):
    """Run the full pipeline; returns (node means, edge means, diagnostics, node seconds)."""
    from .ep import run_ep
    from .gaussian import build_moments, edge_posterior, factorize
    from .model import compute_marginals

    t0 = time.perf_counter()
    marg = compute_marginals(model)
    moments = build_moments(model, marg, N)
    factored = factorize(moments, model)
    post = run_ep(model, moments, obs, options=options, factored=factored)
    node_seconds = time.perf_counter() - t0
    edge_means = None
    if edges:
        edge_means = np.array([
            edge_posterior(moments, e, np.concatenate([post.means[u], post.means[v]]))
            for e, (u, v) in enumerate(model.edges)
        ])
    return np.asarray(post.full_means), edge_means, post.diagnostics, node_seconds


# subcommands --------------------------------------------------------------

def cmd_simulate(cfg):
    from .birdsim import GridConfig, generate
    from .io import write_dataset

    gc = GridConfig(int(cfg["side"]), int(cfg["horizon"]), tuple(cfg["w"]), float(cfg["lam"]),
                    int(cfg["N"]), int(cfg["seed"]))
    ds = generate(gc)
    path = _out(cfg, "dataset.csv")
    write_dataset(path, ds)
    print(f"wrote {path}")
    return ds


def cmd_infer(cfg):
    from .io import read_estimates, write_estimates

    model, obs, N, _ = _load_problem(cfg)
    options = _ep_options(cfg)
    nodes, edges, diag, node_seconds = gcgm_inference(model, obs, N, options)
    path = _out(cfg, "estimates.csv")
    write_estimates(path, "estimates", nodes, edges, config=_public(cfg), seed=cfg["seed"])
    report = {
        "noise": obs.noise.describe(),
        "sweeps": diag.get("sweeps"),
        "converged": diag.get("converged"),
        "clamped_cells": diag.get("clamped_cells", 0),
        "clipped_eigenvalues": diag.get("clips", 0),
        "line_search_failures": diag.get("line_search_failures", 0),
        "wall_time": f"{diag.get('wall_time', 0.0):.6f}",
        "node_seconds": f"{node_seconds:.6f}",
        "seed": cfg["seed"],
        "config": json.dumps(_public(cfg), sort_keys=True),
    }
    if not diag.get("converged", True):
        report["warning"] = "NotConverged"
    if cfg.get("reference"):
        _, ref = read_estimates(cfg["reference"])
        report["rel_l1_error"] = f"{relative_l1(nodes, ref['node_mean']):.10g}"
        if edges is not None and "edge_mean" in ref:
            report["rel_l1_error_edges"] = f"{relative_l1(edges, ref['edge_mean']):.10g}"
    _write_report(_out(cfg, "diagnostics.txt"), report)
    print(f"wrote {path}")
    for k in ("sweeps", "converged", "rel_l1_error", "warning"):
        if k in report:
            print(f"{k}: {report[k]}")
    return nodes, edges, report


def cmd_oracle(cfg):
    from .cgm import enumerate_posterior
    from .io import write_estimates

    model, obs, N, _ = _load_problem(cfg)
    post = enumerate_posterior(model, obs, N, guard=int(cfg["guard"]))
    path = _out(cfg, "oracle.csv")
    write_estimates(path, "oracle", post.node_means, post.edge_means, config=_public(cfg),
                    seed=cfg["seed"], diagnostics={"log_evidence": post.log_evidence})
    print(f"wrote {path}")
    return post


def cmd_mcmc(cfg):
    from .cgm import sample_posterior_baseline
    from .io import write_estimates

    model, obs, N, _ = _load_problem(cfg)
    res = sample_posterior_baseline(model, obs, N, burn_in=int(cfg["burn_in"]),
                                    iters=int(cfg["iters"]), seed=int(cfg["seed"]),
                                    n_batches=int(cfg["batches"]), backend=cfg.get("backend"))
    path = _out(cfg, "mcmc.csv")
    write_estimates(path, "mcmc", res.node_means, res.edge_means, config=_public(cfg),
                    seed=cfg["seed"], node_se=res.node_se, edge_se=res.edge_se,
                    diagnostics={"acceptance_rate": res.acceptance_rate})
    print(f"wrote {path}")
    return res


def cmd_learn(cfg):
    from .io import read_dataset, write_table
    from .learn import EMConfig, run_em

    if not cfg.get("dataset"):
        raise UsageError("learn needs --dataset")
    ds = read_dataset(cfg["dataset"])
    true_w = cfg.get("true_w")
    if true_w is None:
        true_w = list(ds.config.w)
    try:
        em = EMConfig(init_w=tuple(cfg["init_w"]), max_em_iters=int(cfg["max_em_iters"]),
                      tol=float(cfg["em_tol"]), ep=_ep_options(cfg), true_w=tuple(true_w))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    trace = run_em(ds, em)
    path = _out(cfg, "em_trace.csv")
    cols = ["iter", "w1", "w2", "w3", "w4", "rel_error", "objective", "seconds"]
    write_table(path, "em_trace", cols, list(trace.rows()), config=_public(cfg), seed=cfg["seed"])
    print(f"wrote {path}")
    print("final w: " + " ".join(f"{x:.6g}" for x in trace.final_w))
    if not math.isnan(trace.rel_error[-1]):
        print(f"rel_error: {trace.rel_error[-1]:.6g}")
    return trace


def run_benchmark(L_list, N_factor=100, horizon=20, repeats=3, seed=0, options=None,
                  w=(1.0, 2.0, 2.0, 2.0), lam=1.0):
    """Time node-only and node+edge inference for each grid size in ``L_list``.

    Each size gets one untimed warm-up run; the reported times are the best
    of ``repeats`` timed runs, taken round-robin across sizes.  The error
    column is the relative L1 distance of the node means from the simulated
    true counts.  Failures are recorded per row, not raised.
    """
    from .birdsim import GridConfig, build_chain_model, generate
    from .ep import EPOptions

    options = options or EPOptions()
    problems = []
    for L in L_list:
        side = int(round(math.sqrt(L)))
        if side * side != L or side < 2:
            raise UsageError(f"L={L} is not the square of an integer >= 2")
        N = int(N_factor) * L
        ds = generate(GridConfig(side, int(horizon), tuple(w), float(lam), N, int(seed)))
        obs = ds.observations()
        try:
            gcgm_inference(build_chain_model(ds.config), obs, N, options, edges=False)
        except (ArithmeticError, ValueError):
            pass  # the timed runs below record the failure
        problems.append({"L": L, "N": N, "ds": ds, "obs": obs, "node": math.inf,
                         "total": math.inf, "err": float("nan"), "sweeps": 0, "status": "ok"})
    # round-robin over sizes so a slow spell of the machine hits every size
    for _ in range(max(int(repeats), 1)):
        for pb in problems:
            try:
                t0 = time.perf_counter()
                model = build_chain_model(pb["ds"].config)
                nodes, _, diag, node_s = gcgm_inference(model, pb["obs"], pb["N"], options)
                total = time.perf_counter() - t0
                pb["total"] = min(pb["total"], total)
                pb["node"] = min(pb["node"], node_s)
                pb["err"] = relative_l1(nodes, pb["ds"].node_counts)
                pb["sweeps"] = diag.get("sweeps", 0)
            except (ArithmeticError, ValueError) as exc:
                pb["status"] = f"{type(exc).__name__}"
    return [(pb["L"], pb["N"], pb["node"], pb["total"], pb["err"], pb["sweeps"], pb["status"])
            for pb in problems]


def cmd_benchmark(cfg):
    from .io import write_table

    rows = run_benchmark(cfg["L_list"], cfg["N_factor"], cfg["horizon"], cfg["repeats"],
                         cfg["seed"], _ep_options(cfg), tuple(cfg["w"]), cfg["lam"])
    path = _out(cfg, "benchmark.csv")
    cols = ["L", "N", "node_seconds", "total_seconds", "rel_error", "sweeps", "status"]
    write_table(path, "benchmark", cols, rows, config=_public(cfg), seed=cfg["seed"])
    print(f"wrote {path}")
    for r in rows:
        print(f"L={r[0]} N={r[1]} node={r[2]:.4f}s total={r[3]:.4f}s err={r[4]:.4g} {r[6]}")
    return rows


COMMANDS = {
    "simulate": cmd_simulate,
    "infer": cmd_infer,
    "oracle": cmd_oracle,
    "mcmc": cmd_mcmc,
    "learn": cmd_learn,
    "benchmark": cmd_benchmark,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve(args)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"gcgm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"gcgm {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SingularBlock, NumericalOverflow, DomainError, NonFinite, DegenerateMarginal,
            ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"gcgm {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, TypeError, KeyError, RuntimeError) as exc:
        print(f"gcgm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
