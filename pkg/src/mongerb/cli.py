"""Command-line entry point: ``train``, ``solve`` and ``reproduce``.

Exit codes: 0 success, 1 numerical failure, 2 usage error.  Every output
file carries the resolved configuration as a JSON header comment, and a
sibling ``config.json`` is written next to the outputs.  ``MONGERB_THREADS``
caps the BLAS thread count.
"""

from __future__ import annotations

import os

_threads = os.environ.get("MONGERB_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import analytic_ot_1d as ot1d
from .entropic_ot import SinkhornConfig, SinkhornConvergenceError, entropic_monge_map, sinkhorn_solve
from .pde.fem import LinearSolveError
from .pde.problems import NewtonError
from .pod import write_spectrum
from .rom_pipeline import (
    ArtifactVersionError,
    FoldedMappingWarning,
    PipelineOptions,
    StageError,
    advection_error_series,
    draw_test_parameters,
    error_report,
    load_artifacts,
    offline_train,
    online_advance_advection,
    online_solve_poisson,
    plain_pod_artifacts,
    save_artifacts,
    tau_sweep,
    write_series,
    write_table,
)
from .tensor_grid import make_uniform_grid, write_field

log = logging.getLogger("mongerb")

EXIT_OK, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2

PROBLEMS = {
    "poisson-u2": dict(problem="poisson", density="u2"),
    "poisson-f": dict(problem="poisson", density="f"),
    "advection": dict(problem="advection", density="u", tau=1e-3),
    "advection-analytic": dict(problem="shift", density="u", tau=1e-3, n_s=11, debias=True, eim=False),
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument parsing


def _add_training_options(p: argparse.ArgumentParser, eim_flag: bool = True) -> None:
    p.add_argument("--eps", type=float, help="entropic regularization (default 1e-2)")
    p.add_argument("--tau", type=float, help="POD energy tolerance")
    p.add_argument("--tau-eim", type=float, help="EIM energy tolerance")
    p.add_argument("--floor", type=float, help="uniform density floor s in [0, 1)")
    p.add_argument("--n-s", type=int, help="number of Poisson training samples")
    p.add_argument("--pde-cells", type=int, help="cells per axis of the high-fidelity grid")
    p.add_argument("--ot-factor", type=int, help="transport grid refinement factor")
    p.add_argument("--seed", type=int, default=0, help="64-bit seed for all sampling (default 0)")
    p.add_argument("--debias", dest="debias", action="store_true", default=None,
                   help="use debiased potentials and barycenter")
    p.add_argument("--no-debias", dest="debias", action="store_false")
    if eim_flag:
        p.add_argument("--no-eim", dest="train_eim", action="store_false", default=True,
                       help="skip EIM training")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mongerb", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="run the offline stages and write an artifact directory")
    tr.add_argument("--problem", choices=sorted(PROBLEMS), default="poisson-u2")
    tr.add_argument("--out", required=True, help="artifact directory (its parent must exist)")
    _add_training_options(tr)

    so = sub.add_parser("solve", help="online solves against high fidelity")
    so.add_argument("--artifacts", required=True)
    so.add_argument("--out", required=True, help="report directory (its parent must exist)")
    so.add_argument("--mu", type=float, nargs=2, action="append", help="Poisson parameter (repeatable)")
    so.add_argument("--alpha", type=float, action="append", help="advection angle (repeatable)")
    so.add_argument("--n-t", type=int, default=None, help="number of random test parameters")
    so.add_argument("--test-seed", type=int, default=1)
    so.add_argument("--time", type=float, default=None, help="advection end time (default horizon)")
    mode = so.add_mutually_exclusive_group()
    mode.add_argument("--eim", dest="eim_mode", action="store_const", const="eim")
    mode.add_argument("--no-eim", dest="eim_mode", action="store_const", const="plain")
    mode.add_argument("--compare", dest="eim_mode", action="store_const", const="compare",
                      help="solve with and without EIM and write a paired comparison")
    so.add_argument("--dump-fields", action="store_true", help="write physical-domain fields")

    rp = sub.add_parser("reproduce", help="experiment bundles")
    rsub = rp.add_subparsers(dest="experiment", required=True)
    r1 = rsub.add_parser("1d", help="boundary-layer bounds and transport-map data")
    r1.add_argument("--mu-min", type=float, default=20.0)
    r1.add_argument("--ratio", type=float, default=float(np.sqrt(0.1)),
                    help="square root of mu_min / mu_max")
    r1.add_argument("--n-mu", type=int, default=50)
    r1.add_argument("--nodes", type=int, default=4097)
    r1.add_argument("--one-mode", action="store_true", help="check only the one-mode bound")
    r1.add_argument("--no-maps", dest="maps", action="store_false", help="skip the entropic map sweeps")
    r1.add_argument("--out", required=True)
    rpo = rsub.add_parser("poisson", help="error table over a tolerance sweep")
    rpo.add_argument("--taus", type=float, nargs="+", default=[1e-3, 1e-4, 1e-5],
                     help="POD tolerances of the sweep")
    rpo.add_argument("--density", choices=["u2", "f"], default="u2")
    rpo.add_argument("--n-t", type=int, default=50)
    rpo.add_argument("--test-seed", type=int, default=1)
    rpo.add_argument("--eim", dest="use_eim", action="store_true", default=True)
    rpo.add_argument("--no-eim", dest="use_eim", action="store_false")
    rpo.add_argument("--out", required=True)
    _add_training_options(rpo, eim_flag=False)
    rad = rsub.add_parser("advection", help="error-vs-time series, registered and plain")
    rad.add_argument("--n-t", type=int, default=20)
    rad.add_argument("--test-seed", type=int, default=1)
    rad.add_argument("--plain-n", type=int, default=24)
    rad.add_argument("--eim", dest="use_eim", action="store_true", default=True)
    rad.add_argument("--no-eim", dest="use_eim", action="store_false")
    rad.add_argument("--out", required=True)
    _add_training_options(rad, eim_flag=False)
    return parser


def options_from_args(args, problem: str, **extra) -> PipelineOptions:
    base = dict(PROBLEMS[problem])
    base.update(extra)
    mapping = {"eps": "epsilon", "tau": "tau", "tau_eim": "tau_eim", "floor": "floor", "n_s": "n_s",
               "pde_cells": "pde_cells", "ot_factor": "ot_factor", "seed": "seed", "debias": "debias"}
    for arg, field_name in mapping.items():
        v = getattr(args, arg, None)
        if v is not None:
            base[field_name] = v
    if not getattr(args, "train_eim", True):
        base["eim"] = False
    try:
        return PipelineOptions(**base)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _output_dir(path: str) -> Path:
    out = Path(path)
    if not out.parent.exists():
        raise UsageError(f"parent of output directory does not exist: {out.parent}")
    out.mkdir(exist_ok=True)
    return out


def _write_config(out: Path, config: dict) -> None:
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True, default=str) + "\n")


def _header(config: dict) -> str:
    return json.dumps(config, sort_keys=True, default=str)


# ---------------------------------------------------------------------------
# commands


def _spectra(out: Path, art, config: dict) -> None:
    for name, lam in sorted(art.spectra.items()):
        write_spectrum(out / f"spectrum_{name}.dat", lam, header=_header(config))


def _timing_table(timings: dict) -> str:
    width = max(len(k) for k in timings) if timings else 5
    lines = [f"{'stage':<{width}}  seconds", "-" * (width + 10)]
    lines += [f"{k:<{width}}  {v:8.2f}" for k, v in timings.items()]
    lines.append(f"{'total':<{width}}  {sum(timings.values()):8.2f}")
    return "\n".join(lines)


def cmd_train(args) -> int:
    out = _output_dir(args.out)
    opts = options_from_args(args, args.problem)
    config = {"command": "train", "problem": args.problem, **opts.to_dict()}
    art = offline_train(opts)
    save_artifacts(art, out)
    _spectra(out, art, config)
    _write_config(out, config)
    print(_timing_table(art.timings))
    print(f"m={art.m} n_m={art.n_m} Q={art.meta.get('Q', {})}")
    return EXIT_OK


def _solve_poisson(art, mus, mode: str):
    modes = ["eim", "plain"] if mode == "compare" else [mode]
    hf = [art.problem.solve(art.space, mu) for mu in mus]
    results = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FoldedMappingWarning)
        for m in modes:
            sols = [online_solve_poisson(art, mu, use_eim=(m == "eim")) for mu in mus]
            results[m] = (sols, error_report(sols, hf, art.space, params=mus))
    return results


def _solve_advection(art, alphas, T, mode: str):
    modes = ["eim", "plain"] if mode == "compare" else [mode]
    from .pde.problems import AdvectionOperator

    op = AdvectionOperator(art.problem, art.space)
    T = art.problem.horizon if T is None else T
    hf = [op.trajectory(float(a), T)[-1] for a in alphas]
    results = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FoldedMappingWarning)
        for m in modes:
            sols = [online_advance_advection(art, float(a), T, use_eim=(m == "eim"),
                                             remap_every=10 ** 9)[-1] for a in alphas]
            params = np.column_stack([np.full(len(alphas), T), alphas]) if len(alphas) else np.zeros((0, 2))
            results[m] = (sols, error_report(sols, hf, art.space, params=params))
    return results


def cmd_solve(args) -> int:
    art_dir = Path(args.artifacts)
    if not (art_dir / "manifest.json").exists():
        raise UsageError(f"no artifact directory at {art_dir}")
    out = _output_dir(args.out)
    art = load_artifacts(art_dir)
    problem = art.options.problem
    if problem == "shift":
        raise UsageError("the synthetic shift family has no online solver")
    mode = args.eim_mode or ("eim" if art.eim else "plain")
    if mode in ("eim", "compare") and not art.eim:
        raise UsageError("artifacts carry no EIM data")
    if problem == "poisson":
        if args.mu:
            params = np.array(args.mu, dtype=float)
        else:
            params = draw_test_parameters("poisson", args.n_t if args.n_t is not None else 50, args.test_seed)
        params = params.reshape(-1, 2)
        results = _solve_poisson(art, params, mode)
    else:
        if args.alpha:
            params = np.array(args.alpha, dtype=float)
        else:
            params = draw_test_parameters("advection", args.n_t if args.n_t is not None else 20, args.test_seed)
        results = _solve_advection(art, params, args.time, mode)
    config = {"command": "solve", "artifacts": str(art_dir), "mode": mode, "test_seed": args.test_seed,
              "n_params": int(len(params)), "time": args.time, "training": art.options.to_dict()}
    for m, (sols, rep) in results.items():
        rep.write_csv(out / f"errors_{m}.csv", header=config)
        rep.write_json(out / f"errors_{m}.json", header=config)
        if args.dump_fields:
            for i, s in enumerate(sols):
                fld = s.physical_field or s.reference_field
                write_field(out / f"field_{m}_{i:03d}.csv", fld, extra={"config": config, "index": i})
    if mode == "compare":
        _write_comparison(out / "eim_comparison.csv", results, config)
    _write_config(out, config)
    for m, (_, rep) in results.items():
        agg = rep.aggregates()["l2"]
        if agg["avg"] is None:
            print(f"{m}: empty test set")
        else:
            print(f"{m}: n={len(rep.l2)} relative L2 avg={agg['avg']:.4e} max={agg['max']:.4e}")
    return EXIT_OK


def _write_comparison(path: Path, results: dict, config: dict) -> None:
    (se, re_), (sp_, rp) = results["eim"], results["plain"]
    with open(path, "w") as fh:
        fh.write("# " + _header(config) + "\n")
        fh.write("index,l2_eim,l2_plain,relative_coefficient_difference_squared\n")
        for i, (a, b) in enumerate(zip(se, sp_)):
            d = float(np.sum((a.coefficients - b.coefficients) ** 2) / max(np.sum(b.coefficients ** 2), 1e-300))
            fh.write(f"{i},{re_.l2[i]:.17g},{rp.l2[i]:.17g},{d:.17g}\n")


def _entropic_map_1d(family: ot1d.BoundaryLayerFamily, mu: float, eps: float, nodes: int):
    """Entropic Monge map from ``rho(mu_bar)`` onto ``rho(mu)``."""
    grid = make_uniform_grid(1, nodes)
    rho_mu = family.density(mu, grid)
    rho_bar = family.density(family.mu_bar, grid)
    cfg = SinkhornConfig(eps, tol=1e-6, log_domain=True)
    try:
        res = sinkhorn_solve(rho_bar, rho_mu, cfg)
    except SinkhornConvergenceError as exc:
        log.warning("1d map at eps=%g: %s", eps, exc)
        res = exc.result
    return grid.axis(0), entropic_monge_map(res).as_array()[0]


def cmd_reproduce_1d(args) -> int:
    out = _output_dir(args.out)
    try:
        family = ot1d.BoundaryLayerFamily(args.mu_min, args.ratio)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    config = {"command": "reproduce 1d", "mu_min": args.mu_min, "ratio": args.ratio,
              "n_mu": args.n_mu, "nodes": args.nodes, "one_mode": args.one_mode}
    ok = True
    lines = ["check,mu,error,sharp_bound,bound,passed"]
    if not args.one_mode:
        # the sharp per-mu bound sinks below double-precision roundoff for large mu
        errs, sharp = ot1d.exact_transport_errors(family, args.n_mu, args.nodes)
        bound = 2.0 * np.exp(-args.mu_min)
        for mu, e, b in zip(family.samples(args.n_mu), errs, sharp):
            passed = bool(e <= bound)
            ok &= passed
            lines.append(f"exact,{mu:.17g},{e:.17g},{b:.17g},{bound:.17g},{int(passed)}")
        print(f"exact transport: max error {np.max(errs):.3e} vs bound {bound:.3e}")
    errs1 = ot1d.one_mode_errors(family, args.n_mu, args.nodes)
    b1 = family.one_mode_bound()
    for mu, e in zip(family.samples(args.n_mu), errs1):
        passed = bool(e <= b1)
        ok &= passed
        lines.append(f"one_mode,{mu:.17g},{e:.17g},,{b1:.17g},{int(passed)}")
    print(f"one transport mode: max error {np.max(errs1):.3e} vs bound {b1:.3e}")
    with open(out / "bounds.csv", "w") as fh:
        fh.write("# " + _header(config) + "\n" + "\n".join(lines) + "\n")
    if args.maps:
        nodes = 1025
        y = np.linspace(0.0, 1.0, nodes)
        exact = ot1d.boundary_layer_map(family.mu_bar, family.mu_min, y)
        write_series(out / "map_exact.dat", y, exact, header=_header(config))
        for s in (0.0, 1e-7, 1e-4):
            fam = ot1d.BoundaryLayerFamily(args.mu_min, args.ratio, floor=s)
            x, t = _entropic_map_1d(fam, args.mu_min, 1e-4, nodes)
            write_series(out / f"map_floor_{s:g}.dat", x, t, header=_header({**config, "floor": s, "eps": 1e-4}))
        for eps in (1e-2, 1e-3, 1e-4):
            x, t = _entropic_map_1d(family, args.mu_min, eps, nodes)
            write_series(out / f"map_eps_{eps:g}.dat", x, t, header=_header({**config, "floor": 0.0, "eps": eps}))
    _write_config(out, config)
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_reproduce_poisson(args) -> int:
    out = _output_dir(args.out)
    opts = options_from_args(args, "poisson-u2" if args.density == "u2" else "poisson-f")
    config = {"command": "reproduce poisson", "taus": args.taus, "n_t": args.n_t,
              "test_seed": args.test_seed, **opts.to_dict()}
    rows = tau_sweep(opts, args.taus, n_t=args.n_t, test_seed=args.test_seed, use_eim=args.use_eim)
    write_table(out / "table.csv", rows, header=config)
    _write_config(out, config)
    for r in rows:
        print(f"{r['method']:>16} tau={r['tau']:.0e} n={r['n']} m={r['m']} "
              f"L2 avg={r['l2_avg']:.3e} max={r['l2_max']:.3e}")
    return EXIT_OK


def cmd_reproduce_advection(args) -> int:
    out = _output_dir(args.out)
    opts = options_from_args(args, "advection")
    config = {"command": "reproduce advection", "n_t": args.n_t, "test_seed": args.test_seed,
              "plain_n": args.plain_n, **opts.to_dict()}
    art = offline_train(opts)
    _spectra(out, art, config)
    alphas = draw_test_parameters("advection", args.n_t, args.test_seed)
    t_train = art.problem.t_train
    head = _header(config) + f"\nT_train {t_train}"
    times, reg, finals = advection_error_series(art, alphas, use_eim=args.use_eim and bool(art.eim))
    write_series(out / "errors_registered.dat", times, reg, header=head)
    plain = plain_pod_artifacts(art, args.plain_n)
    _, pl, _ = advection_error_series(plain, alphas, use_eim=False)
    write_series(out / "errors_plain.dat", times, pl, header=head)
    _write_config(out, config)
    print(f"m={art.m} n_m={art.n_m} Q={art.meta.get('Q', {})}")
    print(f"final-time relative L2: registered {reg[-1]:.3e}, plain (n={args.plain_n}) {pl[-1]:.3e}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"train": cmd_train, "solve": cmd_solve}
    if args.command == "reproduce":
        handler = {"1d": cmd_reproduce_1d, "poisson": cmd_reproduce_poisson,
                   "advection": cmd_reproduce_advection}[args.experiment]
    else:
        handler = handlers[args.command]
    try:
        return handler(args)
    except (UsageError, ArtifactVersionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (np.linalg.LinAlgError, SinkhornConvergenceError, NewtonError, LinearSolveError,
            FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
