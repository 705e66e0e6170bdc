"""``ssdrate`` command line: run, sweep, oracle, compare, selftest."""
from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import acceptance, ratelab
from .config import ExperimentConfig, load_config
from .experiments import (COMPARE_COLUMNS, TRACE_COLUMNS, Reference, ReferenceError, build_reference,
                          canonical_json, check_reference_matches, compare_seed, compare_summary,
                          ct_samples, default_epochs, load_reference, make_problem, parallel_map,
                          solve_run, trace_rows, write_csv, write_reference)
from .solver import ConfigurationError, InvalidInputError, epoch_index, epoch_start

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_NO_ORACLE, EXIT_ACCEPTANCE = 0, 1, 2, 3, 4

SWEEP_COLUMNS = ("mode", "epsilon", "n", "t", "replications", "median_C", "q1_C", "q3_C", "mean_C",
                 "nu", "tail_threshold", "tail_frequency", "tail_ci_low", "tail_ci_high")
FIT_COLUMNS = ("mode", "scale", "zeta", "slope", "ci_low", "ci_high", "intercept", "zeros_excluded",
               "degenerate")
CELL_COLUMNS = ("replication", "seed", "epsilon", "n", "C_t")


def _tag(x: float) -> str:
    return f"{x:g}".replace(".", "p")


def _reference_path(cfg: ExperimentConfig, out: Path | None) -> Path:
    p = Path(cfg.reference)
    if p.is_absolute():
        return p
    return (out / p) if out is not None else cfg.reference_path


def _require_reference(cfg: ExperimentConfig, out: Path | None) -> Reference:
    ref = load_reference(_reference_path(cfg, out))
    check_reference_matches(cfg, ref)
    return ref


def _reference_or_build(cfg: ExperimentConfig, out: Path | None) -> tuple[Reference, str | None]:
    try:
        ref = _require_reference(cfg, out)
        return ref, ref.file_hash
    except ReferenceError:
        payload = build_reference(cfg)
        print("note: no matching oracle reference found; computed one in memory", file=sys.stderr)
        return Reference(payload, hashlib.sha256(canonical_json(payload).encode()).hexdigest()), None


def _run_task(cfg, ref, eps, rep, out_dir, ref_hash):
    seed = cfg.base_seed + rep
    trace = solve_run(cfg, ref, eps, cfg.horizon, seed)
    stem = f"eps{_tag(eps)}_rep{rep}"
    write_csv(out_dir / f"trace_{stem}.csv", trace_rows(trace), TRACE_COLUMNS, cfg, ref_hash)
    top = epoch_index(cfg.horizon, eps)
    ns = [n for n in cfg.epochs if n <= top] or default_epochs(eps, cfg.horizon)
    rows = []
    if ns:
        law = ref.law(cfg.state_law)
        reports = ratelab.epoch_reports(trace, make_problem(cfg, ref), eps, [law["lambda_star"]], law["D"], ns)
        rows = [dict(r.row(), replication=rep, seed=seed) for r in reports]
    cols = ("replication", "seed") + ratelab.REPORT_COLUMNS
    write_csv(out_dir / f"report_{stem}.csv", rows, cols, cfg, ref_hash)
    return rows


def cmd_run(cfg: ExperimentConfig, out: Path, workers: int) -> int:
    ref, ref_hash = _reference_or_build(cfg, out)
    tasks = [(cfg, ref, eps, rep, out, ref_hash) for eps in cfg.epsilons for rep in range(cfg.replications)]
    results = parallel_map(_run_task, tasks, workers)
    rows = [r for block in results for r in block]
    write_csv(out / "report.csv", rows, ("replication", "seed") + ratelab.REPORT_COLUMNS, cfg, ref_hash)
    print(f"wrote {len(tasks)} trace(s) of {cfg.horizon} slots and {len(rows)} report row(s) to {out}")
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, out: Path, workers: int, mode: str, n: int | None,
              epsilon: float | None) -> int:
    ref = _require_reference(cfg, out)
    if mode == "fix_n_vary_eps":
        n = n or cfg.epochs[0]
        eps_list, ns = list(cfg.epsilons), [n]
    else:
        epsilon = epsilon or cfg.epsilons[0]
        eps_list, ns = [epsilon], list(cfg.epochs)
    cells = ct_samples(cfg, ref, eps_list, ns, cfg.replications, workers)
    rows, series = [], []
    for (eps, nn), vals in cells.items():
        nu = nn if mode == "fix_eps_vary_n" else 1.0 / eps
        tail = ratelab.tail_frequency(vals, nu, cfg.zeta)
        q1, med, q3 = np.quantile(vals, [0.25, 0.5, 0.75])
        rows.append({"mode": mode, "epsilon": eps, "n": nn, "t": epoch_start(nn, eps),
                     "replications": len(vals), "median_C": float(med), "q1_C": float(q1),
                     "q3_C": float(q3), "mean_C": float(np.mean(vals)), "nu": float(nu),
                     "tail_threshold": tail.threshold, "tail_frequency": tail.frequency,
                     "tail_ci_low": tail.ci_low, "tail_ci_high": tail.ci_high})
        series.append((nn if mode == "fix_eps_vary_n" else eps, vals))
        cell_rows = [{"replication": r, "seed": cfg.base_seed + r, "epsilon": eps, "n": nn, "C_t": float(v)}
                     for r, v in enumerate(vals)]
        write_csv(out / "cells" / f"{mode}_eps{_tag(eps)}_n{nn}.csv", cell_rows, CELL_COLUMNS, cfg,
                  ref.file_hash)
    write_csv(out / f"sweep_{mode}.csv", rows, SWEEP_COLUMNS, cfg, ref.file_hash)
    fit_row = {"mode": mode, "scale": "n" if mode == "fix_eps_vary_n" else "epsilon", "zeta": cfg.zeta}
    if len(series) >= 3:
        fit = ratelab.decay_fit(series)
        fit_row.update(slope=fit.slope, ci_low=fit.ci_low, ci_high=fit.ci_high, intercept=fit.intercept,
                       zeros_excluded=fit.zeros_excluded, degenerate=fit.degenerate)
        print(f"decay exponent {fit.slope:.3f} [{fit.ci_low:.3f}, {fit.ci_high:.3f}]")
    else:
        fit_row.update(degenerate=True)
    write_csv(out / f"sweep_{mode}_fit.csv", [fit_row], FIT_COLUMNS, cfg, ref.file_hash)
    print(f"wrote {len(rows)} sweep row(s) to {out / f'sweep_{mode}.csv'}")
    return EXIT_OK


def cmd_oracle(cfg: ExperimentConfig, out: Path | None) -> int:
    path = _reference_path(cfg, out)
    ref = write_reference(cfg, path)
    law = ref.payload["surrogate"]
    print(f"lambda* = {law['lambda_star']:.10g}, D = {law['D']:.10g} (surrogate, {law['atoms']} atoms)")
    if ref.payload["continuous"]:
        c = ref.payload["continuous"]
        print(f"lambda* = {c['lambda_star']:.10g}, D = {c['D']:.10g} (continuous model)")
    print(f"G = {ref.G:.6g}, Slater margin = {law['slater_margin']:.6g}, "
          f"recommended lambda_max = {law['lambda_max_recommended']:.6g}")
    print(f"wrote {path} (content hash {ref.file_hash})")
    return EXIT_OK


def cmd_compare(cfg: ExperimentConfig, out: Path, workers: int) -> int:
    ref, ref_hash = _reference_or_build(cfg, out)
    tasks = [(cfg, ref, cfg.base_seed + s) for s in range(cfg.compare_seeds)]
    rows = [r for block in parallel_map(compare_seed, tasks, workers) for r in block]
    write_csv(out / "compare.csv", rows, COMPARE_COLUMNS, cfg, ref_hash)
    summ = compare_summary(rows)
    write_csv(out / "compare_summary.csv", [summ], tuple(summ), cfg, ref_hash)
    print(f"proposed best on {summ['ordering_fraction']:.0%} of {summ['seeds']} seeds; "
          f"rows written to {out / 'compare.csv'}")
    return EXIT_OK


def cmd_selftest(workers: int, only: set[int] | None) -> int:
    ctx = acceptance.default_context(workers)
    results = acceptance.run_all(ctx, only=only, echo=print)
    failed = [r.number for r in results if not (r.passed and r.within_time)]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed")
    return EXIT_ACCEPTANCE if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config")
    common.add_argument("--out", type=Path, help="output directory (default: ./out)")
    common.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    common.add_argument("--seed", type=int, help="override the base seed")
    p = argparse.ArgumentParser(prog="ssdrate",
                                description="Stochastic dual subgradient experiments for D2D rate allocation")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="traces and epoch reports for each step size")
    sw = sub.add_parser("sweep", parents=[common], help="C_t statistics across step sizes or epochs")
    sw.add_argument("--mode", choices=("fix_n_vary_eps", "fix_eps_vary_n"), required=True)
    sw.add_argument("--n", type=int, help="epoch count for fix_n_vary_eps (default: first of epochs)")
    sw.add_argument("--epsilon", type=float, help="step size for fix_eps_vary_n (default: first of epsilons)")
    sub.add_parser("oracle", parents=[common], help="compute and store the reference values")
    sub.add_parser("compare", parents=[common], help="proposed vs baseline policies")
    st = sub.add_parser("selftest", parents=[common], help="run the acceptance criteria")
    st.add_argument("--criteria", help="comma-separated subset, e.g. 1,3,4")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.workers < 1:
            raise ConfigurationError("--workers must be >= 1")
        if args.command == "selftest":
            only = {int(x) for x in args.criteria.split(",")} if args.criteria else None
            return cmd_selftest(args.workers, only)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.replace(base_seed=args.seed)
        out = args.out
        if args.command == "oracle":
            return cmd_oracle(cfg, out)
        out = out or Path("out")
        if args.command == "run":
            return cmd_run(cfg, out, args.workers)
        if args.command == "sweep":
            return cmd_sweep(cfg, out, args.workers, args.mode, args.n, args.epsilon)
        return cmd_compare(cfg, out, args.workers)
    except ReferenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_ORACLE
    except (ConfigurationError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
