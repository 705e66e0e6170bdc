"""Experiment drivers shared by the command line and the acceptance suite."""
from __future__ import annotations

import csv
import functools
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from . import baselines, d2d, oracle, ratelab
from .config import ExperimentConfig
from .d2d import D2DProblem, ScoreMean
from .solver import (ConfigurationError, DualVector, SolverConfig, Trace, epoch_start, run,
                     state_sequence)

REFERENCE_FORMAT = "ssdrate-reference"
REFERENCE_VERSION = 1


class ReferenceError(RuntimeError):
    """The oracle reference file is missing, unreadable or fails its checksum."""


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def git_blob_hash(data: bytes) -> str:
    """Content hash in the same form git uses for blobs."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


# ---------------------------------------------------------------- reference

@functools.lru_cache(maxsize=4)
def _surrogate_cached(params_json: str, atoms: int, seed: int, path: str | None):
    if path is not None:
        return oracle.DiscreteDistribution.load(path)
    return oracle.build_surrogate(d2d.D2DParams.from_mapping(json.loads(params_json)), atoms, seed)


def surrogate_distribution(cfg: ExperimentConfig) -> oracle.DiscreteDistribution:
    path = str(cfg.path(cfg.distribution)) if cfg.distribution else None
    if path is not None and not Path(path).exists():
        raise ConfigurationError(f"distribution file {path} does not exist")
    return _surrogate_cached(canonical_json(cfg.problem.to_mapping()), cfg.surrogate_atoms,
                             cfg.surrogate_seed, path)


def build_reference(cfg: ExperimentConfig) -> dict:
    """Oracle values for the configured problem, as a JSON-ready payload."""
    params = cfg.problem
    dist = surrogate_distribution(cfg)
    table = oracle._AtomTable(dist, params)
    sur_mean = ScoreMean(table.mean_offset(params), 0.0, "exact")
    slater = d2d.slater_check(params, sur_mean)
    if not slater.feasible:
        raise ConfigurationError(
            f"Slater condition fails: E[max rate at full budget] - r_min = {slater.margin:.6g} <= 0, "
            "so no strictly feasible rate exists; lower rate_min or raise cost_max")
    sur_ref = oracle.grid_dual_minimize(dist, params, cfg.lambda_max)
    primal = oracle.primal_optimum_estimate(dist, params, sur_ref, seed=cfg.surrogate_seed)
    g1 = oracle.exact_dual_value(1.0, dist, params, table)
    payload = {
        "params": params.to_mapping(),
        "lambda_max": cfg.lambda_max,
        "G": d2d.subgradient_bound(params),
        "surrogate": {
            "source": cfg.distribution or "built",
            "atoms": len(dist),
            "seed": cfg.surrogate_seed,
            "sha256": hashlib.sha256(canonical_json(dist.to_mapping()).encode()).hexdigest(),
            "score_mean": sur_mean.value,
            "lambda_star": sur_ref.lambda_star,
            "D": sur_ref.D,
            "best_primal": primal.best_primal,
            "duality_gap": primal.gap,
            "slater_margin": float(slater.margin),
            "lambda_max_recommended": d2d.lambda_max_rule(params, slater, 1.0, g1),
        },
        "continuous": None,
    }
    if cfg.distribution is None:
        mean = d2d.score_mean_quadrature(params)
        ref = oracle.reference_from_score_mean(params, mean, cfg.lambda_max)
        cs = d2d.slater_check(params, mean)
        payload["continuous"] = {
            "score_mean": float(mean.value),
            "lambda_star": ref.lambda_star,
            "D": ref.D,
            "slater_margin": float(cs.margin),
            "lambda_max_recommended": d2d.lambda_max_rule(
                params, cs, 1.0, float(d2d.dual_function(1.0, params, mean))),
        }
    return payload


@dataclass(frozen=True)
class Reference:
    payload: dict
    sha256: str
    file_hash: str = ""

    def law(self, state_law: str) -> dict:
        block = self.payload["surrogate" if state_law == "surrogate" else "continuous"]
        if block is None:
            raise ConfigurationError(
                "the reference has no continuous-model values (it was built from a distribution file); "
                "use state_law: surrogate")
        return block

    def lambda_star(self, state_law: str) -> float:
        return float(self.law(state_law)["lambda_star"])

    def D(self, state_law: str) -> float:
        return float(self.law(state_law)["D"])

    @property
    def G(self) -> float:
        return float(self.payload["G"])


def reference_document(payload: dict) -> str:
    digest = hashlib.sha256(canonical_json(payload).encode()).hexdigest()
    doc = {"format": REFERENCE_FORMAT, "version": REFERENCE_VERSION, "payload": payload, "sha256": digest}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_reference(cfg: ExperimentConfig, path: Path | None = None) -> Reference:
    path = Path(path or cfg.reference_path)
    text = reference_document(build_reference(cfg))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return load_reference(path)


def load_reference(path: Path) -> Reference:
    path = Path(path)
    if not path.exists():
        raise ReferenceError(f"oracle reference {path} not found; run `ssdrate oracle` first")
    raw = path.read_bytes()
    try:
        doc = json.loads(raw)
        payload, stored = doc["payload"], doc["sha256"]
        fmt, version = doc["format"], doc["version"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ReferenceError(f"oracle reference {path} is unreadable ({exc}); re-run `ssdrate oracle`") from exc
    if fmt != REFERENCE_FORMAT or version != REFERENCE_VERSION:
        raise ReferenceError(f"oracle reference {path} has format {fmt!r} v{version}, "
                             f"expected {REFERENCE_FORMAT!r} v{REFERENCE_VERSION}")
    actual = hashlib.sha256(canonical_json(payload).encode()).hexdigest()
    if actual != stored:
        raise ReferenceError(f"oracle reference {path} failed its integrity check "
                             "(checksum mismatch); refusing to use it. Re-run `ssdrate oracle`")
    return Reference(payload, stored, git_blob_hash(raw))


def check_reference_matches(cfg: ExperimentConfig, ref: Reference) -> None:
    if ref.payload["params"] != cfg.problem.to_mapping():
        raise ReferenceError("oracle reference was built for different problem parameters; "
                             "re-run `ssdrate oracle` with this config")


# ------------------------------------------------------------------- runs

def make_problem(cfg: ExperimentConfig, ref: Reference) -> D2DProblem:
    if cfg.state_law == "surrogate":
        return D2DProblem(cfg.problem, distribution=surrogate_distribution(cfg))
    block = ref.law("continuous")
    return D2DProblem(cfg.problem, score_mean=ScoreMean(block["score_mean"], 0.0, "quadrature"))


def solve_run(cfg: ExperimentConfig, ref: Reference, epsilon: float, horizon: int, seed: int) -> Trace:
    init = DualVector([cfg.initial_dual], cfg.lambda_max)
    return run(make_problem(cfg, ref), SolverConfig(epsilon, horizon, init, seed=seed))


def parallel_map(fn: Callable, tasks: Sequence[tuple], workers: int = 1) -> list:
    """Ordered map over argument tuples, in worker processes when workers > 1."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as ex:
        futures = [ex.submit(fn, *t) for t in tasks]
        return [f.result() for f in futures]


def _ct_task(cfg, ref, epsilon, ns, seed):
    T = epoch_start(max(ns), epsilon)
    trace = solve_run(cfg, ref, epsilon, T, seed)
    cum = ratelab.cumulative_Ct(trace, [ref.lambda_star(cfg.state_law)])
    return [float(cum[epoch_start(n, epsilon) - 1]) for n in ns]


def ct_samples(cfg: ExperimentConfig, ref: Reference, epsilons: Sequence[float], ns: Sequence[int],
               replications: int, workers: int = 1) -> dict[tuple[float, int], np.ndarray]:
    """C_t(n, eps) per replication for every (eps, n) cell.

    Each (eps, replication) is one run long enough for the largest n; the
    smaller n are read off its prefix. Replication r uses base_seed + r
    in every cell, so cells are paired.
    """
    tasks = [(cfg, ref, eps, tuple(ns), cfg.base_seed + r) for eps in epsilons for r in range(replications)]
    results = parallel_map(_ct_task, tasks, workers)
    out = {}
    for i, eps in enumerate(epsilons):
        block = np.array(results[i * replications:(i + 1) * replications])
        for j, n in enumerate(ns):
            out[(float(eps), int(n))] = block[:, j]
    return out


# ---------------------------------------------------------------- compare

def compare_seed(cfg: ExperimentConfig, ref: Reference, seed: int) -> list[dict]:
    """Proposed, opportunistic and random policies on one shared state sequence."""
    problem = make_problem(cfg, ref)
    T = cfg.compare_slots
    init = DualVector([cfg.initial_dual], cfg.lambda_max)
    trace = run(problem, SolverConfig(cfg.compare_epsilon, T, init, seed=seed))
    states = state_sequence(problem, seed, T)
    proposed = baselines.table1_metrics(baselines.allocations_from_trace(trace), cfg.problem)
    rows = [_metrics_row("proposed", seed, proposed, None)]
    for policy in (baselines.opportunistic_run(states), baselines.random_run(states, seed)):
        match = baselines.matched_power_scaling(proposed.total_power, policy, cfg.problem)
        m = baselines.table1_metrics(policy.allocations(cfg.problem, match.scale), cfg.problem)
        rows.append(_metrics_row(policy.name, seed, m, match))
    return rows


def _metrics_row(name, seed, m: baselines.PolicyMetrics, match) -> dict:
    return {"policy": name, "seed": seed, "downloaded_data": m.downloaded_data, "cost": m.cost_incurred,
            "utility_minus_penalty": m.avg_utility_minus_penalty,
            "slotwise_utility_minus_penalty": m.slotwise_utility_minus_penalty,
            "total_power": m.total_power,
            "power_scale": 1.0 if match is None else match.scale,
            "power_matched": True if match is None else match.matched,
            "power_residual": 0.0 if match is None else match.residual}


COMPARE_COLUMNS = ("policy", "seed", "downloaded_data", "cost", "utility_minus_penalty",
                   "slotwise_utility_minus_penalty", "total_power", "power_scale", "power_matched",
                   "power_residual")


def compare_summary(rows: Iterable[dict]) -> dict:
    by_seed: dict[int, dict[str, dict]] = {}
    for r in rows:
        by_seed.setdefault(r["seed"], {})[r["policy"]] = r
    ordered = costly = 0
    for pol in by_seed.values():
        u = {k: v["utility_minus_penalty"] for k, v in pol.items()}
        ordered += u["proposed"] > u["opportunistic"] > u["random"]
        costly += pol["random"]["cost"] > pol["opportunistic"]["cost"]
    n = len(by_seed)
    return {"seeds": n, "ordering_fraction": ordered / n, "random_costlier_fraction": costly / n}


# ------------------------------------------------------------------- CSV

def write_csv(path: Path, rows: Sequence[dict], columns: Sequence[str], cfg: ExperimentConfig,
              reference_hash: str | None) -> None:
    """CSV with a commented preamble carrying the resolved config and reference hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(f"# config: {canonical_json(cfg.to_mapping())}\n")
        fh.write(f"# reference_hash: {reference_hash or 'none'}\n")
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return v


def read_csv(path: Path) -> list[dict]:
    with Path(path).open() as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


TRACE_COLUMNS = ("t", "lambda", "subgradient", "mean_subgradient", "rate_target", "cost", "winner",
                 "power", "realized_rate", "unit_cost")


def trace_rows(trace: Trace) -> list[dict]:
    lam = np.asarray(trace.dual[:, 0])
    f = np.asarray(trace.subgradient[:, 0])
    fbar = None if trace.mean_subgradient is None else np.asarray(trace.mean_subgradient[:, 0])
    info = trace.info
    return [{"t": t, "lambda": float(lam[t]), "subgradient": float(f[t]),
             "mean_subgradient": "" if fbar is None else float(fbar[t]),
             "rate_target": float(info["rate_target"][t]), "cost": float(info["cost"][t]),
             "winner": int(info["winner"][t]), "power": float(info["power"][t]),
             "realized_rate": float(info["realized_rate"][t]), "unit_cost": float(info["unit_cost"][t])}
            for t in range(len(trace))]


def default_epochs(epsilon: float, horizon: int) -> list[int]:
    """Epoch boundaries 1, 2, 5, 10, 20, 50, ... up to floor(eps T)."""
    top = int(math.floor(epsilon * horizon + 1e-9))
    out, k = [], 0
    while True:
        for m in (1, 2, 5):
            n = m * 10 ** k
            if n > top:
                return out
            out.append(n)
        k += 1
