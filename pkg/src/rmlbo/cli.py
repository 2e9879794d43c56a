"""Command-line front end.

Three subcommands, all driven by a JSON config file plus repeatable
``--set key=value`` overrides:

  run               one method on one problem; writes trace.jsonl + report.json
  compare           budget curves for several methods; writes curves.csv,
                    summary.csv and report.json
  export-landscape  active-subspace projections; writes landscape.csv,
                    method_samples.csv and (linear problems) oracle_samples.csv

Exit codes: 0 success, 2 config validation failure, 3 runtime failure (with
whatever partial trace exists flushed to disk).  Every output is written
atomically (temp file + rename) and every run is reconstructible from the
config snapshot and seed stored in its report.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from . import bench
from .baselines import per_objective_local_search, random_design
from .hdbo import ConfigError, HDBOConfig, RunAborted, run_hdbo_rml, write_trace
from .rml import draw_randomizations
from .seeding import (
    STREAM_BASELINE,
    STREAM_LANDSCAPE,
    STREAM_RANDOMIZE,
    labeled_stream,
)

METHOD_NAMES = ("hdbo-rml", "random-design", "local-search", "oracle-rml")

_TOP_LEVEL_DEFAULTS = {
    "method": "hdbo-rml",
    "methods": ["hdbo-rml", "random-design", "local-search"],
    "budget_N": 1000,
    "K": 10,
    "d_e": None,          # defaults to active dimension + 1 (capped at D)
    "n0": 5,
    "beta": 2.0,
    "acq_restarts": 10,
    "prox_eta": 0.25,
    "seed": 0,
    "trials": 5,
    "checkpoints": None,  # defaults to 20 evenly spaced budgets
    "prior_samples": 10000,
}


def _atomic_write(path: str, text: str) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _atomic_write_json(path: str, payload) -> None:
    _atomic_write(path, json.dumps(payload, indent=2) + "\n")


def _parse_override(raw: str):
    if "=" not in raw:
        raise ConfigError(f"--set expects key=value, got {raw!r}")
    key, value = raw.split("=", 1)
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return key.strip(), parsed


def _apply_override(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{key}: cannot override inside non-object field")
    node[parts[-1]] = value


def load_config(path: str, overrides, seed_flag) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    for raw in overrides or []:
        key, value = _parse_override(raw)
        _apply_override(cfg, key, value)
    if seed_flag is not None:
        cfg["seed"] = int(seed_flag)
    return cfg


def _require_positive_int(cfg: dict, field: str) -> int:
    value = cfg[field]
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise ConfigError(f"{field}: expected a positive integer, got {value!r}")
    return value


def resolve_config(cfg: dict) -> dict:
    """Validate and fill defaults; raises ConfigError naming the field."""
    known = set(_TOP_LEVEL_DEFAULTS) | {"problem", "n_rml"}
    for key in cfg:
        if key not in known:
            raise ConfigError(f"unknown field '{key}'")
    resolved = dict(_TOP_LEVEL_DEFAULTS)
    resolved.update(cfg)
    for field in ("problem", "n_rml"):
        if field not in cfg:
            raise ConfigError(f"missing required field '{field}'")
    if not isinstance(resolved["problem"], dict):
        raise ConfigError("problem: expected an object")
    for field in ("n_rml", "budget_N", "K", "n0", "acq_restarts", "trials",
                  "prior_samples"):
        _require_positive_int(resolved, field)
    if resolved["d_e"] is not None:
        _require_positive_int(resolved, "d_e")
    for field in ("beta", "prox_eta"):
        if not isinstance(resolved[field], (int, float)) or isinstance(resolved[field], bool):
            raise ConfigError(f"{field}: expected a number, got {resolved[field]!r}")
    if resolved["beta"] < 0:
        raise ConfigError("beta: must be non-negative")
    if resolved["prox_eta"] <= 0:
        raise ConfigError("prox_eta: must be strictly positive")
    if not isinstance(resolved["seed"], int) or isinstance(resolved["seed"], bool):
        raise ConfigError(f"seed: expected an integer, got {resolved['seed']!r}")
    if resolved["method"] not in METHOD_NAMES:
        raise ConfigError(
            f"method: unknown method {resolved['method']!r}; choose from {METHOD_NAMES}")
    if not isinstance(resolved["methods"], list) or not resolved["methods"]:
        raise ConfigError("methods: expected a non-empty list")
    for entry in resolved["methods"]:
        if isinstance(entry, dict):
            # external candidate trace in the JSON-lines record format
            if "trace" not in entry or "name" not in entry:
                raise ConfigError(
                    "methods: a trace entry needs both 'name' and 'trace' fields")
            if not os.path.exists(entry["trace"]):
                raise ConfigError(f"methods: trace file not found: {entry['trace']}")
        elif entry not in METHOD_NAMES:
            raise ConfigError(
                f"methods: unknown method {entry!r}; choose from {METHOD_NAMES}")
    if resolved["checkpoints"] is not None:
        cps = resolved["checkpoints"]
        if (not isinstance(cps, list) or not cps
                or any(not isinstance(c, int) or c < 1 for c in cps)
                or any(b <= a for a, b in zip(cps, cps[1:]))):
            raise ConfigError(
                "checkpoints: expected a strictly increasing list of positive integers")
    return resolved


def _problem_active_dim(problem) -> int | None:
    A = getattr(problem.simulator, "active_matrix", None)
    return None if A is None else int(A.shape[1])


def _hdbo_config(resolved: dict, problem) -> HDBOConfig:
    d_e = resolved["d_e"]
    if d_e is None:
        d = _problem_active_dim(problem)
        d_e = min((d or 2) + 1, problem.input_dim)
    if d_e > problem.input_dim:
        raise ConfigError(f"d_e: embedding dimension {d_e} exceeds input "
                          f"dimension {problem.input_dim}")
    return HDBOConfig(n_rml=resolved["n_rml"], budget_N=resolved["budget_N"],
                      K=resolved["K"], d_e=d_e, n0=resolved["n0"],
                      beta=float(resolved["beta"]), acq_restarts=resolved["acq_restarts"],
                      prox_eta=float(resolved["prox_eta"]), seed=resolved["seed"])


def _run_method(name: str, problem, instances, resolved: dict):
    seed = resolved["seed"]
    if name == "hdbo-rml":
        return run_hdbo_rml(problem, instances, _hdbo_config(resolved, problem))
    if name == "random-design":
        rng = labeled_stream(seed, STREAM_BASELINE, 0)
        return random_design(problem, instances, resolved["budget_N"], rng)
    if name == "local-search":
        rng = labeled_stream(seed, STREAM_BASELINE, 1)
        return per_objective_local_search(problem, instances, resolved["budget_N"], rng)
    if name == "oracle-rml":
        try:
            return bench.oracle_rml_result(problem, instances)
        except ValueError as exc:
            raise ConfigError(f"method: {exc}") from exc
    raise ConfigError(f"method: unknown method {name!r}")


def _bench_method(entry, resolved: dict, problem) -> bench.Method:
    if isinstance(entry, dict):
        return bench.trace_method(entry["trace"], entry["name"])
    if entry == "hdbo-rml":
        return bench.hdbo_method(_hdbo_config(resolved, problem))
    if entry == "random-design":
        return bench.random_design_method(resolved["budget_N"])
    if entry == "local-search":
        return bench.local_search_method(resolved["budget_N"])
    raise ConfigError(f"methods: {entry!r} is not a budgeted method")


def _draw_instances(problem, resolved: dict):
    rng = labeled_stream(resolved["seed"], STREAM_RANDOMIZE)
    return draw_randomizations(problem, resolved["n_rml"], rng)


def cmd_run(resolved: dict, out_dir: str) -> int:
    problem = bench.problem_from_config(resolved["problem"])
    instances = _draw_instances(problem, resolved)
    trace_path = os.path.join(out_dir, "trace.jsonl")
    started = time.perf_counter()
    try:
        result = _run_method(resolved["method"], problem, instances, resolved)
    except RunAborted as exc:
        write_trace(exc.records, trace_path)
        print(f"runtime failure: {exc}", file=sys.stderr)
        print(f"partial trace ({len(exc.records)} records): {trace_path}", file=sys.stderr)
        return 3
    elapsed = time.perf_counter() - started
    mean_ret = bench.mean_return(result, instances, problem)

    lines = [json.dumps(rec.to_dict()) for rec in result.records]
    _atomic_write(trace_path, "".join(line + "\n" for line in lines))
    report = {
        "config": resolved,
        "method": resolved["method"],
        "seed": resolved["seed"],
        "mean_return": mean_ret,
        "n_evals": result.n_evals,
        "analysis_evals": problem.simulator.analysis_counter,
        "objective_values": result.values.tolist(),
        "maximizers": result.maximizers.tolist(),
        "instances": [inst.to_dict() for inst in instances],
        "embeddings": [emb.to_dict() for emb in result.embeddings],
        "wall_clock_s": elapsed,
    }
    report_path = os.path.join(out_dir, "report.json")
    _atomic_write_json(report_path, report)
    print(f"method: {resolved['method']}")
    print(f"mean return: {mean_ret!r}")
    print(f"simulator evaluations: {result.n_evals} "
          f"(analysis: {problem.simulator.analysis_counter})")
    print(f"trace: {trace_path}")
    print(f"report: {report_path}")
    return 0


def cmd_compare(resolved: dict, out_dir: str) -> int:
    problem = bench.problem_from_config(resolved["problem"])
    instances = _draw_instances(problem, resolved)
    checkpoints = resolved["checkpoints"] or bench.default_checkpoints(resolved["budget_N"])
    methods = [_bench_method(entry, resolved, problem) for entry in resolved["methods"]]
    report = bench.budget_curve(problem, instances, methods, checkpoints,
                                resolved["trials"], resolved["seed"])
    report.config = resolved

    curves_path = os.path.join(out_dir, "curves.csv")
    _atomic_write(curves_path, "\n".join(bench.curves_csv_lines(report)) + "\n")
    summary_lines = ["method,final_neg_mean_return_mean,final_neg_mean_return_sd"]
    print(f"{'method':<16} final negative mean return (mean +/- sd over "
          f"{report.trials} trials)")
    for m in report.methods:
        mean = float(np.mean(m.final_neg_mean_returns))
        sd = float(np.std(m.final_neg_mean_returns))
        summary_lines.append(f"{m.name},{mean!r},{sd!r}")
        print(f"{m.name:<16} {mean:.6f} +/- {sd:.6f}")
    summary_path = os.path.join(out_dir, "summary.csv")
    _atomic_write(summary_path, "\n".join(summary_lines) + "\n")
    report_path = os.path.join(out_dir, "report.json")
    _atomic_write_json(report_path, report.to_dict())
    print(f"curves: {curves_path}")
    print(f"summary: {summary_path}")
    print(f"report: {report_path}")
    return 0


def cmd_export_landscape(resolved: dict, out_dir: str) -> int:
    problem = bench.problem_from_config(resolved["problem"])
    A = getattr(problem.simulator, "active_matrix", None)
    if A is None:
        raise ConfigError("problem: active subspace unavailable; landscape export "
                          "requires a synthetic problem")
    instances = _draw_instances(problem, resolved)

    rng = labeled_stream(resolved["seed"], STREAM_LANDSCAPE)
    _, coords, logpost = bench.prior_landscape(problem, resolved["prior_samples"], rng)
    landscape_path = os.path.join(out_dir, "landscape.csv")
    _atomic_write(landscape_path,
                  "\n".join(bench.projections_csv_lines(coords, logpost)) + "\n")
    print(f"landscape ({coords.shape[0]} prior samples): {landscape_path}")

    if getattr(problem.simulator, "matrix", None) is not None and problem.has_gaussian_prior:
        oracle = bench.oracle_rml_result(problem, instances)
        o_coords, o_logpost = bench.project_active(oracle.maximizers, A, problem)
        oracle_path = os.path.join(out_dir, "oracle_samples.csv")
        _atomic_write(oracle_path,
                      "\n".join(bench.projections_csv_lines(o_coords, o_logpost)) + "\n")
        print(f"oracle samples: {oracle_path}")
    else:
        print("warning: oracle samples unavailable (nonlinear simulator)", file=sys.stderr)

    result = _run_method(resolved["method"], problem, instances, resolved)
    m_coords, m_logpost = bench.project_active(result.maximizers, A, problem)
    method_path = os.path.join(out_dir, "method_samples.csv")
    _atomic_write(method_path,
                  "\n".join(bench.projections_csv_lines(m_coords, m_logpost)) + "\n")
    print(f"method samples ({resolved['method']}): {method_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rmlbo",
        description="Posterior sampling by randomized-objective maximization "
                    "with embedding-based Bayesian optimization.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
            ("run", "run one method on one problem"),
            ("compare", "budget-curve comparison of several methods"),
            ("export-landscape", "export active-subspace projections")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to a JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field (repeatable; dotted keys reach "
                            "into nested objects)")
        p.add_argument("--out", default="out", help="output directory (default: out)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set, args.seed)
        resolved = resolve_config(cfg)
        os.makedirs(args.out, exist_ok=True)
        if args.command == "run":
            return cmd_run(resolved, args.out)
        if args.command == "compare":
            return cmd_compare(resolved, args.out)
        return cmd_export_landscape(resolved, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
