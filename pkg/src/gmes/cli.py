"""Experiment harness: config parsing, seeded sweeps, aggregation, plots.

Configs are YAML (JSON works too, being a YAML subset). ``parse_config``
materializes every default so the resolved spec emitted next to the results
is self-contained; parsing that emitted JSON yields an identical spec.

Outputs under the chosen directory:

* one CSV per run, ``<algorithm>_<function>_m<agents>_seed<seed>.csv`` with
  header ``iter,instant_regret,cumulative_regret,best_value,inferred_x0,...``
  (wall-clock times live in the JSON sidecar, never in the CSV, so reruns of
  the same spec are byte-identical);
* one JSON sidecar per run with the resolved cell config and timings;
* ``aggregate.csv`` with per-iteration mean and 95% CI across seeds
  (normal approximation: 1.96 * std / sqrt(n));
* two SVG regret plots (instant, cumulative) per function/agent-count group;
* ``failures.json`` only when some runs failed.

All writes are atomic (temp file + rename).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .acquisition import GmesConfig
from .baselines import BaselineConfig
from .errors import ConfigError, GmesError
from .gp import KernelSpec
from .sourcesim import (SafetyConfig, load_scenario, make_scenario, run_seek,
                        scenario_names)
from .testbed import (ALGORITHMS, ExperimentConfig, RegretTrace,
                      function_names, run_experiment)

DEFAULT_SEEDS = (0, 1, 2, 3, 4)

_GMES_KEYS = ("beta_start", "beta_decay", "ascent_iters", "base_step",
              "decay1", "decay2", "adam_eps", "r_div", "barrier_scale",
              "restarts", "ucb_prescan", "ucb_maxiter", "batch_restarts",
              "monotone_retries", "init_attempts")
_BASE_KEYS = ("beta_start", "beta_decay", "candidate_grid_resolution",
              "ts_candidates")
_KERNEL_KEYS = ("length_scale", "signal_variance", "jitter")
_CELL_KEYS = {"algorithm", "function", "agents", "iterations", "sigma0",
              "seeds", "kernel", "gmes", "baseline"}


@dataclass
class SweepSpec:
    """A fully resolved sweep: one ExperimentConfig per cell."""

    cells: list[ExperimentConfig] = field(default_factory=list)
    output_dir: str = "results"
    jobs: int = 1
    aggregate_mean: bool = True
    aggregate_ci: bool = True


# --------------------------------------------------------------------------
# parsing and serialization
# --------------------------------------------------------------------------


def parse_config(path: str) -> SweepSpec:
    """Load, validate, and fully resolve a sweep config file.

    Raises :class:`ConfigError` listing every violated invariant at once.
    """
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError([f"cannot read config: {exc}"]) from exc
    try:
        # JSON first: YAML 1.1 reads exponents like 1e-08 as strings
        raw = json.loads(text)
    except json.JSONDecodeError:
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError([f"config parse error: {exc}"]) from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(["top level of the config must be a mapping"])
    return _resolve_spec(raw)


def _resolve_spec(raw: dict) -> SweepSpec:
    problems: list[str] = []
    known_top = {"output_dir", "jobs", "seeds", "experiments",
                 "aggregate_mean", "aggregate_ci"}
    entries = raw.get("experiments")
    if entries is None and "algorithm" in raw:
        # single-experiment shorthand: cell keys at top level
        entries = [{k: raw[k] for k in _CELL_KEYS if k in raw}]
        known_top |= _CELL_KEYS
    for key in raw:
        if key not in known_top:
            problems.append(f"unknown top-level key {key!r}")
    if not entries:
        problems.append("no experiments defined "
                        "(need an 'experiments' list or top-level algorithm/function)")
        raise ConfigError(problems)

    default_seeds = tuple(raw.get("seeds", DEFAULT_SEEDS))
    cells: list[ExperimentConfig] = []
    for idx, entry in enumerate(entries):
        if not isinstance(entry, dict):
            problems.append(f"experiments[{idx}] must be a mapping")
            continue
        for key in entry:
            if key not in _CELL_KEYS:
                problems.append(f"experiments[{idx}]: unknown key {key!r}")
        algos = entry.get("algorithm", "gmes")
        funcs = entry.get("function", "ackley")
        algos = [algos] if isinstance(algos, str) else list(algos)
        funcs = [funcs] if isinstance(funcs, str) else list(funcs)
        for a in algos:
            if a not in ALGORITHMS:
                problems.append(f"experiments[{idx}]: unknown algorithm {a!r}; "
                                f"valid options: {', '.join(ALGORITHMS)}")
        for f in funcs:
            if f not in function_names():
                problems.append(f"experiments[{idx}]: unknown function {f!r}; "
                                f"valid options: {', '.join(function_names())}")
        agents = int(entry.get("agents", 5))
        iterations = int(entry.get("iterations", 150))
        sigma0 = float(entry.get("sigma0", 0.1))
        seeds = tuple(int(s) for s in entry.get("seeds", default_seeds))
        if agents < 1:
            problems.append(f"experiments[{idx}]: agents must be >= 1")
        if iterations < 1:
            problems.append(f"experiments[{idx}]: iterations must be >= 1")
        if sigma0 < 0:
            problems.append(f"experiments[{idx}]: sigma0 must be >= 0")
        if not seeds:
            problems.append(f"experiments[{idx}]: need at least one seed")
        try:
            kernel = _kernel_from(entry.get("kernel", {}), idx, problems)
            gcfg = _sub_config(GmesConfig, _GMES_KEYS, entry.get("gmes", {}),
                               idx, "gmes", problems)
            bcfg = _sub_config(BaselineConfig, _BASE_KEYS,
                               entry.get("baseline", {}), idx, "baseline",
                               problems)
        except (TypeError, ValueError) as exc:
            problems.append(f"experiments[{idx}]: {exc}")
            continue
        if problems:
            continue
        for a in algos:
            for f in funcs:
                cells.append(ExperimentConfig(
                    algorithm=a, function=f, m=agents, iterations=iterations,
                    sigma0=sigma0, kernel=kernel, gmes=gcfg, baseline=bcfg,
                    seeds=seeds))

    jobs = int(raw.get("jobs", 1))
    if jobs < 1:
        problems.append("jobs must be >= 1")
    if problems:
        raise ConfigError(problems)
    return SweepSpec(cells=cells, output_dir=str(raw.get("output_dir", "results")),
                     jobs=jobs,
                     aggregate_mean=bool(raw.get("aggregate_mean", True)),
                     aggregate_ci=bool(raw.get("aggregate_ci", True)))


def _kernel_from(raw: dict, idx: int, problems: list[str]) -> KernelSpec:
    for key in raw:
        if key not in _KERNEL_KEYS:
            problems.append(f"experiments[{idx}].kernel: unknown key {key!r}")
    jitter = raw.get("jitter")
    return KernelSpec(length_scale=float(raw.get("length_scale", 0.1)),
                      signal_variance=float(raw.get("signal_variance", 1.0)),
                      jitter=None if jitter is None else float(jitter))


def _sub_config(cls, keys, raw: dict, idx: int, name: str, problems: list[str]):
    import dataclasses as _dc

    for key in raw:
        if key not in keys:
            problems.append(f"experiments[{idx}].{name}: unknown key {key!r}")
    defaults = {f.name: f.default for f in _dc.fields(cls)}
    kwargs = {}
    for k in keys:
        if k not in raw:
            continue
        v = raw[k]
        if v is not None:  # coerce by the type of the field's default
            v = int(v) if isinstance(defaults.get(k), int) else float(v)
        kwargs[k] = v
    return cls(**kwargs)


def spec_to_dict(spec: SweepSpec) -> dict:
    """Resolved, JSON-serializable form of a sweep spec."""
    return {
        "output_dir": spec.output_dir,
        "jobs": spec.jobs,
        "aggregate_mean": spec.aggregate_mean,
        "aggregate_ci": spec.aggregate_ci,
        "experiments": [cell_to_dict(c) for c in spec.cells],
    }


def cell_to_dict(cell: ExperimentConfig) -> dict:
    gd = {k: getattr(cell.gmes, k) for k in _GMES_KEYS}
    bd = {k: getattr(cell.baseline, k) for k in _BASE_KEYS}
    return {
        "algorithm": cell.algorithm,
        "function": cell.function,
        "agents": cell.m,
        "iterations": cell.iterations,
        "sigma0": cell.sigma0,
        "seeds": list(cell.seeds),
        "kernel": {k: getattr(cell.kernel, k) for k in _KERNEL_KEYS},
        "gmes": gd,
        "baseline": bd,
    }


# --------------------------------------------------------------------------
# output files
# --------------------------------------------------------------------------


def _atomic_write(path: str, data: str) -> None:
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def run_name(cell: ExperimentConfig, seed: int) -> str:
    return f"{cell.algorithm}_{cell.function}_m{cell.m}_seed{seed}"


def trace_to_csv(trace: RegretTrace) -> str:
    d = trace.inferred.shape[1]
    header = "iter,instant_regret,cumulative_regret,best_value," \
        + ",".join(f"inferred_x{j}" for j in range(d))
    lines = [header]
    for i in range(trace.iters.size):
        row = [str(int(trace.iters[i])), repr(float(trace.instant[i])),
               repr(float(trace.cumulative[i])), repr(float(trace.best_value[i]))]
        row += [repr(float(v)) for v in trace.inferred[i]]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def _run_one(cell: ExperimentConfig, seed: int, outdir: str) -> None:
    trace = run_experiment(cell, seed=seed)
    name = run_name(cell, seed)
    _atomic_write(os.path.join(outdir, name + ".csv"), trace_to_csv(trace))
    sidecar = {
        "run": name,
        "seed": seed,
        "config": cell_to_dict(cell),
        "wall_ms": [float(w) for w in trace.wall_ms],
        "dataset_sizes": [int(s) for s in trace.dataset_sizes],
        "final_instant_regret": float(trace.instant[-1]),
        "final_cumulative_regret": float(trace.cumulative[-1]),
    }
    _atomic_write(os.path.join(outdir, name + ".json"),
                  json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def _load_run_csv(path: str) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def write_aggregate(spec: SweepSpec) -> None:
    """Mean and 95% CI per iteration per cell, recomputed from the run CSVs."""
    lines = ["algorithm,function,agents,iter,instant_mean,instant_ci,"
             "cumulative_mean,cumulative_ci,n_seeds"]
    for cell in spec.cells:
        data = []
        for seed in cell.seeds:
            path = os.path.join(spec.output_dir, run_name(cell, seed) + ".csv")
            if os.path.exists(path):
                data.append(_load_run_csv(path))
        if not data:
            continue
        stack = np.stack(data)  # (runs, iters, cols)
        n = stack.shape[0]
        inst, cum = stack[:, :, 1], stack[:, :, 2]
        inst_m, cum_m = inst.mean(axis=0), cum.mean(axis=0)
        if n > 1:
            inst_ci = 1.96 * inst.std(axis=0, ddof=1) / np.sqrt(n)
            cum_ci = 1.96 * cum.std(axis=0, ddof=1) / np.sqrt(n)
        else:
            inst_ci = np.zeros_like(inst_m)
            cum_ci = np.zeros_like(cum_m)
        for i in range(inst_m.size):
            lines.append(f"{cell.algorithm},{cell.function},{cell.m},{i},"
                         f"{float(inst_m[i])!r},{float(inst_ci[i])!r},"
                         f"{float(cum_m[i])!r},{float(cum_ci[i])!r},{n}")
    _atomic_write(os.path.join(spec.output_dir, "aggregate.csv"),
                  "\n".join(lines) + "\n")


def write_plots(spec: SweepSpec) -> None:
    """Instant and cumulative regret SVGs, one line per algorithm."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups: dict[tuple[str, int], list[ExperimentConfig]] = {}
    for cell in spec.cells:
        groups.setdefault((cell.function, cell.m), []).append(cell)
    for (func, m), cells in groups.items():
        for kind, col in (("instant", 1), ("cumulative", 2)):
            fig, ax = plt.subplots(figsize=(6, 4))
            for cell in cells:
                data = []
                for seed in cell.seeds:
                    path = os.path.join(spec.output_dir,
                                        run_name(cell, seed) + ".csv")
                    if os.path.exists(path):
                        data.append(_load_run_csv(path))
                if not data:
                    continue
                stack = np.stack(data)
                vals = stack[:, :, col]
                mean = vals.mean(axis=0)
                it = np.arange(mean.size)
                ax.plot(it, mean, label=cell.algorithm)
                if spec.aggregate_ci and stack.shape[0] > 1:
                    ci = 1.96 * vals.std(axis=0, ddof=1) / np.sqrt(stack.shape[0])
                    ax.fill_between(it, mean - ci, mean + ci, alpha=0.2)
            ax.set_xlabel("iteration")
            ax.set_ylabel(f"{kind} regret")
            ax.set_title(f"{func}, m={m}")
            ax.legend()
            fig.tight_layout()
            out = os.path.join(spec.output_dir, f"{func}_m{m}_{kind}.svg")
            fig.savefig(out, format="svg")
            plt.close(fig)


def run_sweep(spec: SweepSpec) -> int:
    """Execute every (cell, seed) job; 0 on success, 2 if any run failed."""
    os.makedirs(spec.output_dir, exist_ok=True)
    _atomic_write(os.path.join(spec.output_dir, "sweep.json"),
                  json.dumps(spec_to_dict(spec), indent=2, sort_keys=True) + "\n")
    jobs = [(cell, seed) for cell in spec.cells for seed in cell.seeds]
    failures = []
    if spec.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=spec.jobs) as ex:
            futs = {ex.submit(_run_one, cell, seed, spec.output_dir):
                    (cell, seed) for cell, seed in jobs}
            for fut in concurrent.futures.as_completed(futs):
                cell, seed = futs[fut]
                try:
                    fut.result()
                except Exception as exc:
                    failures.append({"run": run_name(cell, seed), "error": str(exc)})
    else:
        for cell, seed in jobs:
            try:
                _run_one(cell, seed, spec.output_dir)
            except Exception as exc:
                failures.append({"run": run_name(cell, seed), "error": str(exc)})
    write_aggregate(spec)
    write_plots(spec)
    if failures:
        _atomic_write(os.path.join(spec.output_dir, "failures.json"),
                      json.dumps(sorted(failures, key=lambda f: f["run"]),
                                 indent=2) + "\n")
        return 2
    return 0


# --------------------------------------------------------------------------
# entry points
# --------------------------------------------------------------------------


def _apply_overrides(spec: SweepSpec, args) -> SweepSpec:
    if args.out:
        spec.output_dir = args.out
    if args.jobs:
        spec.jobs = args.jobs
    if args.seed_offset:
        spec.cells = [replace(c, seeds=tuple(s + args.seed_offset
                                             for s in c.seeds))
                      for c in spec.cells]
    return spec


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gmes",
        description="Multi-agent Bayesian-optimization benchmarks and "
                    "source-seeking simulation")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, desc in (("run", "run a full sweep from a config file"),
                       ("bench", "run the first cell/seed, print final regret"),
                       ("validate", "validate a config and print it resolved")):
        p = sub.add_parser(name, help=desc)
        p.add_argument("config")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--jobs", type=int, default=None, help="parallel runs")
        p.add_argument("--seed-offset", type=int, default=0,
                       help="added to every seed in the spec")

    ps = sub.add_parser("seek", help="run a source-seeking simulation")
    ps.add_argument("scenario",
                    help=f"scenario file or preset: {', '.join(scenario_names())}")
    ps.add_argument("--agents", type=int, default=4)
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--out", default=None, help="output directory")
    ps.add_argument("--iters", type=int, default=60, help="iteration cap")

    args = parser.parse_args(argv)

    if args.command == "seek":
        return _cmd_seek(args)

    try:
        spec = _apply_overrides(parse_config(args.config), args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 1

    if args.command == "validate":
        print(json.dumps(spec_to_dict(spec), indent=2, sort_keys=True))
        return 0
    if args.command == "bench":
        if not spec.cells:
            print("config error: no cells", file=sys.stderr)
            return 1
        cell = spec.cells[0]
        try:
            trace = run_experiment(cell, seed=cell.seeds[0])
        except GmesError as exc:
            print(f"run failed: {exc}", file=sys.stderr)
            return 2
        print(f"{cell.algorithm} on {cell.function} (m={cell.m}, "
              f"T={cell.iterations}, seed={cell.seeds[0]}): "
              f"final instant regret {trace.instant[-1]:.6g}, "
              f"final cumulative regret {trace.cumulative[-1]:.6g}")
        return 0
    return run_sweep(spec)


def _cmd_seek(args) -> int:
    name = args.scenario
    try:
        if os.path.exists(name):
            fld, starts = load_scenario(name)
            label = os.path.splitext(os.path.basename(name))[0]
        else:
            fld, starts = make_scenario(name)
            label = name.lower()
    except (KeyError, ConfigError, OSError, yaml.YAMLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    safety = SafetyConfig()
    cfg = GmesConfig(restarts=8, ucb_maxiter=60)
    started = time.perf_counter()
    try:
        result = run_seek(fld, args.agents, cfg, safety, args.seed,
                          starts=starts, t_max=args.iters)
    except GmesError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 2
    outdir = args.out or "results"
    os.makedirs(outdir, exist_ok=True)
    base = os.path.join(outdir, f"seek_{label}_m{args.agents}_seed{args.seed}")
    header = "t,robot_id,x,y,heading,v,target_x,target_y"
    rows = [header] + [",".join(repr(float(v)) for v in row)
                       for row in result.trajectory]
    _atomic_write(base + ".csv", "\n".join(rows) + "\n")
    summary = {
        "scenario": label,
        "agents": args.agents,
        "seed": args.seed,
        "converged": result.converged,
        "iterations_to_converge": result.iterations_to_converge,
        "sim_time_s": result.sim_time_s,
        "min_separation_m": (None if result.min_separation == float("inf")
                             else result.min_separation),
        "stalls": result.stalls,
        "wall_s": time.perf_counter() - started,
    }
    _atomic_write(base + ".json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"{label} m={args.agents} seed={args.seed}: "
          f"converged={result.converged} in {result.iterations_to_converge} "
          f"iterations, {result.sim_time_s:.1f} s simulated")
    return 0


if __name__ == "__main__":
    sys.exit(main())
