"""Experiment harness and command-line entry point.

Instance files are JSON::

    {
      "instance": {"case_kind": "uniform", "num_contents": 3, "num_users": 2,
                   "cached": [1, 2], "caps": [6, 6, 6], "fetch_base": 3.0,
                   "power": 2.0, "weight_fetch": 1.0, "weight_power": 1.0},
      "arrivals": {"kind": "per_user_zipf", "alpha": 0.75},
      "base_policy": "zipf",
      "experiment": {...},
      "timing": {...}
    }

``arrivals.kind`` is ``per_user_zipf`` (``alpha``), ``independent``
(``per_queue``: one ``{value: prob}`` map per queue in content-major order)
or ``markov`` (``states`` and ``transition``).  ``base_policy`` is ``zipf``
(Zipf over contents with the arrival exponent, or ``base_alpha``) or an
explicit probability vector.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import approx, policies, sim, solvers
from .arrivals import (MarkovArrivalModel, independent_product, per_user_zipf_arrivals)
from .errors import CapacityError
from .model import DEFAULT_MAX_STATES, StateSpace, SystemConfig

SCHEMA_VERSION = 1
AXES = ("weight_fetch", "weight_power", "alpha", "num_users", "threshold")
POLICIES = ("optimal", "ssa", "random", "lqf", "myopic", "threshold")
TIMED = ("rvia", "srvia", "pia", "spia", "ssa")


def build_arrivals(spec, config):
    kind = spec.get("kind", "per_user_zipf")
    if kind == "per_user_zipf":
        return per_user_zipf_arrivals(config, float(spec.get("alpha", 0.75)),
                                      max_support=int(spec.get("max_support", 100_000)))
    if kind == "independent":
        shape = config.queue_shape
        return independent_product(spec["per_queue"], shape)
    if kind == "markov":
        return MarkovArrivalModel(np.asarray(spec["states"]), np.asarray(spec["transition"]))
    raise ValueError(f"unknown arrival kind {kind!r}")


def build_base(spec, arrivals_spec, config):
    if spec is None or spec == "zipf":
        alpha = float(arrivals_spec.get("base_alpha", arrivals_spec.get("alpha", 0.75)))
        return approx.BasePolicy.zipf(config.num_contents, alpha)
    return approx.BasePolicy(np.asarray(spec, dtype=float))


@dataclass
class ExperimentSpec:
    """One sweep: an instance, axes to vary, policies to compare and how to
    evaluate them."""

    instance: dict
    arrivals: dict = field(default_factory=lambda: {"kind": "per_user_zipf", "alpha": 0.75})
    base_policy: object = "zipf"
    sweep: dict = field(default_factory=dict)
    policies: list = field(default_factory=lambda: ["optimal", "ssa", "lqf", "myopic"])
    evaluation: str = "exact"
    solver: str = "srvia"
    threshold_fallback: str = "idle"
    horizon: int = 100_000
    warmup: int | None = None
    replications: int = 10
    seed: int = 0
    max_states: int = DEFAULT_MAX_STATES
    workers: int = 1
    out: str | None = None

    def __post_init__(self):
        unknown = set(self.sweep) - set(AXES)
        if unknown:
            raise ValueError(f"unknown sweep axes {sorted(unknown)}; choose from {AXES}")
        for name, grid in self.sweep.items():
            if len(grid) == 0:
                raise ValueError(f"sweep axis {name!r} is empty")
        bad = set(self.policies) - set(POLICIES)
        if bad or not self.policies:
            raise ValueError(f"policies must be a non-empty subset of {POLICIES}")
        if self.evaluation not in ("exact", "simulate"):
            raise ValueError("evaluation must be 'exact' or 'simulate'")
        if "threshold" in self.policies and "threshold" not in self.sweep:
            raise ValueError("the threshold policy needs a threshold sweep axis")
        SystemConfig.from_dict(self.instance)

    @classmethod
    def from_raw(cls, raw, **overrides):
        exp = dict(raw.get("experiment", {}))
        sim_opts = exp.pop("simulation", {})
        fields = dict(instance=raw.get("instance", raw), arrivals=raw.get("arrivals", {}),
                      base_policy=raw.get("base_policy", "zipf"), **exp, **sim_opts)
        fields.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**fields)

    def grid(self):
        axes = [a for a in AXES if a in self.sweep]
        for values in itertools.product(*(self.sweep[a] for a in axes)):
            yield dict(zip(axes, values))


def _point_instance(spec, point):
    inst = dict(spec.instance)
    arr = dict(spec.arrivals)
    for key in ("weight_fetch", "weight_power"):
        if key in point:
            inst[key] = float(point[key])
    if "alpha" in point:
        arr["alpha"] = float(point["alpha"])
    if "num_users" in point:
        if inst.get("case_kind", "uniform") != "uniform":
            raise ValueError("the num_users axis is only supported for uniform instances")
        inst["num_users"] = int(point["num_users"])
    config = SystemConfig.from_dict(inst)
    return config, arr


def _evaluate_point(args):
    spec, index, point = args
    config, arr_spec = _point_instance(spec, point)
    arrivals = build_arrivals(arr_spec, config)
    if isinstance(arrivals, MarkovArrivalModel):
        raise ValueError("experiments need i.i.d. arrivals; use `solve` for Markov models")
    base = build_base(spec.base_policy, arr_spec, config)
    exact = spec.evaluation == "exact"
    tabular = config.num_states <= spec.max_states
    if not tabular and (exact or "optimal" in spec.policies or "threshold" in spec.policies):
        raise CapacityError(
            f"grid point {index} {point}: {config.num_states} states exceed the bound "
            f"{spec.max_states}", required=config.num_states, limit=spec.max_states)
    rows, reps = [], []
    for name in spec.policies:
        if name == "optimal":
            handle = solvers.solve(config, arrivals, spec.solver).policy
        elif name == "ssa":
            handle = (approx.ssa(config, arrivals, base).policy if tabular
                      else approx.SSAPolicy.build(config, arrivals, base))
        elif name == "random":
            handle = policies.baseline_random(base)
        elif name == "lqf":
            handle = policies.baseline_lqf(config) if tabular else policies.RulePolicy("lqf")
        elif name == "myopic":
            handle = (policies.baseline_myopic(config) if tabular
                      else policies.RulePolicy("myopic"))
        else:
            handle = policies.baseline_threshold(config, point["threshold"],
                                                 fallback=spec.threshold_fallback)
        label = {"point": index, **{a: point.get(a, "") for a in AXES}, "policy": name}
        if exact:
            cost = sim.exact_average_cost(handle, config, arrivals, max_states=spec.max_states)
            rows.append({**label, **cost.as_dict(), "service": cost.service, "stderr_total": ""})
        else:
            opts = sim.SimOptions(spec.horizon, spec.warmup, spec.replications, spec.seed)
            res = sim.simulate(handle, config, arrivals, opts, max_states=spec.max_states)
            rows.append({**label, **res.mean.as_dict(), "service": res.mean.service,
                         "stderr_total": res.stderr.total})
            reps.extend(res.rows(**label))
    return rows, reps


def write_csv(rows, path, kind):
    """CSV with a schema comment line; floats written with ``repr`` for
    byte-identical reruns."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# cachecast {kind} schema {SCHEMA_VERSION}\n")
        if not rows:
            return path
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for k, v in r.items()})
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def run_experiment(spec):
    """Evaluate every policy at every grid point, in grid order.

    Returns ``(rows, replication_rows)`` and writes ``experiment.csv`` (and
    ``replications.csv`` when simulating) under ``spec.out`` if given.
    """
    jobs = [(spec, i, p) for i, p in enumerate(spec.grid())]
    if spec.workers > 1:
        with ProcessPoolExecutor(spec.workers) as pool:
            results = list(pool.map(_evaluate_point, jobs))
    else:
        results = [_evaluate_point(j) for j in jobs]
    rows = [r for res in results for r in res[0]]
    reps = [r for res in results for r in res[1]]
    if spec.out:
        write_csv(rows, Path(spec.out) / "experiment.csv", "experiment")
        if reps:
            write_csv(reps, Path(spec.out) / "replications.csv", "replications")
    return rows, reps


def _run_solver(name, config, arrivals, base):
    if name == "ssa":
        rep = approx.ssa(config, arrivals, base)
        return rep, [rep.performed], [rep.skipped], None
    rep = solvers.solve(config, arrivals, name)
    return rep, rep.performed, rep.skipped, rep.average_cost


def run_timing_comparison(config, arrivals, base, solver_names=TIMED, repeats=5, out=None):
    """Median wall-clock of each solver over ``repeats`` runs (after one
    untimed warm-up run that also compiles the kernels), plus its
    structured-skip counters."""
    bad = set(solver_names) - set(TIMED)
    if bad:
        raise ValueError(f"unknown solvers {sorted(bad)}; choose from {TIMED}")
    rows = []
    for name in solver_names:
        _run_solver(name, config, arrivals, base)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            rep, performed, skipped, theta = _run_solver(name, config, arrivals, base)
            times.append(time.perf_counter() - t0)
        later_p, later_s = sum(performed[1:]), sum(skipped[1:])
        rows.append({
            "solver": name,
            "median_seconds": statistics.median(times),
            "repeats": repeats,
            "iterations": len(performed),
            "performed": int(sum(performed)),
            "skipped": int(sum(skipped)),
            "skip_fraction_after_first": later_s / (later_p + later_s) if later_p + later_s else 0.0,
            "average_cost": "" if theta is None else theta,
        })
    if out:
        write_csv(rows, Path(out) / "timing.csv", "timing")
    return rows


def dump_policy(policy, config, path, *, slice_queue=None):
    """Write ``policy.csv`` under directory ``path``; add ``curves.csv`` for a
    uniform policy with switch structure, or one ``slice_<queue>_<v>.csv``
    per value of ``slice_queue`` for a nonuniform policy with partial switch
    structure.  Returns the written paths."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "policy.csv"]
    policies.write_policy_csv(policy, config, written[0])
    if config.is_uniform:
        if not policies.verify_switch_structure(policy, config):
            written.append(out / "curves.csv")
            policies.write_curves_csv(policies.extract_switch_curves(policy, config), config,
                                      written[-1])
        return written
    if policies.verify_partial_switch_structure(policy, config):
        return written
    names = policies._queue_names(config)
    d = names.index(slice_queue) if slice_queue else config.num_users
    states = StateSpace(config, max_states=None).states
    table = np.asarray(policy)
    others = [n for i, n in enumerate(names) if i != d]
    for v in range(int(config.caps.ravel()[d]) + 1):
        p = out / f"slice_{names[d]}_{v}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(others + ["action"])
            for i in np.flatnonzero(states[:, d] == v):
                w.writerow(np.delete(states[i], d).tolist() + [int(table[i])])
        written.append(p)
    return written


def _load(path):
    raw = json.loads(Path(path).read_text())
    config = SystemConfig.from_dict(raw.get("instance", raw))
    arr_spec = raw.get("arrivals", {"kind": "per_user_zipf", "alpha": 0.75})
    return raw, config, arr_spec


def _solve(config, arrivals, solver, max_states):
    if config.num_states * getattr(arrivals, "num_states", 1) > max_states:
        raise CapacityError(f"{config.num_states} queue states exceed the bound {max_states}",
                            required=config.num_states, limit=max_states)
    if isinstance(arrivals, MarkovArrivalModel):
        opts = solvers.SolveOptions(structured=solver.startswith("s"))
        return solvers.solve_markov_modulated(config, arrivals, opts)
    return solvers.solve(config, arrivals, solver)


def cmd_solve(args):
    raw, config, arr_spec = _load(args.config)
    arrivals = build_arrivals(arr_spec, config)
    rep = _solve(config, arrivals, args.solver, args.max_states)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep.save(out / "report.json")
    write_csv(rep.counter_rows(), out / "counters.csv", "counters")
    policies.write_policy_csv(rep.policy, config, out / "policy.csv",
                              getattr(arrivals, "num_states", 1))
    print(f"{rep.solver}: average cost {rep.average_cost:.10g} after {rep.iterations} "
          f"iterations ({'converged' if rep.converged else 'NOT converged'})")
    return 0


def cmd_experiment(args):
    raw = json.loads(Path(args.config).read_text())
    spec = ExperimentSpec.from_raw(raw, seed=args.seed, max_states=args.max_states,
                                   out=args.out, solver=args.solver, workers=args.workers)
    rows, _ = run_experiment(spec)
    print(f"wrote {len(rows)} rows to {Path(args.out) / 'experiment.csv'}")
    return 0


def cmd_timing(args):
    raw, config, arr_spec = _load(args.config)
    if config.num_states > args.max_states:
        raise CapacityError(f"{config.num_states} states exceed the bound {args.max_states}",
                            required=config.num_states, limit=args.max_states)
    arrivals = build_arrivals(arr_spec, config)
    base = build_base(raw.get("base_policy"), arr_spec, config)
    timing = raw.get("timing", {})
    names = args.solver.split(",") if args.solver_given else timing.get("solvers", TIMED)
    rows = run_timing_comparison(config, arrivals, base, names,
                                 args.repeats or timing.get("repeats", 5), args.out)
    for r in rows:
        print(f"{r['solver']:>6}: {r['median_seconds'] * 1e3:9.3f} ms  "
              f"skipped {r['skip_fraction_after_first']:.1%} after the first iteration")
    return 0


def cmd_dump_policy(args):
    raw, config, arr_spec = _load(args.config)
    arrivals = build_arrivals(arr_spec, config)
    if args.solver == "ssa":
        base = build_base(raw.get("base_policy"), arr_spec, config)
        policy = approx.ssa(config, arrivals, base, max_states=args.max_states).policy
    else:
        policy = _solve(config, arrivals, args.solver, args.max_states).policy
    for p in dump_policy(policy, config, args.out, slice_queue=args.slice):
        print(p)
    return 0


def cmd_verify(args):
    raw, config, arr_spec = _load(args.config)
    arrivals = build_arrivals(arr_spec, config)
    L = getattr(arrivals, "num_states", 1)
    found = {}
    found[args.solver] = _solve(config, arrivals, args.solver, args.max_states).policy
    if L == 1:
        base = build_base(raw.get("base_policy"), arr_spec, config)
        found["ssa"] = approx.ssa(config, arrivals, base, max_states=args.max_states).policy
    status = 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, policy in found.items():
        violations = policies.verify_structure(policy, config, L)
        policies.write_violations_csv(violations, out / f"violations_{name}.csv")
        print(f"{name}: {len(violations)} structure violations")
        status |= bool(violations)
    return int(status)


def make_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON instance file")
    common.add_argument("--out", default="results", help="output directory")
    common.add_argument("--seed", type=int, default=0, help="unsigned 64-bit seed")
    common.add_argument("--solver", default=None,
                        help="rvia, srvia, pia or spia (timing: comma-separated list)")
    common.add_argument("--max-states", type=int, default=DEFAULT_MAX_STATES,
                        help="refuse state spaces larger than this")
    parser = argparse.ArgumentParser(prog="cachecast",
                                     description="Multicast scheduling MDP toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="solve an instance exactly")
    exp = sub.add_parser("experiment", parents=[common], help="run a policy comparison sweep")
    exp.add_argument("--workers", type=int, default=1)
    tim = sub.add_parser("timing", parents=[common], help="time the solvers")
    tim.add_argument("--repeats", type=int, default=None)
    dump = sub.add_parser("dump-policy", parents=[common], help="write policy and curve CSVs")
    dump.add_argument("--slice", default=None, help="queue to slice on (nonuniform), e.g. q2_1")
    sub.add_parser("verify", parents=[common], help="check switch structure of solved policies")
    return parser


COMMANDS = {"solve": cmd_solve, "experiment": cmd_experiment, "timing": cmd_timing,
            "dump-policy": cmd_dump_policy, "verify": cmd_verify}


def main(argv=None):
    args = make_parser().parse_args(argv)
    args.solver_given = args.solver is not None
    if args.solver is None:
        args.solver = "srvia"
    if not 0 <= args.seed < 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except (CapacityError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
