"""Command-line experiment runner.

    sparkle run    --config exp.yaml [--seed N] [--out DIR] [--threads N]
    sparkle sweep  --config exp.yaml --axis strategy --values ed,extra,dgd
    sparkle verify --config exp.yaml

Exit codes: 0 success, 1 a verify check failed, 2 configuration error,
3 divergence.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import re
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from .config import ConfigError, ExperimentConfig
from .engine import (
    LEVELS,
    DivergenceError,
    Hyperparams,
    RunConfig,
    init_state,
    make_levels,
    run,
    step_generic,
    step_recursive,
)
from .hypergrad import fd_hypergradient, mean_oracle, reference_solution
from .metrics import CSV_COLUMNS, running_average
from .problems import make_policy_eval, make_single_level, make_synthetic_bilevel
from .reference import single_level_trace
from .rng import replicate_seed
from .strategy import Strategy
from .topology import build_topology, load_matrix, validate_mixing

log = logging.getLogger("sparkle")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

AXIS_PATHS = {
    "n": "problem.n",
    "theta": "hyperparams.theta",
    "alpha": "hyperparams.alpha",
    "beta": "hyperparams.beta",
    "gamma": "hyperparams.gamma",
    "batch_size": "hyperparams.batch_size",
}


# -------------------------------------------------------------------- csv


def format_value(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return format(float(value), ".17g")


class CsvSink:
    """Writes rows as they arrive so a diverged run still leaves its prefix."""

    def __init__(self, path: Path, columns: Sequence[str] = CSV_COLUMNS):
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(columns)
        self.path = path

    def __call__(self, row) -> None:
        values = row.as_tuple() if hasattr(row, "as_tuple") else row
        self._writer.writerow([format_value(v) for v in values])

    def close(self) -> None:
        self._fh.close()


# ------------------------------------------------------------------- runs


def resolve_threads(cli_value: Optional[int], cfg: ExperimentConfig) -> int:
    if cli_value is not None:
        return cli_value
    env = os.environ.get("SPARKLE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError("SPARKLE_THREADS", f"expected an integer, got {env!r}") from None
    return cfg.run["threads"]


@dataclass
class ReplicateResult:
    path: Path
    rows: list
    diverged: Optional[str] = None


def run_replicates(cfg: ExperimentConfig, out_dir: Path, threads: int) -> list[ReplicateResult]:
    problem = cfg.build_problem()
    levels = cfg.build_levels()
    hp = cfg.hyperparams_obj()
    results = []
    x_hat = None
    for r in range(cfg.run["replicates"]):
        path = out_dir / f"{cfg.run['name']}_r{r}.csv"
        rows: list = []
        sink = CsvSink(path)
        rc = RunConfig(
            levels, hp,
            seed=replicate_seed(cfg.run["master_seed"], r),
            metrics_stride=cfg.run["metrics_stride"],
            engine=cfg.run["engine"],
            threads=threads,
            wall_clock=cfg.run["wall_clock"],
            check_identities=False,
            record_initial=False,
        )

        def on_row(row, rows=rows, sink=sink):
            rows.append(row)
            sink(row)

        try:
            res = run(problem, rc, x_hat=x_hat, on_row=on_row)
            x_hat = res.x_hat
            results.append(ReplicateResult(path, rows))
        except DivergenceError as exc:
            results.append(ReplicateResult(path, rows, str(exc)))
        finally:
            sink.close()
    return results


def cmd_run(cfg: ExperimentConfig, out_dir: Path, threads: int) -> int:
    cfg.validate()
    status = EXIT_OK
    for res in run_replicates(cfg, out_dir, threads):
        if res.diverged:
            print(f"diverged: {res.diverged} ({res.path})", file=sys.stderr)
            status = EXIT_DIVERGED
        else:
            print(res.path)
    return status


# ------------------------------------------------------------------ sweep


def _slug(value) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", str(value))


def point_config(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "strategy":
        return cfg.replace(strategy=value)
    if axis == "topology":
        return cfg.replace(topology={"kind": value})
    if axis == "rho":
        return cfg.replace(topology={"kind": "ring_adjusted", "rho": value})
    return cfg.replace(**{AXIS_PATHS.get(axis, axis): value})


SUMMARY_COLUMNS = ("axis", "value", "status", "replicates", "running_average", "final_grad_phi_sq", "final_cons_x")


def cmd_sweep(cfg: ExperimentConfig, out_dir: Path, threads: int, axis: str, values: Sequence) -> int:
    points = []
    for value in values:
        try:
            point = point_config(cfg, axis, value)
            point.validate()
        except ConfigError as exc:
            raise ConfigError(f"sweep[{axis}={value}].{exc.key}", str(exc).split(": ", 1)[-1]) from None
        points.append((value, point))

    status = EXIT_OK
    summary = CsvSink(out_dir / "summary.csv", SUMMARY_COLUMNS)
    try:
        for value, point in points:
            results = run_replicates(point, out_dir / f"{_slug(axis)}={_slug(value)}", threads)
            diverged = [r for r in results if r.diverged]
            if diverged:
                status = EXIT_DIVERGED
                print(f"{axis}={value}: diverged: {diverged[0].diverged}", file=sys.stderr)
                summary((axis, value, "diverged", len(results), math.nan, math.nan, math.nan))
                continue
            avg = float(np.mean([running_average(r.grad_phi_sq for r in res.rows) for res in results]))
            final = float(np.mean([res.rows[-1].grad_phi_sq for res in results]))
            cons = float(np.mean([res.rows[-1].cons_x for res in results]))
            summary((axis, value, "ok", len(results), avg, final, cons))
            print(f"{axis}={value}: running_average={avg:.6g}")
    finally:
        summary.close()
    return status


# ----------------------------------------------------------------- verify


@dataclass
class Check:
    name: str
    status: str  # PASS, FAIL or SKIP
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.status:4s} {self.name}" + (f": {self.detail}" if self.detail else "")


def _raw_matrix(topo: dict, n: int) -> np.ndarray:
    params = dict(topo)
    kind = params.pop("kind")
    if kind == "custom":
        return load_matrix(params["path"])
    return np.array(build_topology(kind, n, **params).w)


def check_matrices(cfg: ExperimentConfig) -> list[Check]:
    out = []
    n = cfg.problem["n"]
    for lvl in LEVELS:
        try:
            w = _raw_matrix(cfg.topology[lvl], n)
        except (OSError, ValueError) as exc:
            out.append(Check(f"matrix[{lvl}]", "FAIL", str(exc)))
            continue
        failed = [c.name for c in validate_mixing(w) if not c.passed and not c.informational]
        if w.shape[0] != n:
            failed.append(f"size {w.shape[0]} != n={n}")
        out.append(Check(f"matrix[{lvl}]", "FAIL" if failed else "PASS", ", ".join(failed)))
    return out


def equivalence_gap(problem, levels, hp: Hyperparams, iterations: int = 200) -> float:
    """Largest elementwise gap between the two steppers over a deterministic run."""
    hp = Hyperparams(hp.alpha, hp.beta, hp.gamma, hp.theta, iterations, 1, "deterministic")
    problem = problem.with_mode("deterministic")
    a = b = init_state(problem.n, problem.p, problem.q)
    worst = 0.0
    for _ in range(iterations):
        a = step_generic(a, problem, levels, hp)
        b = step_recursive(b, problem, levels, hp)
        for name in ("x", "y", "z", "r"):
            worst = max(worst, float(np.max(np.abs(getattr(a, name) - getattr(b, name)))))
    return worst


def equivalence_tolerance(levels) -> float:
    tight = {Strategy.ED, Strategy.EXTRA, Strategy.ATC_GT}
    return 1e-9 if all(levels[l].strategy in tight for l in LEVELS) else 1e-8


def check_equivalence(cfg: ExperimentConfig) -> Check:
    levels = cfg.build_levels()
    if any(not levels[l].strategy.corrected for l in LEVELS):
        return Check("engine-equivalence", "SKIP", "dgd has no recursive form")
    try:
        gap = equivalence_gap(cfg.build_problem(), levels, cfg.hyperparams_obj())
    except DivergenceError as exc:
        return Check("engine-equivalence", "FAIL", str(exc))
    tol = equivalence_tolerance(levels)
    return Check("engine-equivalence", "PASS" if gap <= tol else "FAIL", f"max |diff| {gap:.3g} (tol {tol:g})")


def mini_instance(family: str):
    if family == "synthetic":
        return make_synthetic_bilevel(n=3, p=3, q=3, seed=1, mode="deterministic")
    if family == "policy_eval":
        return make_policy_eval(n=3, num_states=5, m=3, seed=1, mode="deterministic")
    return make_single_level(n=3, p=3, seed=1, mode="deterministic")


def check_hypergradient(cfg: ExperimentConfig, probes: int = 20, seed: int = 0) -> Check:
    inst = mini_instance(cfg.problem["family"])
    rng = np.random.default_rng(seed)
    worst_rel = worst_res = 0.0
    for _ in range(probes):
        x = rng.standard_normal(inst.p)
        ref = reference_solution(inst, x)
        fd = fd_hypergradient(inst, x)
        rel = np.linalg.norm(ref.grad_phi - fd) / max(1.0, np.linalg.norm(ref.grad_phi))
        mo = mean_oracle(inst, x, ref.y_star)
        worst_rel = max(worst_rel, float(rel))
        worst_res = max(worst_res, float(np.linalg.norm(mo.h_mat @ ref.z_star - mo.b)))
    ok = worst_rel <= 1e-4 and worst_res <= 1e-10
    return Check("hypergradient-vs-fd", "PASS" if ok else "FAIL",
                 f"max rel err {worst_rel:.3g}, max z* residual {worst_res:.3g}")


def check_single_level(cfg: ExperimentConfig, steps: int = 100) -> Check:
    strategy = cfg.strategy["x"]
    mix = cfg.build_mixings()["x"]
    n = mix.n
    inst = make_single_level(n=n, p=5, seed=cfg.run["master_seed"])
    hp = cfg.hyperparams_obj()
    hp = Hyperparams(hp.alpha, hp.beta, hp.gamma, 1.0, steps, 1, "stochastic")
    levels = make_levels(strategy, mix, pd_shift=cfg.hyperparams["pd_shift"])
    seed = cfg.run["master_seed"]
    ref = single_level_trace(inst.inner, strategy, mix, hp.alpha, steps, seed=seed,
                             pd_shift=cfg.hyperparams["pd_shift"])
    st = init_state(n, inst.p, inst.q)
    gap = lower = 0.0
    for k in range(steps):
        st = step_generic(st, inst, levels, hp, seed=seed)
        gap = max(gap, float(np.max(np.abs(st.x - ref[k + 1]))))
        lower = max(lower, float(np.max(np.abs(st.y)) + np.max(np.abs(st.z))))
    ok = gap <= 1e-12 and lower == 0.0
    return Check("single-level-degeneration", "PASS" if ok else "FAIL",
                 f"x-trace gap {gap:.3g}, max |y|+|z| {lower:.3g}")


def cmd_verify(cfg: ExperimentConfig) -> int:
    checks = check_matrices(cfg)
    if all(c.status == "PASS" for c in checks):
        checks.append(check_equivalence(cfg))
        checks.append(check_hypergradient(cfg))
        checks.append(check_single_level(cfg))
    else:
        checks.append(Check("remaining checks", "SKIP", "matrix validation failed"))
    for c in checks:
        print(c)
    return EXIT_CHECK if any(c.status == "FAIL" for c in checks) else EXIT_OK


# ------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparkle", description="Decentralized bilevel optimization simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="YAML experiment file (defaults when omitted)")
        p.add_argument("--seed", type=int, help="override run.master_seed")
        p.add_argument("--out", type=Path, help="override run.output")
        p.add_argument("--threads", type=int, help="oracle worker threads (env SPARKLE_THREADS)")
        p.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("run", help="run one experiment, one CSV per replicate"))
    sweep = sub.add_parser("sweep", help="run one experiment per value of an axis")
    common(sweep)
    sweep.add_argument("--axis", required=True,
                       help="strategy, topology, rho, n, theta, alpha, beta, gamma, batch_size or a dotted config path")
    sweep.add_argument("--values", required=True, help="comma-separated values")
    common(sub.add_parser("verify", help="matrix, equivalence, hypergradient and degeneration checks"))
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_dict({})
    overrides = {}
    if args.seed is not None:
        overrides["run.master_seed"] = args.seed
    if args.out is not None:
        overrides["run.output"] = str(args.out)
    return cfg.replace(**overrides) if overrides else cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads", "must be >= 1")
        threads = resolve_threads(args.threads, cfg)
        out_dir = Path(cfg.run["output"])
        if args.command == "run":
            return cmd_run(cfg, out_dir, threads)
        if args.command == "sweep":
            values = [yaml.safe_load(v) for v in args.values.split(",") if v.strip()]
            if not values:
                raise ConfigError("--values", "empty value list")
            return cmd_sweep(cfg, out_dir, threads, args.axis, values)
        return cmd_verify(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
