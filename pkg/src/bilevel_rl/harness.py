"""Run orchestration: problems from configs, single runs, sweeps and Phi lattices."""

from __future__ import annotations

import csv
import itertools
import logging
import os
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .actor_critic import DivergenceError, Evaluator, RunResult, run
from .baselines import run_baseline
from .config import RunConfig, build, sweep_cells
from .envs.gridworld import GridWorldSpec
from .envs.preference import PreferenceProblemSpec
from .oracles import ExactOracles
from .trace import TraceWriter, format_real

log = logging.getLogger(__name__)

OUT_ENV = "BILEVEL_RL_OUT"


def output_dir(flag: str | None = None) -> Path:
    return Path(flag or os.environ.get(OUT_ENV) or "out")


def build_problem(rc: RunConfig):
    e = rc.env
    if rc.environment == "gridworld":
        return GridWorldSpec(e["width"], e["height"], e["gamma"], e["lambda"],
                             normalize_reward=e["normalize_reward"]).build()
    tr = None if e["true_reward"] is None else tuple(e["true_reward"])
    return PreferenceProblemSpec(e["num_states"], e["gamma"], e["slip"], e["trajectory_len"],
                                 e["pairs_per_eval"], e["x_bound"], tr).build()


def execute(rc: RunConfig, on_record=None, problem=None) -> RunResult:
    """Run one configuration; ``on_record`` sees each checkpoint as it is made."""
    problem = problem or build_problem(rc)
    evaluator = Evaluator(ExactOracles(problem, rc.oracle), **rc.evaluation)
    common = dict(seed=rc.seed, options=rc.options, evaluator=evaluator, cadence=rc.cadence,
                  on_record=on_record)
    if rc.algorithm == "proposed":
        return run(problem, rc.schedules, rc.iterations, **common)
    return run_baseline(problem, rc.schedules, rc.baseline, rc.iterations, **common)


def run_to_file(rc: RunConfig, path) -> RunResult:
    """Stream the trace of one run to ``path``; rows written so far survive errors."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    problem = build_problem(rc)
    with open(path, "w", newline="") as fh:
        writer = TraceWriter(fh, problem.dim_x)
        return execute(rc, writer.write, problem)


@dataclass
class CellOutcome:
    index: int
    assignment: dict
    path: str
    status: str
    final: object = None
    error: str = ""


def _run_cell(index, assignment, rc, path) -> CellOutcome:
    try:
        res = run_to_file(rc, path)
    except DivergenceError as err:
        log.warning("cell %d (%s) diverged: %s", index, assignment, err)
        return CellOutcome(index, assignment, str(path), "diverged", error=str(err))
    return CellOutcome(index, assignment, str(path), "done", res.final)


def run_sweep(values, out: Path, jobs: int = 1) -> tuple[Path, list[CellOutcome]]:
    """Run every sweep cell, ``jobs`` at a time; the index is written once at the end.

    On interrupt, finished cells keep their traces and the index marks the
    rest as interrupted before the interrupt propagates.
    """
    cells = sweep_cells(values)
    seeds = len(values.sweep.get("seeds", (0,)))
    out.mkdir(parents=True, exist_ok=True)
    plan = []
    for i, (assignment, cell_values) in enumerate(cells):
        rc = build(cell_values)
        plan.append((i, assignment, rc, out / f"cell{i // seeds:03d}_seed{assignment['seed']}.csv"))
    outcomes: dict[int, CellOutcome] = {}
    try:
        if jobs <= 1:
            for item in plan:
                outcomes[item[0]] = _run_cell(*item)
        else:
            pool = ProcessPoolExecutor(max_workers=jobs)
            try:
                pending = {pool.submit(_run_cell, *item) for item in plan}
                while pending:
                    done, pending = wait(pending, return_when=FIRST_COMPLETED)
                    for fut in done:
                        oc = fut.result()
                        outcomes[oc.index] = oc
            finally:
                pool.shutdown(wait=False, cancel_futures=True)
    finally:
        for i, assignment, _, path in plan:
            if i not in outcomes:
                outcomes[i] = CellOutcome(i, assignment, str(path), "interrupted")
        index = write_index(out / "index.csv", [outcomes[i] for i in range(len(plan))],
                            [k for k in values.sweep if k != "seeds"])
    return index, [outcomes[i] for i in range(len(plan))]


def write_index(path: Path, outcomes, keys) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell", "seed", *keys, "status", "final_k", "final_samples", "final_phi", "trace",
                    "error"])
        for oc in outcomes:
            fin = oc.final
            w.writerow([oc.index, oc.assignment["seed"], *(oc.assignment[k] for k in keys), oc.status,
                        "" if fin is None else fin.k, "" if fin is None else fin.samples,
                        "" if fin is None else format_real(fin.phi), Path(oc.path).name, oc.error])
    return path


def phi_lattice(rc: RunConfig, problem=None):
    """Phi at every lattice point of the x box; returns (points, values)."""
    problem = problem or build_problem(rc)
    oracles = ExactOracles(problem, rc.oracle)
    spacing, tau = rc.sweep_phi["spacing"], rc.sweep_phi["tau"]
    axes = [np.arange(lo, hi + 1e-9 * max(1.0, abs(hi)), spacing)
            for lo, hi in zip(problem.x_lo, problem.x_hi)]
    points = np.array(list(itertools.product(*axes)), dtype=float)
    values = np.array([oracles.phi(p) if tau is None else oracles.phi_tau(p, tau) for p in points])
    return points, values


def write_phi_lattice(path, points, values) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*(f"x_{i}" for i in range(points.shape[1])), "phi"])
        for p, v in zip(points, values):
            w.writerow([*(format_real(c) for c in p), format_real(v)])
    return path
