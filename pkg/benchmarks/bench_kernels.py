"""Throughput of the compiled kernel against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--iterations N] [--repeat R]

Both backends run the same GridWorld segment from the same state; the script
checks that their iterates agree before reporting iterations per second.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from bilevel_rl import kernels
from bilevel_rl.actor_critic import AlgorithmOptions, advance, init_state
from bilevel_rl.envs.gridworld import GridWorldSpec
from bilevel_rl.schedules import ScheduleSet


def bench(segment, problem, schedules, n, repeat):
    best, state = np.inf, None
    for _ in range(repeat):
        state = init_state(problem, 0, critic_init=1.0, tau_cap=schedules.tau0)
        t0 = time.perf_counter()
        advance(state, problem, schedules, n, AlgorithmOptions(), run_segment=segment)
        best = min(best, time.perf_counter() - t0)
    return best, state


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iterations", type=int, default=20_000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    problem = GridWorldSpec().build()
    schedules = ScheduleSet(1e-4, 1e-2, 1.0, 1.0, 10.0, 0.3, 0.5, 0.25, 0.15, 0.2)
    compiled = kernels.compiled_run_segment()
    t_py, s_py = bench(kernels.python_run_segment, problem, schedules, args.iterations, args.repeat)
    print(f"python   {args.iterations / t_py:12.0f} it/s  ({t_py:.3f} s)")
    if compiled is None:
        print("compiled extension not built; nothing to compare")
        return
    t_c, s_c = bench(compiled, problem, schedules, args.iterations, args.repeat)
    diff = max(float(np.abs(getattr(s_c, f) - getattr(s_py, f)).max())
               for f in ("x", "theta", "theta_L", "v_hat", "v_hat_L"))
    print(f"compiled {args.iterations / t_c:12.0f} it/s  ({t_c:.3f} s)")
    print(f"speedup  {t_py / t_c:12.1f}x   max iterate difference {diff:.2e}")


if __name__ == "__main__":
    main()
