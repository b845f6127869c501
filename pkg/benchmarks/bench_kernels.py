"""Time the compiled coordinate-flow kernel against the pure-numpy fallback.

Runs the same integration workload twice: once in this process (compiled
path unless ``PEIRA_NO_NUMBA`` disabled it at import) and once in a child
process with ``PEIRA_NO_NUMBA=1``.  Both paths execute identical arithmetic,
so the report is a pure dispatch/JIT comparison.

Usage::

    python3 benchmarks/bench_kernels.py [--steps 20000] [--k 4] [--repeats 3]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from peira import kernels

SPECTRUM = np.array([1.0, 0.95, 0.8, 0.76, -0.76, -0.8, -0.95, -1.0])


def workload(steps: int, k: int, repeats: int) -> dict:
    """Integrate a kappa=1 flow for ``steps`` RK4 steps, ``repeats`` times."""
    gen = np.random.Generator(np.random.Philox(key=np.uint64(0)))
    w0 = 0.4 * gen.standard_normal((k, SPECTRUM.size))
    kernels.warmup()
    best = np.inf
    for _ in range(repeats):
        w = w0.copy()
        start = time.perf_counter()
        _, done, _, status = kernels.rk4_chunk(w, SPECTRUM, 1, 0.2, 0.02, steps, 0.0)
        elapsed = time.perf_counter() - start
        assert status in (0, 1) and done > 0
        best = min(best, elapsed)
    return {
        "using_numba": bool(kernels.USING_NUMBA),
        "steps": steps,
        "best_seconds": best,
        "steps_per_second": steps / best,
    }


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=20000)
    parser.add_argument("--k", type=int, default=4)
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--child", action="store_true",
                        help=argparse.SUPPRESS)   # internal: emit JSON only
    args = parser.parse_args()

    result = workload(args.steps, args.k, args.repeats)
    if args.child:
        print(json.dumps(result))
        return 0

    label = "compiled" if result["using_numba"] else "numpy fallback"
    print(f"this process ({label}): {result['best_seconds']*1e3:8.2f} ms "
          f"({result['steps_per_second']:,.0f} steps/s)")

    env = dict(os.environ, PEIRA_NO_NUMBA="1")
    child = subprocess.run(
        [sys.executable, os.path.abspath(__file__), "--child",
         "--steps", str(args.steps), "--k", str(args.k),
         "--repeats", str(args.repeats)],
        capture_output=True, text=True, env=env, check=True,
    )
    other = json.loads(child.stdout)
    assert not other["using_numba"]
    print(f"child (numpy fallback):  {other['best_seconds']*1e3:8.2f} ms "
          f"({other['steps_per_second']:,.0f} steps/s)")
    if result["using_numba"]:
        print(f"speedup: {other['best_seconds'] / result['best_seconds']:.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
