"""Micro-benchmark comparing the compiled and pure-Python geometry kernels."""

from __future__ import annotations

import time

import numpy as np

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:
    _compiled = None


def _time(fn, repeats: int = 3) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run(seed: int = 0) -> str:
    """Time knn / farthest-point sampling on both backends; returns a table."""
    rng = np.random.default_rng(seed)
    cases = []
    for n, m, k, c in [(1024, 128, 64, 3), (4096, 512, 32, 3), (1024, 128, 16, 64)]:
        pts = rng.standard_normal((n, c))
        queries = pts[rng.choice(n, m, replace=False)].copy()
        cases.append((f"knn n={n} m={m} k={k} c={c}",
                      lambda b, p=pts, q=queries, kk=k: b.knn_points(p, q, kk)))
    for n, m in [(2048, 256), (8192, 512)]:
        pts = rng.standard_normal((n, 3))
        cases.append((f"fps n={n} m={m}",
                      lambda b, p=pts, mm=m: b.farthest_points(p, mm, 0)))

    lines = [f"{'kernel':<28}{'pure (s)':>12}{'compiled (s)':>14}{'speedup':>10}"]
    for name, call in cases:
        t_py = _time(lambda: call(_kernels_py))
        if _compiled is None:
            lines.append(f"{name:<28}{t_py:>12.4f}{'absent':>14}{'-':>10}")
            continue
        t_c = _time(lambda: call(_compiled))
        ref = call(_kernels_py)
        got = call(_compiled)
        if isinstance(ref, tuple):
            same = all(np.array_equal(a, b) for a, b in zip(ref, got))
        else:
            same = np.array_equal(ref, got)
        suffix = "" if same else "  MISMATCH"
        lines.append(f"{name:<28}{t_py:>12.4f}{t_c:>14.4f}{t_py / t_c:>10.1f}{suffix}")
    if _compiled is None:
        lines.append("compiled backend not built; only the pure kernels ran")
    return "\n".join(lines)
