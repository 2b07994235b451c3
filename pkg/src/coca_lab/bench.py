"""Score-contraction benchmark: compiled core vs numpy fallback vs the naive key tensor."""

from __future__ import annotations

import statistics
import time

import numpy as np

from . import kernels
from .diagnostics import contraction_memory_probe
from .errors import InputError

NAIVE_BUDGET_BYTES = 1 << 30


def _timeit(fn, reps: int) -> float:
    fn()  # warm-up
    times = []
    for _ in range(reps):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def bench_contraction(sq: int, sk: int, heads: int, d: int, reps: int = 5, batch: int = 1, seed: int = 0,
                      dtype=np.float32, budget_bytes: int = NAIVE_BUDGET_BYTES, causal: bool = False) -> list:
    """Median wall time, traced peak and error vs the naive oracle for each method.

    Rows are dicts ``method, seconds, peak_elems, max_rel_err``. Refuses
    shapes whose naive key tensor would exceed ``budget_bytes``.
    """
    if reps < 1:
        raise InputError(f"reps must be >= 1, got {reps}")
    if min(sq, sk, heads, d, batch) < 1 or d % 2:
        raise InputError("sizes must be positive and d even")
    itemsize = np.dtype(dtype).itemsize
    estimate = 3 * batch * sq * sk * heads * d * itemsize
    if estimate > budget_bytes:
        raise InputError(
            f"naive path needs about {estimate / 2**20:.0f} MiB (> {budget_bytes / 2**20:.0f} MiB budget)"
        )
    rng = np.random.default_rng(seed)
    q_raw = rng.standard_normal((batch, sq, heads, d)).astype(dtype)
    q_rot = rng.standard_normal((batch, sq, heads, d)).astype(dtype)
    t_rot = np.abs(rng.standard_normal((batch, sk, heads, d))).astype(dtype)
    scale = float(np.sqrt(d))
    ref = kernels.naive_scores(*(x.astype(np.float64) for x in (q_raw, q_rot, t_rot)), scale)
    denom = max(np.abs(ref).max(), 1e-30)
    offset = sk - sq if causal else -1
    mask = None
    if causal:
        mask = np.arange(sk)[None, :] <= (np.arange(sq)[:, None] + offset)

    rows = []
    methods = [("naive", lambda: kernels.naive_scores(q_raw, q_rot, t_rot, scale))]
    for name in kernels.available_backends():
        methods.append(
            (f"fused-{name}",
             lambda name=name: kernels.fused_scores(q_raw, q_rot, t_rot, scale, backend=name, causal_offset=offset))
        )
    for method, fn in methods:
        out = fn()
        diff = np.abs(out - ref)
        if mask is not None:
            diff = diff[..., mask]
        backend = "python" if method == "naive" else method.split("-", 1)[1]
        mem = contraction_memory_probe(sq, sk, heads, d, batch, seed, backend=backend)
        rows.append(dict(
            method=method,
            seconds=_timeit(fn, reps),
            peak_elems=mem["naive_peak_elems"] if method == "naive" else mem["fused_peak_elems"],
            max_rel_err=float(diff.max() / denom),
        ))
    return rows


__all__ = ["bench_contraction"]
