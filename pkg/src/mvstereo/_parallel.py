"""Deterministic chunked execution of per-pixel batch work.

Work is split into fixed-size row chunks whose results are written into
disjoint output slices, so the outcome is bit-identical for any worker
count; threads only overlap the numpy kernels of different chunks.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

CHUNK = 16384


def run_chunked(fn, total: int, threads: int, chunk: int = CHUNK) -> None:
    """Invoke ``fn(start, stop)`` over [0, total) in fixed chunks."""
    if total <= 0:
        return
    spans = [(s, min(s + chunk, total)) for s in range(0, total, chunk)]
    if threads <= 1 or len(spans) == 1:
        for start, stop in spans:
            fn(start, stop)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(lambda span: fn(*span), spans))
