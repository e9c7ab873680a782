"""Deterministic worker-pool helper.

Results are collected by task index, so the output never depends on
completion order and a run with n workers is bitwise identical to a
serial run.  Tasks must be pure functions of their arguments.
"""

from concurrent.futures import ThreadPoolExecutor


def parallel_map(fn, items, workers=1):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, item) for item in items]
        return [f.result() for f in futures]
