"""
Utility functions shared by the CLI, the service and the simulation harness.
"""

import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Callable, Sequence, TypeVar

import pandas as pd


T = TypeVar("T")
R = TypeVar("R")

# 17 significant digits round-trip every float64.
FLOAT_FORMAT = "%.17g"


def default_threads() -> int:
    """Available parallelism (at least 1)."""
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return max(1, os.cpu_count() or 1)


def map_ordered(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> list[R]:
    """
    Apply ``fn`` to every item, on a thread pool when ``threads > 1``.

    Results come back in item order whatever order the jobs finish in.
    """
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    results: list = [None] * len(items)
    with ThreadPoolExecutor(max_workers=threads) as executor:
        futures = {executor.submit(fn, item): i for i, item in enumerate(items)}
        for future in as_completed(futures):
            results[futures[future]] = future.result()
    return results


def ensure_dir(path: str) -> str:
    """Ensure the directory exists and return its path."""
    os.makedirs(path, exist_ok=True)
    return path


def write_csv(frame: pd.DataFrame, path: str) -> str:
    """Write a frame with round-trip float formatting and LF line endings."""
    parent = os.path.dirname(path)
    if parent:
        ensure_dir(parent)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path
