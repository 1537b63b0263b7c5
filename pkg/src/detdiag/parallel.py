"""Order-preserving process fan-out."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Callable, List, Sequence


def _call(payload):
    fn, args = payload
    return fn(*args)


def parallel_map(fn: Callable, arg_tuples: Sequence[tuple], jobs: int = 1) -> List:
    """``[fn(*args) for args in arg_tuples]``, optionally across processes.

    Results always come back in task order so downstream folds are
    independent of the worker count.
    """
    arg_tuples = list(arg_tuples)
    if jobs <= 1 or len(arg_tuples) <= 1:
        return [fn(*args) for args in arg_tuples]
    with ProcessPoolExecutor(max_workers=min(jobs, len(arg_tuples))) as pool:
        return list(pool.map(_call, [(fn, args) for args in arg_tuples]))
