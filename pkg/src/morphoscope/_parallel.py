"""Order-preserving process-pool map used for cohort-level parallelism."""

import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor

JOBS_ENV = "MORPHOSCOPE_JOBS"


def default_jobs():
    """``MORPHOSCOPE_JOBS`` if set, else 1."""
    raw = os.environ.get(JOBS_ENV, "").strip()
    if not raw:
        return 1
    try:
        jobs = int(raw)
    except ValueError:
        raise ValueError(f"{JOBS_ENV} must be an integer, got {raw!r}") from None
    return max(1, jobs)


def pmap(fn, items, jobs=1):
    """``[fn(x) for x in items]``, optionally spread over ``jobs`` processes.

    Results come back in input order, so reductions over them are
    deterministic whatever the worker count. ``fn`` must be picklable.
    """
    items = list(items)
    if jobs is None:
        jobs = default_jobs()
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    ctx = multiprocessing.get_context("fork" if os.name == "posix" else "spawn")
    with ProcessPoolExecutor(max_workers=min(jobs, len(items)), mp_context=ctx) as pool:
        return list(pool.map(fn, items))
