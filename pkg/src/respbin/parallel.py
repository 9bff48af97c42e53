"""
Thread-pool policy shared by the modules that fan out work.

RESPBIN_THREADS caps the pool width; 0 or unset means one worker per CPU.
Results are always gathered in submission order so parallel runs are
bit-identical to serial ones.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, TypeVar

logger = logging.getLogger(__name__)

THREADS_ENV = "RESPBIN_THREADS"

T = TypeVar("T")
R = TypeVar("R")


def worker_count() -> int:
    """Number of worker threads to use, honoring RESPBIN_THREADS."""
    raw = os.environ.get(THREADS_ENV, "").strip()
    cpus = os.cpu_count() or 1
    if not raw:
        return cpus
    try:
        requested = int(raw)
    except ValueError:
        logger.warning("ignoring non-integer %s=%r", THREADS_ENV, raw)
        return cpus
    if requested < 0:
        logger.warning("ignoring negative %s=%d", THREADS_ENV, requested)
        return cpus
    return cpus if requested == 0 else requested


def ordered_map(func: Callable[[T], R], items: Iterable[T]) -> List[R]:
    """Map func over items on the shared pool, preserving input order."""
    items = list(items)
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="respbin") as pool:
        return list(pool.map(func, items))
