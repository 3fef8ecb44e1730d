"""
Ordered chunk mapping over a thread pool.

Results always come back in input order, so reductions over them are
deterministic whatever the worker count.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

import numpy as np

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def chunk_slices(total: int, chunk_size: int) -> List[slice]:
    """Contiguous slices covering range(total)."""
    chunk_size = max(1, int(chunk_size))
    return [slice(i, min(i + chunk_size, total)) for i in range(0, total, chunk_size)]


def ordered_map(func: Callable[[T], R], items: Iterable[T], workers: Optional[int] = None) -> List[R]:
    """Apply func to every item, in parallel when workers > 1, keeping input order."""
    items = list(items)
    if not workers or workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    logger.debug("Mapping %d chunks over %d workers", len(items), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


def map_array_chunks(
    func: Callable[[slice], np.ndarray],
    total: int,
    chunk_size: int,
    workers: Optional[int] = None,
) -> np.ndarray:
    """Evaluate func on contiguous slices and concatenate the results in order."""
    if total == 0:
        return func(slice(0, 0))
    return np.concatenate(ordered_map(func, chunk_slices(total, chunk_size), workers), axis=0)
