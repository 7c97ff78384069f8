from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")
logger = logging.getLogger(__name__)


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator derived from (seed, *keys); never depends on scheduling."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]))


def map_ordered(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> list[R]:
    """Apply fn to items, returning results in input order regardless of thread count."""
    work: Sequence[T] = list(items)
    if threads <= 1 or len(work) <= 1:
        return [fn(item) for item in work]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, work))


def map_replicates(
    fn: Callable[[np.random.Generator, int], R],
    count: int,
    seed: int,
    *,
    stream: int = 0,
    threads: int = 1,
) -> list[R]:
    """Run ``fn(rng, r)`` for r in range(count), replicate r on substream (seed, stream, r)."""

    def run(index: int) -> R:
        return fn(substream(seed, stream, index), index)

    logger.debug("[SIM] %s replicates on stream %s (threads=%s)", count, stream, threads)
    return map_ordered(run, range(count), threads)
