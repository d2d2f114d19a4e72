"""Counter-based random streams and block-parallel replication scheduling.

Replications are grouped in fixed-size blocks; block ``b`` always draws from
``seed_stream(master_seed, b)`` (a Philox generator keyed by the pair), so the
numbers a replication sees never depend on how many workers ran.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
import os

import numpy as np

BLOCK_SIZE = 2048


def seed_stream(master_seed: int, replication_index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(replication_index),))
    return np.random.Generator(np.random.Philox(ss))


def default_threads() -> int:
    env = os.environ.get("MCLT_SGD_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def blocks(reps: int, block_size: int = BLOCK_SIZE):
    """(block_index, start, size) triples covering ``reps`` replications."""
    out = []
    for b, start in enumerate(range(0, reps, block_size)):
        out.append((b, start, min(block_size, reps - start)))
    return out


def map_blocks(fn, reps: int, seed: int, threads: int | None = None, block_size: int = BLOCK_SIZE):
    """Run ``fn(rng, size, block_index)`` per block; results come back in block order."""
    work = blocks(reps, block_size)
    threads = default_threads() if threads is None else max(1, int(threads))

    def run(item):
        b, _, size = item
        return fn(seed_stream(seed, b), size, b)

    if threads == 1 or len(work) == 1:
        return [run(w) for w in work]
    with ThreadPoolExecutor(max_workers=min(threads, len(work))) as pool:
        return list(pool.map(run, work))
