"""
Ensemble state, per-chain random streams and the block executor.

Chains are advanced in fixed-size blocks. The block partition depends only
on the number of chains and the configured block size, never on the worker
count, and every chain draws from its own counter-based stream. Results are
gathered in block order and reduced in the calling thread, so a run is
bitwise-identical for any number of workers.
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, TypeVar

import numpy as np

from integrators.services.dynamics import ChainState

logger = logging.getLogger(__name__)

# spawn-key prefix of the Hutchinson probe stream ("probes" as an integer)
PROBE_STREAM_KEY = int.from_bytes(b"probes", "big")

R = TypeVar("R")


class EnsembleError(ValueError):
    pass


def chain_stream(seed: int, chain: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(chain),))))


def chain_streams(seed: int, chains: int) -> List[np.random.Generator]:
    return [chain_stream(seed, m) for m in range(int(chains))]


def probe_stream(seed: int, iteration: int) -> np.random.Generator:
    seq = np.random.SeedSequence(int(seed), spawn_key=(PROBE_STREAM_KEY, int(iteration)))
    return np.random.Generator(np.random.Philox(seq))


@dataclass
class EnsembleState:
    chains: ChainState
    streams: List[np.random.Generator]
    iteration: int = 0
    gradient_calls_per_chain: int = 0
    divergent: Optional[np.ndarray] = None
    # ensemble statistics that fed a hyperparameter update
    adaptation_reductions: int = 0

    def __post_init__(self):
        if self.chains.size < 2:
            raise EnsembleError(f"An ensemble needs M >= 2 chains, got {self.chains.size}.")
        if len(self.streams) != self.chains.size:
            raise EnsembleError("Need exactly one random stream per chain.")
        if self.divergent is None:
            self.divergent = np.zeros(self.chains.size, dtype=bool)

    @property
    def size(self) -> int:
        return self.chains.size

    @property
    def dimension(self) -> int:
        return self.chains.dimension


def resolve_workers(workers: Optional[int]) -> int:
    if workers is None or int(workers) <= 0:
        return os.cpu_count() or 1
    return int(workers)


class ChainExecutor:
    """Maps a per-block function over the ensemble on a thread pool."""

    def __init__(self, workers: Optional[int] = None, block_size: int = 256):
        self.workers = resolve_workers(workers)
        self.block_size = max(1, int(block_size))
        self._pool: Optional[ThreadPoolExecutor] = None

    def __enter__(self) -> "ChainExecutor":
        if self.workers > 1:
            self._pool = ThreadPoolExecutor(max_workers=self.workers, thread_name_prefix="laps-chain")
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def blocks(self, chains: int) -> List[slice]:
        return [slice(i, min(i + self.block_size, chains)) for i in range(0, chains, self.block_size)]

    def map(
        self,
        fn: Callable[[ChainState, Sequence[np.random.Generator]], R],
        state: ChainState,
        streams: Sequence[np.random.Generator],
    ) -> List[R]:
        blocks = self.blocks(state.size)

        def run(block: slice) -> R:
            return fn(state.take(block), streams[block])

        if self._pool is None or len(blocks) == 1:
            return [run(b) for b in blocks]
        return list(self._pool.map(run, blocks))


def _finite_rows(values: np.ndarray) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    finite = np.isfinite(arr)
    if arr.ndim > 1:
        finite = np.all(finite.reshape(arr.shape[0], -1), axis=1)
    return finite


def finite_chain_values(values, what: str) -> np.ndarray:
    """Rows of `values` with every entry finite; warns when chains are dropped, raises when none are left."""
    arr = np.asarray(values, dtype=float)
    keep = _finite_rows(arr)
    dropped = int(arr.shape[0] - keep.sum())
    if dropped == arr.shape[0]:
        raise EnsembleError(f"All {dropped} chain values of {what} are non-finite.")
    if dropped:
        logger.warning("excluded %d non-finite chain values from %s", dropped, what)
        arr = arr[keep]
    return arr


def ensemble_expectation(values, what: str = "ensemble mean") -> np.ndarray:
    """Mean over chains (axis 0), excluding chains with non-finite values."""
    return np.mean(finite_chain_values(values, what), axis=0)


def ensemble_variance(values, what: str = "ensemble variance") -> np.ndarray:
    """Unbiased variance over chains (divisor M - 1); zero for a single finite chain."""
    arr = finite_chain_values(values, what)
    if arr.shape[0] < 2:
        return np.zeros(arr.shape[1:]) if arr.ndim > 1 else np.float64(0.0)
    return np.var(arr, axis=0, ddof=1)
