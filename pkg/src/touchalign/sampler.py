"""Mixed-source batch sampling across heterogeneous datasets.

Each batch picks one majority dataset D_sigma with probability proportional
to dataset size, takes round(sigma * B) samples from it uniformly, and fills
the rest uniformly from the union of all other datasets (sample-uniform, so
larger other datasets contribute proportionally more). The majority dataset
is redrawn for every batch.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

log = logging.getLogger("touchalign.sampler")


@dataclass(frozen=True)
class SamplerConfig:
    sigma: float = 0.75
    batch_size: int = 48
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError(f"sigma {self.sigma} outside [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class DrawnBatch:
    """Batch composition: per-slot dataset id and local sample index."""

    dataset_ids: np.ndarray  # (B,) int64
    local_indices: np.ndarray  # (B,) int64, index within the dataset's pool
    selected_dataset: int  # the majority dataset D_sigma for this batch

    @property
    def size(self) -> int:
        return int(self.dataset_ids.shape[0])


def _pool_sizes(manifest_or_sizes) -> list[int]:
    if hasattr(manifest_or_sizes, "sizes"):
        sizes = list(manifest_or_sizes.sizes)
    else:
        sizes = [int(s) for s in manifest_or_sizes]
    if len(sizes) == 0:
        raise ValueError("empty manifest: no datasets to sample from")
    for i, s in enumerate(sizes):
        if s <= 0:
            raise ValueError(f"dataset {i} has non-positive size {s}")
    return sizes


def dataset_probabilities(manifest_or_sizes) -> np.ndarray:
    """p_n = |D_n| / sum_m |D_m| over dataset sizes."""
    sizes = np.array(_pool_sizes(manifest_or_sizes), dtype=np.float64)
    return sizes / sizes.sum()


def round_half_up(x: float) -> int:
    """Half-up rounding (floor(x + 0.5)); banker's rounding is deliberately avoided."""
    return int(np.floor(x + 0.5))


def _uniform_without_replacement(rng: np.random.Generator, pool: int, k: int) -> np.ndarray:
    """k distinct uniform draws from range(pool), k <= pool.

    Rejection sampling when k is small relative to the pool (O(k) instead of
    the O(pool) cost of a full permutation), permutation otherwise.
    """
    if k == 0:
        return np.empty(0, dtype=np.int64)
    if 4 * k >= pool:
        return rng.permutation(pool)[:k].astype(np.int64)
    chosen: set[int] = set()
    out: list[int] = []
    while len(out) < k:
        draws = rng.integers(0, pool, size=k - len(out))
        for d in draws:
            d = int(d)
            if d not in chosen:
                chosen.add(d)
                out.append(d)
    return np.array(out, dtype=np.int64)


def _draw_pool(rng: np.random.Generator, pool: int, k: int, what: str) -> np.ndarray:
    if k <= pool:
        return _uniform_without_replacement(rng, pool, k)
    log.warning("pool of %d too small for %d %s draws; sampling with replacement", pool, k, what)
    return rng.integers(0, pool, size=k).astype(np.int64)


def draw_batch(
    manifest_or_sizes,
    config: SamplerConfig,
    rng: np.random.Generator,
) -> tuple[DrawnBatch, np.random.Generator]:
    """One batch of (dataset, local index) pairs; the generator advances in place.

    With a single dataset sigma is ignored and the batch is plain uniform
    sampling. Otherwise exactly round(sigma * B) slots come from the selected
    majority dataset, the remainder sample-uniformly from the others' union.
    Batch order is shuffled so majority samples are not positionally grouped.
    """
    config.validate()
    sizes = _pool_sizes(manifest_or_sizes)
    b = config.batch_size
    n = len(sizes)

    if n == 1:
        local = _draw_pool(rng, sizes[0], b, "uniform")
        batch = DrawnBatch(
            dataset_ids=np.zeros(b, dtype=np.int64),
            local_indices=local,
            selected_dataset=0,
        )
        return batch, rng

    p = dataset_probabilities(sizes)
    selected = int(rng.choice(n, p=p))
    n_major = round_half_up(config.sigma * b)
    n_rest = b - n_major

    major_local = _draw_pool(rng, sizes[selected], n_major, "majority")
    major_ds = np.full(n_major, selected, dtype=np.int64)

    others = [i for i in range(n) if i != selected]
    other_sizes = np.array([sizes[i] for i in others], dtype=np.int64)
    union = int(other_sizes.sum())
    flat = _draw_pool(rng, union, n_rest, "remainder")
    # Map union positions back to (dataset, local) via cumulative offsets.
    bounds = np.cumsum(other_sizes)
    which = np.searchsorted(bounds, flat, side="right")
    starts = bounds - other_sizes
    rest_ds = np.array([others[w] for w in which], dtype=np.int64)
    rest_local = flat - starts[which]

    dataset_ids = np.concatenate([major_ds, rest_ds])
    local_indices = np.concatenate([major_local, rest_local])
    perm = rng.permutation(b)
    batch = DrawnBatch(
        dataset_ids=dataset_ids[perm],
        local_indices=local_indices[perm],
        selected_dataset=selected,
    )
    return batch, rng


def rng_state(rng: np.random.Generator) -> dict:
    """JSON-serializable generator state for checkpointing."""
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    algo = state.get("bit_generator", "PCG64")
    if algo != "PCG64":
        raise ValueError(f"unsupported bit generator {algo!r}")
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)
