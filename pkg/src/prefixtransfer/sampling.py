"""Smoothed log-proportional allocation of training effort across tasks.

Each task's selection probability is (ln|D| + delta) / sum(ln|D'| + delta),
which over-samples small datasets and under-samples large ones relative to
their raw share. ``plan_epoch`` turns the probabilities into integer batch
counts via largest-remainder apportionment with a floor of one batch.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import named_stream
from .errors import ConfigError


def sampling_distribution(sizes, smoothing: float) -> np.ndarray:
    """Probability per task from dataset sizes, natural-log smoothed."""
    sizes = list(sizes)
    if not sizes:
        raise ConfigError("sampling_distribution needs at least one size")
    if smoothing <= 0:
        raise ConfigError(f"smoothing factor must be positive, got {smoothing}")
    for s in sizes:
        if s < 1:
            raise ConfigError(f"dataset sizes must be >= 1, got {s}")
    weights = np.array([math.log(s) + smoothing for s in sizes], dtype=np.float64)
    return weights / weights.sum()


class SamplerState:
    """Task list, probabilities from Eq. above, and a seeded draw stream."""

    def __init__(self, task_ids, sizes, smoothing: float, seed: int):
        task_ids = list(task_ids)
        sizes = list(sizes)
        if len(task_ids) != len(sizes):
            raise ConfigError(f"{len(task_ids)} task ids for {len(sizes)} sizes")
        if len(set(task_ids)) != len(task_ids):
            raise ConfigError("task ids must be unique")
        self.task_ids = task_ids
        self.sizes = sizes
        self.smoothing = float(smoothing)
        self.probs = sampling_distribution(sizes, smoothing)
        self._rng = named_stream(seed, "task-sampler")

    def draw_task(self) -> str:
        return self.task_ids[int(self._rng.choice(len(self.task_ids), p=self.probs))]

    def draw_tasks(self, count: int) -> list[str]:
        picks = self._rng.choice(len(self.task_ids), size=count, p=self.probs)
        return [self.task_ids[int(i)] for i in picks]


def plan_epoch(sampler: SamplerState, budget: int, order=None) -> list[tuple[str, int]]:
    """Apportion a per-epoch batch budget across tasks (each gets >= 1).

    Largest-remainder rounding of budget * P; ties break toward the lower
    task index. ``order`` (a permutation of task ids) fixes the visit order
    of the returned list.
    """
    n_tasks = len(sampler.task_ids)
    if budget < n_tasks:
        raise ConfigError(f"batch budget {budget} below task count {n_tasks}")
    quotas = budget * sampler.probs
    counts = np.floor(quotas).astype(int)
    remainders = quotas - counts
    leftover = int(budget - counts.sum())
    by_remainder = sorted(range(n_tasks), key=lambda i: (-remainders[i], i))
    for i in by_remainder[:leftover]:
        counts[i] += 1
    while (counts == 0).any():
        receiver = int(np.argmax(counts == 0))
        donor = int(np.argmax(counts))
        counts[donor] -= 1
        counts[receiver] += 1
    allocation = dict(zip(sampler.task_ids, (int(c) for c in counts)))
    if order is None:
        order = sampler.task_ids
    else:
        order = list(order)
        if sorted(order) != sorted(sampler.task_ids):
            raise ConfigError(f"visit order {order} is not a permutation of task ids")
    return [(task_id, allocation[task_id]) for task_id in order]
