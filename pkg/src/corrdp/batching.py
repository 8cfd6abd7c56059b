"""Balls-in-bins batch assignment and the fixed-batch-size practical variant.

Each example lands in exactly one of b batches, uniformly and independently;
batches are then replayed round-robin across epochs.  The default
implementation is the streaming-friendly equivalent form: draw multinomial
batch counts, shuffle the dataset once, and cut the shuffled order into
consecutive blocks.  A direct per-example-uniform implementation is kept for
the distributional equivalence tests.

For accelerators that need a static batch size B, a batch is padded with a
zero-gradient sentinel or truncated to its first B elements; gradient
averaging downstream always normalizes by 1/B, which keeps the privacy
analysis (done at the sum) intact.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

PAD_SENTINEL = -1


@dataclass(frozen=True)
class AssignmentPlan:
    """One epoch's balls-in-bins assignment.

    ``assignment[e]`` is the batch index (0-based) of example e; ``counts``
    are the batch sizes.  The plan regenerates deterministically from
    (dataset_size, num_batches, seed, method).
    """

    dataset_size: int
    num_batches: int
    counts: np.ndarray
    assignment: np.ndarray
    seed: int
    method: str = "shuffle_multinomial"

    def __post_init__(self):
        if int(self.counts.sum()) != self.dataset_size:
            raise ValueError("batch counts must sum to the dataset size")

    def to_json_dict(self) -> dict:
        return {"dataset_size": self.dataset_size, "num_batches": self.num_batches,
                "counts": [int(c) for c in self.counts], "seed": self.seed,
                "method": self.method}


def assign(dataset_size: int, num_batches: int, seed: int,
           method: str = "shuffle_multinomial") -> AssignmentPlan:
    """Assign each example to one of ``num_batches`` batches uniformly.

    ``shuffle_multinomial`` draws the batch sizes from a symmetric
    multinomial, shuffles once, and slices consecutive blocks;
    ``per_example`` draws each example's batch index directly.  Both induce
    the same distribution over assignments.
    """
    if num_batches < 1:
        raise ValueError(f"num_batches must be >= 1, got {num_batches}")
    if dataset_size < 0:
        raise ValueError(f"dataset_size must be nonnegative, got {dataset_size}")
    rng = np.random.default_rng(seed)
    assignment = np.empty(dataset_size, dtype=np.int64)
    if method == "shuffle_multinomial":
        counts = rng.multinomial(dataset_size, np.full(num_batches, 1.0 / num_batches))
        order = rng.permutation(dataset_size)
        assignment[order] = np.repeat(np.arange(num_batches, dtype=np.int64), counts)
    elif method == "per_example":
        assignment[:] = rng.integers(0, num_batches, size=dataset_size)
        counts = np.bincount(assignment, minlength=num_batches)
    else:
        raise ValueError(f"unknown method {method!r}")
    return AssignmentPlan(dataset_size, num_batches, counts, assignment, seed, method)


def batch_members(plan: AssignmentPlan) -> List[np.ndarray]:
    """Members of each batch, in the plan's draw order.

    For the shuffle implementation this is the shuffled order, so taking the
    first B members of an oversized batch drops a uniformly random subset.
    """
    rng = np.random.default_rng(plan.seed)
    if plan.method == "shuffle_multinomial":
        rng.multinomial(plan.dataset_size, np.full(plan.num_batches, 1.0 / plan.num_batches))
        order = rng.permutation(plan.dataset_size)
        edges = np.concatenate([[0], np.cumsum(plan.counts)])
        return [order[edges[i]:edges[i + 1]] for i in range(plan.num_batches)]
    return [np.flatnonzero(plan.assignment == i) for i in range(plan.num_batches)]


def schedule(iteration: int, num_batches: int) -> int:
    """Round-robin batch index for 1-indexed iterations, in 1..num_batches."""
    if iteration < 1:
        raise ValueError(f"iterations are 1-indexed, got {iteration}")
    return (iteration - 1) % num_batches + 1


@dataclass(frozen=True)
class PracticalBatch:
    """A batch forced to exactly ``batch_size`` examples.

    ``example_indices`` has sentinel entries (PAD_SENTINEL) for padding;
    the downstream gradient average still divides by the full batch size.
    """

    example_indices: np.ndarray
    real_count: int
    truncated_count: int

    def __post_init__(self):
        if self.real_count + int(np.sum(self.example_indices == PAD_SENTINEL)) \
                != self.example_indices.size:
            raise ValueError("pad count inconsistent with real_count")

    @property
    def batch_size(self) -> int:
        return self.example_indices.size


def pad_truncate(members: np.ndarray, batch_size: int) -> PracticalBatch:
    """Force a batch to a fixed size: pad short, keep the first B of long.

    The members arrive in shuffled order, so first-B truncation keeps a
    uniformly random subset; padding uses the zero-gradient sentinel.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    members = np.asarray(members, dtype=np.int64)
    if members.size >= batch_size:
        return PracticalBatch(members[:batch_size].copy(), batch_size,
                              members.size - batch_size)
    padded = np.full(batch_size, PAD_SENTINEL, dtype=np.int64)
    padded[: members.size] = members
    return PracticalBatch(padded, members.size, 0)
