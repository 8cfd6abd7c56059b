"""Desk-scale DP-FTRL training on a synthetic task with streaming correlated noise.

The model is linear regression on Gaussian features; nothing about the
mechanism (clipping, fixed-size batches, correlated noise) depends on the
task, so this keeps the amplified-versus-unamplified comparison measurable
at desk scale.

Noise enters the update as (clip_norm / B) * (C^{-1} z)[i, :] with z rows
drawn N(0, sigma^2 I): the average uses the fixed 1/B normalization of the
practical batching variant, matching the privacy analysis done at the sum.
The C^{-1} z rows are produced by forward substitution in streaming form;
BLT strategies only keep d buffers of model size.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import batching
from .strategies import (
    BltStrategy,
    ParticipationSchema,
    StrategyMatrix,
    ToeplitzStrategy,
    materialize,
)

MODES = ("practical_bib", "shuffle_fixed", "unamplified_sigma")


class NoiseStream:
    """Rows of C^{-1} z by forward substitution, one row per training step.

    State depends on the family: dense keeps all solved rows (O(n p)),
    Toeplitz keeps the last window of rows, and BLT keeps ``d`` buffer
    vectors (exactly d * model_dim reals).
    """

    def __init__(self, strategy: StrategyMatrix, sigma: float, model_dim: int):
        if sigma < 0.0:
            raise ValueError(f"sigma must be nonnegative, got {sigma}")
        self.strategy = strategy
        self.sigma = sigma
        self.model_dim = model_dim
        self.steps_emitted = 0
        self.order = strategy.order
        if isinstance(strategy, BltStrategy):
            self._kind = "blt"
            self._buffers = np.zeros((strategy.buffers, model_dim))
            self._weights = strategy.weights
            self._decays = strategy.decays
        elif isinstance(strategy, ToeplitzStrategy):
            self._kind = "toeplitz"
            self._coeffs = strategy.full_coeffs()
            window = max(np.flatnonzero(self._coeffs).max() if self._coeffs.any() else 0, 0)
            self._window = int(window)
            self._history = np.zeros((self._window, model_dim))
        else:
            self._kind = "dense"
            self._matrix = materialize(strategy)
            self._history = np.zeros((self.order, model_dim))

    def next_row(self, z_row: np.ndarray) -> np.ndarray:
        """Solve the next row of C u = z given this step's noise row."""
        if self.steps_emitted >= self.order:
            raise RuntimeError(f"noise stream exhausted after {self.order} rows")
        z_row = np.asarray(z_row, dtype=float)
        if z_row.shape != (self.model_dim,):
            raise ValueError(f"z_row must have shape ({self.model_dim},)")
        i = self.steps_emitted
        if self._kind == "blt":
            row = z_row - self._weights @ self._buffers
            self._buffers *= self._decays[:, None]
            self._buffers += row[None, :]
        elif self._kind == "toeplitz":
            depth = min(i, self._window)
            row = z_row.copy()
            for j in range(1, depth + 1):
                # history[-j] is row i-j of the solution.
                row -= self._coeffs[j] * self._history[-j]
            row /= self._coeffs[0]
            if self._window:
                self._history = np.roll(self._history, -1, axis=0)
                self._history[-1] = row
        else:
            row = (z_row - self._matrix[i, :i] @ self._history[:i]) / self._matrix[i, i]
            self._history[i] = row
        self.steps_emitted += 1
        return row


def noise_next(stream: NoiseStream, z_row: np.ndarray) -> np.ndarray:
    """Functional alias for :meth:`NoiseStream.next_row`."""
    return stream.next_row(z_row)


@dataclass(frozen=True)
class TrainingConfig:
    """Synthetic DP-FTRL run: task size, batching mode, clipping, and seeds."""

    model_dim: int
    dataset_size: int
    schema: ParticipationSchema
    batch_size: int
    strategy: StrategyMatrix
    learning_rate: float
    clip_norm: float = 1.0
    momentum: float = 0.0
    mode: str = "practical_bib"
    data_seed: int = 0
    assignment_seed: int = 1
    noise_seed: int = 2
    label_noise: float = 0.01

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.strategy.order != self.schema.iterations:
            raise ValueError("strategy order must equal schema iterations")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.clip_norm <= 0.0:
            raise ValueError("clip_norm must be positive")


@dataclass
class TrainingResult:
    steps: List[dict] = field(default_factory=list)
    final_weights: Optional[np.ndarray] = None

    @property
    def final_loss(self) -> float:
        return self.steps[-1]["loss"]


def _synthetic_task(config: TrainingConfig):
    rng = np.random.default_rng(config.data_seed)
    features = rng.standard_normal((config.dataset_size, config.model_dim))
    target = rng.standard_normal(config.model_dim)
    target /= np.linalg.norm(target)
    labels = features @ target + config.label_noise * rng.standard_normal(config.dataset_size)
    return features, labels


def _fixed_batches(config: TrainingConfig) -> List[batching.PracticalBatch]:
    """One epoch's batches at exactly batch_size, per the configured mode."""
    b = config.schema.batches_per_epoch
    if config.mode == "shuffle_fixed":
        order = np.random.default_rng(config.assignment_seed).permutation(config.dataset_size)
        blocks = [order[i * config.batch_size:(i + 1) * config.batch_size]
                  for i in range(b)]
        return [batching.pad_truncate(block, config.batch_size) for block in blocks]
    plan = batching.assign(config.dataset_size, b, config.assignment_seed)
    return [batching.pad_truncate(members, config.batch_size)
            for members in batching.batch_members(plan)]


def train(config: TrainingConfig, sigma: float) -> TrainingResult:
    """Run the noisy training loop; deterministic given the config seeds.

    Per step: per-example gradients clipped to clip_norm, averaged with the
    fixed 1/B normalization over the padded/truncated batch, plus the
    streaming correlated noise row scaled by clip_norm/B; optional momentum
    is applied after noise injection.
    """
    features, labels = _synthetic_task(config)
    batches = _fixed_batches(config)
    stream = NoiseStream(config.strategy, sigma, config.model_dim)
    noise_rng = np.random.default_rng(config.noise_seed)
    b = config.schema.batches_per_epoch
    weights = np.zeros(config.model_dim)
    velocity = np.zeros(config.model_dim)
    result = TrainingResult()
    for step in range(1, config.schema.iterations + 1):
        batch = batches[batching.schedule(step, b) - 1]
        real = batch.example_indices[batch.example_indices != batching.PAD_SENTINEL]
        grad_sum = np.zeros(config.model_dim)
        if real.size:
            x = features[real]
            residual = x @ weights - labels[real]
            grads = residual[:, None] * x
            norms = np.linalg.norm(grads, axis=1)
            scale = np.minimum(1.0, config.clip_norm / np.maximum(norms, 1e-300))
            grad_sum = (grads * scale[:, None]).sum(axis=0)
        mean_grad = grad_sum / config.batch_size
        z_row = sigma * noise_rng.standard_normal(config.model_dim)
        noise_row = stream.next_row(z_row) * (config.clip_norm / config.batch_size)
        update = mean_grad + noise_row
        velocity = config.momentum * velocity + update
        weights = weights - config.learning_rate * velocity
        loss = 0.5 * float(np.mean((features @ weights - labels) ** 2))
        result.steps.append({
            "step": step,
            "loss": loss,
            "grad_norm": float(np.linalg.norm(mean_grad)),
            "noise_norm": float(np.linalg.norm(noise_row)),
        })
    result.final_weights = weights
    return result
