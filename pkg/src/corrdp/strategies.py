"""Strategy (correlation) matrices, participation schemas, and mode vectors.

A strategy matrix C is a lower-triangular invertible matrix; training adds
noise rows of C^{-1} z, so the privacy-relevant object is C itself.  Four
parameterizations are supported:

* ``DenseStrategy``     - explicit n x n entries.
* ``BandedStrategy``    - only the first ``band_width`` principal diagonals.
* ``ToeplitzStrategy``  - constant along diagonals, given by the first-column
  coefficients (fewer coefficients than the order means a banded Toeplitz).
* ``BltStrategy``       - Toeplitz coefficients built from ``d`` geometric
  buffers: c_0 = 1, c_k = sum_m w_m * theta_m^(k-1).  This family admits
  O(d * model_dim) streaming noise state.

Mode vectors summarize the participation pattern of a single example under
balls-in-bins batching: with b batches per epoch and E epochs, the example
assigned to batch i contributes (at most) the column sums
m_i = sum_j |C|[:, j*b + i].  The max mode norm is the worst-case L2
sensitivity without amplification, and the Gram matrix of the modes is all
the accountant needs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
import scipy.linalg


@dataclass(frozen=True)
class ParticipationSchema:
    """Batching schedule: b batches per epoch, E epochs, n = b*E iterations."""

    batches_per_epoch: int
    epochs: int

    def __post_init__(self):
        if self.batches_per_epoch < 1:
            raise ValueError(f"batches_per_epoch must be >= 1, got {self.batches_per_epoch}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")

    @property
    def iterations(self) -> int:
        return self.batches_per_epoch * self.epochs


def _check_lower_triangular(entries: np.ndarray) -> None:
    if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
        raise ValueError(f"strategy matrix must be square, got shape {entries.shape}")
    if not np.all(np.isfinite(entries)):
        raise ValueError("strategy matrix entries must be finite")
    if np.any(np.triu(entries, k=1) != 0.0):
        raise ValueError("strategy matrix must be lower triangular")
    if np.any(np.diag(entries) <= 0.0):
        raise ValueError("strategy matrix diagonal must be strictly positive")


@dataclass(frozen=True)
class DenseStrategy:
    """Explicit lower-triangular matrix."""

    entries: np.ndarray

    family = "dense"

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=float)
        _check_lower_triangular(entries)
        object.__setattr__(self, "entries", entries)

    @property
    def order(self) -> int:
        return self.entries.shape[0]

    def materialize(self) -> np.ndarray:
        return self.entries.copy()

    def payload(self):
        return [list(row) for row in self.entries]


@dataclass(frozen=True)
class BandedStrategy:
    """Lower-triangular matrix with ``band_width`` nonzero principal diagonals.

    ``diagonals[k]`` holds the k-th sub-diagonal, i.e. entries C[j+k, j] for
    j = 0..order-k-1; ``diagonals[0]`` is the main diagonal.
    """

    order: int
    diagonals: tuple

    family = "banded"

    def __post_init__(self):
        diags = tuple(np.asarray(d, dtype=float) for d in self.diagonals)
        if not diags:
            raise ValueError("banded strategy needs at least the main diagonal")
        if len(diags) > self.order:
            raise ValueError(f"band_width {len(diags)} exceeds order {self.order}")
        for k, d in enumerate(diags):
            if d.shape != (self.order - k,):
                raise ValueError(f"diagonal {k} must have length {self.order - k}, got {d.shape}")
            if not np.all(np.isfinite(d)):
                raise ValueError("banded entries must be finite")
        if np.any(diags[0] <= 0.0):
            raise ValueError("main diagonal must be strictly positive")
        object.__setattr__(self, "diagonals", diags)

    @property
    def band_width(self) -> int:
        return len(self.diagonals)

    def materialize(self) -> np.ndarray:
        out = np.zeros((self.order, self.order))
        for k, d in enumerate(self.diagonals):
            out[np.arange(k, self.order), np.arange(self.order - k)] = d
        return out

    def payload(self):
        return {"band_width": self.band_width,
                "diagonals": [list(d) for d in self.diagonals]}


@dataclass(frozen=True)
class ToeplitzStrategy:
    """Lower-triangular Toeplitz matrix C[i, j] = coeffs[i - j].

    ``coeffs`` may be shorter than ``order`` (remaining diagonals are zero,
    i.e. a banded Toeplitz matrix).
    """

    coeffs: np.ndarray
    order: int = 0

    family = "toeplitz"

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=float)
        if coeffs.ndim != 1 or coeffs.size == 0:
            raise ValueError("coeffs must be a nonempty 1-d sequence")
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("coeffs must be finite")
        order = self.order or coeffs.size
        if coeffs.size > order:
            raise ValueError(f"{coeffs.size} coefficients exceed order {order}")
        if coeffs[0] <= 0.0:
            raise ValueError(f"c_0 must be strictly positive, got {coeffs[0]}")
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "order", order)

    def full_coeffs(self) -> np.ndarray:
        """Coefficients zero-padded to the matrix order."""
        out = np.zeros(self.order)
        out[: self.coeffs.size] = self.coeffs
        return out

    def materialize(self) -> np.ndarray:
        c = self.full_coeffs()
        return scipy.linalg.toeplitz(c, np.zeros(self.order))

    def payload(self):
        return list(self.coeffs)


@dataclass(frozen=True)
class BltStrategy:
    """Buffered-linear-Toeplitz strategy with ``buffers`` geometric buffers.

    Expands to a Toeplitz matrix with c_0 = 1 and
    c_k = sum_m weights[m] * decays[m]^(k-1) for k >= 1.
    """

    order: int
    weights: np.ndarray
    decays: np.ndarray

    family = "blt"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        th = np.asarray(self.decays, dtype=float)
        if w.shape != th.shape or w.ndim != 1 or w.size == 0:
            raise ValueError("weights and decays must be matching nonempty 1-d sequences")
        if np.any(w < 0.0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        if np.any(th <= 0.0) or np.any(th >= 1.0):
            raise ValueError("decays must lie strictly inside (0, 1)")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "decays", th)

    @property
    def buffers(self) -> int:
        return self.weights.size

    def full_coeffs(self) -> np.ndarray:
        k = np.arange(1, self.order)
        out = np.empty(self.order)
        out[0] = 1.0
        # theta^(k-1) for k = 1..n-1, summed over buffers with their weights.
        out[1:] = (self.weights[:, None] * self.decays[:, None] ** (k - 1)[None, :]).sum(axis=0)
        return out

    def as_toeplitz(self) -> ToeplitzStrategy:
        return ToeplitzStrategy(self.full_coeffs(), self.order)

    def materialize(self) -> np.ndarray:
        return self.as_toeplitz().materialize()

    def payload(self):
        return {"buffers": self.buffers,
                "weights": list(self.weights),
                "decays": list(self.decays)}


StrategyMatrix = Union[DenseStrategy, BandedStrategy, ToeplitzStrategy, BltStrategy]


def materialize(strategy: StrategyMatrix) -> np.ndarray:
    """Dense n x n form of any strategy family."""
    return strategy.materialize()


@dataclass(frozen=True)
class ModeSet:
    """Per-batch participation modes m_1..m_b and their Gram matrix.

    ``matrix`` stacks the modes as columns (shape n x b); ``gram`` is the
    b x b matrix of pairwise inner products.  Modes are built from |C|, so
    they are entrywise nonnegative regardless of the sign pattern of C.
    """

    matrix: np.ndarray
    gram: np.ndarray = field(default=None)

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=float)
        gram = self.gram
        if gram is None:
            gram = matrix.T @ matrix
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "gram", np.asarray(gram, dtype=float))

    @property
    def num_batches(self) -> int:
        return self.matrix.shape[1]

    @property
    def norms(self) -> np.ndarray:
        return np.sqrt(np.diag(self.gram))

    def max_norm(self) -> float:
        return float(np.max(self.norms))


def mode_vectors(strategy: StrategyMatrix, schema: ParticipationSchema) -> ModeSet:
    """Participation modes of the balls-in-bins pattern for a strategy matrix.

    Mode i (i = 1..b) is the sum over epochs j of column j*b + i of |C|
    (columns 1-indexed; internally column i-1 + j*b with 0-indexing).

    Args:
        strategy: the strategy matrix, of order n = schema.iterations.
        schema: batches per epoch and epoch count.

    Returns:
        ModeSet with one column per batch.

    Raises:
        ValueError: if the matrix order does not match the schema.
    """
    n = schema.iterations
    if strategy.order != n:
        raise ValueError(
            f"strategy order {strategy.order} != schema iterations {n} "
            f"({schema.batches_per_epoch} batches/epoch x {schema.epochs} epochs)")
    abs_c = np.abs(materialize(strategy))
    b = schema.batches_per_epoch
    # Columns grouped by position within the epoch: modes[:, i] = sum_j |C|[:, i + j*b].
    modes = abs_c.reshape(n, schema.epochs, b).sum(axis=1)
    return ModeSet(modes)


def unamplified_sensitivity(strategy: StrategyMatrix, schema: ParticipationSchema) -> float:
    """Worst-case L2 sensitivity over fixed batch assignments: max_i ||m_i||."""
    return mode_vectors(strategy, schema).max_norm()


def toeplitz_inverse_coeffs(coeffs: Sequence[float], n: int) -> np.ndarray:
    """First column of the inverse of a lower-triangular Toeplitz matrix.

    Uses the power-series recurrence g_0 = 1/c_0,
    g_k = -(1/c_0) * sum_{j=1..k} c_j g_{k-j}; Toeplitz(g) equals
    Toeplitz(c)^{-1} restricted to order n.

    Args:
        coeffs: Toeplitz coefficients c_0.. (may be shorter than n).
        n: order of the implied matrix.

    Returns:
        Array of n inverse coefficients.
    """
    c = np.zeros(n)
    src = np.asarray(coeffs, dtype=float)
    c[: min(n, src.size)] = src[:n]
    if c[0] <= 0.0:
        raise ValueError(f"c_0 must be strictly positive, got {c[0]}")
    g = np.zeros(n)
    g[0] = 1.0 / c[0]
    for k in range(1, n):
        g[k] = -np.dot(c[1 : k + 1], g[k - 1 :: -1][: k]) / c[0]
    return g


def _toeplitz_coeffs_or_none(strategy: StrategyMatrix):
    if isinstance(strategy, ToeplitzStrategy):
        return strategy.full_coeffs()
    if isinstance(strategy, BltStrategy):
        return strategy.full_coeffs()
    return None


def prefix_error_norm(strategy: StrategyMatrix) -> float:
    """Frobenius norm of A C^{-1}, with A the all-ones lower-triangular matrix.

    For Toeplitz families this uses the O(n^2) coefficient path: with g the
    inverse coefficients and h = cumsum(g), A C^{-1} is Toeplitz with
    coefficients h and ||A C^{-1}||_F^2 = sum_k (n-k) h_k^2.
    """
    n = strategy.order
    coeffs = _toeplitz_coeffs_or_none(strategy)
    if coeffs is not None:
        g = toeplitz_inverse_coeffs(coeffs, n)
        h = np.cumsum(g)
        return float(np.sqrt(np.sum((n - np.arange(n)) * h * h)))
    c = materialize(strategy)
    workload = np.tril(np.ones((n, n)))
    inv = scipy.linalg.solve_triangular(c, np.eye(n), lower=True)
    return float(np.linalg.norm(workload @ inv))


def rmse(strategy: StrategyMatrix, sigma: float) -> float:
    """Root-mean-squared error of prefix sums: sigma * ||A C^{-1}||_F."""
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return sigma * prefix_error_norm(strategy)


def to_json_dict(strategy: StrategyMatrix) -> dict:
    """Serializable form: {order, family, payload}."""
    return {"order": strategy.order, "family": strategy.family,
            "payload": strategy.payload()}


def from_json_dict(data: dict) -> StrategyMatrix:
    """Inverse of :func:`to_json_dict`."""
    order = int(data["order"])
    family = data["family"]
    payload = data["payload"]
    if family == "dense":
        return DenseStrategy(np.asarray(payload, dtype=float))
    if family == "banded":
        return BandedStrategy(order, tuple(payload["diagonals"]))
    if family == "toeplitz":
        return ToeplitzStrategy(np.asarray(payload, dtype=float), order)
    if family == "blt":
        return BltStrategy(order, payload["weights"], payload["decays"])
    raise ValueError(f"unknown strategy family: {family!r}")


def fingerprint(strategy: StrategyMatrix) -> str:
    """Short stable hash of the serialized matrix, for report provenance."""
    import hashlib

    blob = json.dumps(to_json_dict(strategy), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def identity(order: int) -> ToeplitzStrategy:
    """The DP-SGD strategy C = I."""
    return ToeplitzStrategy(np.array([1.0]), order)
