"""Monte Carlo privacy accounting for correlated noise with balls-in-bins batching.

The mechanism C x + z under balls-in-bins batching is dominated (add
adjacency) by the pair

    P = (1/b) sum_i N(m_i, sigma^2 I)   vs   Q = N(0, sigma^2 I),

with m_i the participation modes of the strategy matrix; the remove adjacency
swaps the pair.  The privacy loss Y = log(P/Q)(X) depends on X only through
the inner products X . m_k, so sampling happens in the b-dimensional mode
span: draw a mode index i and noise u ~ N(0, G) for the mode Gram matrix G,
giving X . m_k = G[i, k] + sigma * u[k].

Base samples are sigma-independent, so one draw supports every sigma probed
during bisection.  Estimation is a map-reduce over fixed-size chunks, each
with its own counter-based RNG stream; results are bitwise-deterministic
given (seed, sample count, chunk size) regardless of thread count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np

from . import _kernels
from .gaussian import calibrate_sigma_unamplified
from .strategies import ModeSet, ParticipationSchema, StrategyMatrix, mode_vectors

DEFAULT_CHUNK_SIZE = 1 << 16

ADJACENCIES = ("add", "remove", "both")


class CalibrationError(RuntimeError):
    """Bisection bracket did not straddle the target delta."""


@dataclass(frozen=True)
class PrivacyParams:
    """An (epsilon, delta) differential privacy target."""

    epsilon: float
    delta: float

    def __post_init__(self):
        if self.epsilon < 0.0:
            raise ValueError(f"epsilon must be nonnegative, got {self.epsilon}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class EstimatorResult:
    """Monte Carlo estimate of delta at a fixed epsilon."""

    delta_hat: float
    std_error: float
    sample_count: int
    adjacency: str


@dataclass(frozen=True)
class PldBaseSample:
    """Sigma-independent Monte Carlo draws, reusable across a whole bisection.

    ``standard_normals`` are the raw N(0, I_b) draws; ``projected_noise`` is
    their image under the Gram factor, distributed N(0, G).  Keeping both
    lets the optimizer re-project the same randomness onto an updated matrix.
    """

    mode_indices: np.ndarray
    standard_normals: np.ndarray
    projected_noise: np.ndarray
    gram: np.ndarray
    gram_factor: np.ndarray
    seed: int
    chunk_size: int

    @property
    def sample_count(self) -> int:
        return self.mode_indices.shape[0]

    @property
    def num_modes(self) -> int:
        return self.projected_noise.shape[1]


def gram_factor(gram: np.ndarray) -> np.ndarray:
    """Symmetric factor L with L L^T = G.

    Cholesky first; on failure retries with diagonal jitter
    1e-12 * trace(G)/b, then falls back to an eigendecomposition with
    negative eigenvalues clamped to zero.
    """
    gram = np.asarray(gram, dtype=float)
    if not np.all(np.isfinite(gram)):
        raise ValueError("Gram matrix must be finite")
    try:
        return np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        pass
    b = gram.shape[0]
    jitter = 1e-12 * np.trace(gram) / b
    try:
        return np.linalg.cholesky(gram + jitter * np.eye(b))
    except np.linalg.LinAlgError:
        pass
    eigvals, eigvecs = np.linalg.eigh(gram)
    return eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))


def _chunk_rng(seed: int, chunk_index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(chunk_index,)))


def _chunk_bounds(m: int, chunk_size: int):
    return [(start, min(start + chunk_size, m)) for start in range(0, m, chunk_size)]


def _draw_chunk(seed: int, chunk_index: int, size: int, b: int):
    """Mode indices first, then normals: the order is part of the seed contract."""
    rng = _chunk_rng(seed, chunk_index)
    idx = rng.integers(0, b, size=size, dtype=np.int64)
    normals = rng.standard_normal((size, b))
    return idx, normals


def draw_base_sample(modes: ModeSet, sample_count: int, seed: int,
                     chunk_size: int = DEFAULT_CHUNK_SIZE) -> PldBaseSample:
    """Draw a sigma-independent base sample for the dominating pair of ``modes``.

    Deterministic given ``seed``: chunk i is generated from the RNG stream
    keyed by (seed, i), so the same draws are produced regardless of how the
    estimation is later parallelized.
    """
    if sample_count < 1:
        raise ValueError(f"sample_count must be >= 1, got {sample_count}")
    gram = modes.gram
    b = modes.num_batches
    factor = gram_factor(gram)
    idx = np.empty(sample_count, dtype=np.int64)
    normals = np.empty((sample_count, b))
    for i, (start, end) in enumerate(_chunk_bounds(sample_count, chunk_size)):
        idx[start:end], normals[start:end] = _draw_chunk(seed, i, end - start, b)
    return PldBaseSample(
        mode_indices=idx,
        standard_normals=normals,
        projected_noise=normals @ factor.T,
        gram=gram,
        gram_factor=factor,
        seed=seed,
        chunk_size=chunk_size,
    )


def reproject_base(base: PldBaseSample, gram: np.ndarray) -> PldBaseSample:
    """The same underlying randomness pushed through a new Gram matrix.

    Reuses the stored standard-normal draws, so estimates across different
    strategy matrices share common random numbers (the optimizer's line
    search and finite-difference checks rely on this).
    """
    gram = np.asarray(gram, dtype=float)
    factor = gram_factor(gram)
    return PldBaseSample(
        mode_indices=base.mode_indices,
        standard_normals=base.standard_normals,
        projected_noise=base.standard_normals @ factor.T,
        gram=gram,
        gram_factor=factor,
        seed=base.seed,
        chunk_size=base.chunk_size,
    )


def log_density_ratio(mode_index: int, noise: np.ndarray, sigma: float,
                      gram: np.ndarray, adjacency: str = "add") -> float:
    """Privacy loss of a single projected sample.

    For the add adjacency this is log(P/Q)(m_i + sigma Z) evaluated through
    the inner products u[k] = Z . m_k; for the remove adjacency it is
    log(Q/P)(sigma Z).
    """
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    gram = np.asarray(gram, dtype=float)
    noise = np.asarray(noise, dtype=float).reshape(1, -1)
    out = np.empty(1)
    if adjacency == "add":
        shift = _shift_matrix(gram, sigma)
        _kernels.log_ratio_add(shift, np.array([mode_index], dtype=np.int64),
                               noise, 1.0 / sigma, out)
    elif adjacency == "remove":
        _kernels.log_ratio_remove(_diag_half(gram, sigma), noise, 1.0 / sigma, out)
    else:
        raise ValueError(f"adjacency must be 'add' or 'remove', got {adjacency!r}")
    return float(out[0])


def _shift_matrix(gram: np.ndarray, sigma: float) -> np.ndarray:
    # shift[i, k] = (G[i, k] - G[k, k]/2) / sigma^2
    return np.ascontiguousarray((gram - 0.5 * np.diag(gram)[None, :]) / (sigma * sigma))


def _diag_half(gram: np.ndarray, sigma: float) -> np.ndarray:
    return np.ascontiguousarray(np.diag(gram) / (2.0 * sigma * sigma))


def _clamp_terms(y: np.ndarray, epsilon: float) -> np.ndarray:
    # (1 - e^(eps - Y))_+ via expm1 so near-zero deltas keep full precision.
    diff = epsilon - y
    return np.where(diff < 0.0, -np.expm1(np.minimum(diff, 0.0)), 0.0)


def _map_chunks(fn: Callable[[int], np.ndarray], n_chunks: int,
                threads: int) -> list:
    if threads > 1 and n_chunks > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, range(n_chunks)))
    return [fn(i) for i in range(n_chunks)]


class _ChunkedPld:
    """Per-chunk access to (mode index, projected noise), stored or regenerated."""

    def __init__(self, gram: np.ndarray, chunk_size: int, *, base=None,
                 seed=None, sample_count=None, factor=None):
        self.gram = gram
        self.chunk_size = chunk_size
        self._base = base
        self._seed = seed
        self._factor = factor
        self.sample_count = base.sample_count if base is not None else sample_count
        self.bounds = _chunk_bounds(self.sample_count, chunk_size)

    @classmethod
    def from_base(cls, base: PldBaseSample, gram=None):
        return cls(base.gram if gram is None else np.asarray(gram, dtype=float),
                   base.chunk_size, base=base)

    @classmethod
    def streaming(cls, modes: ModeSet, sample_count: int, seed: int, chunk_size: int):
        return cls(modes.gram, chunk_size, seed=seed, sample_count=sample_count,
                   factor=gram_factor(modes.gram))

    def get(self, i: int):
        start, end = self.bounds[i]
        if self._base is not None:
            return (self._base.mode_indices[start:end],
                    self._base.projected_noise[start:end])
        idx, normals = _draw_chunk(self._seed, i, end - start, self.gram.shape[0])
        return idx, normals @ self._factor.T

    def delta_sums(self, epsilon: float, sigma: float, adjacencies: tuple,
                   threads: int = 1) -> Dict[str, np.ndarray]:
        """Per-adjacency (sum, sum of squares) of the clamp terms.

        Chunk sums are stacked and combined with NumPy's pairwise summation,
        so serial and threaded runs agree bitwise.
        """
        shift = _shift_matrix(self.gram, sigma) if "add" in adjacencies else None
        diag_half = _diag_half(self.gram, sigma) if "remove" in adjacencies else None
        inv_sigma = 1.0 / sigma

        def one_chunk(i: int) -> np.ndarray:
            idx, noise = self.get(i)
            y = np.empty(noise.shape[0])
            parts = []
            if shift is not None:
                _kernels.log_ratio_add(shift, idx, noise, inv_sigma, y)
                terms = _clamp_terms(y, epsilon)
                parts.append((terms.sum(), np.dot(terms, terms)))
            if diag_half is not None:
                _kernels.log_ratio_remove(diag_half, noise, inv_sigma, y)
                terms = _clamp_terms(y, epsilon)
                parts.append((terms.sum(), np.dot(terms, terms)))
            return np.array(parts)

        chunk_sums = np.stack(_map_chunks(one_chunk, len(self.bounds), threads))
        totals = chunk_sums.sum(axis=0)
        out = {}
        row = 0
        for adj in ("add", "remove"):
            if adj in adjacencies:
                out[adj] = totals[row]
                row += 1
        return out

    def log_ratios(self, sigma: float, adjacency: str, threads: int = 1) -> list:
        """Per-chunk privacy-loss arrays at a fixed sigma (for epsilon sweeps)."""
        shift = _shift_matrix(self.gram, sigma)
        diag_half = _diag_half(self.gram, sigma)
        inv_sigma = 1.0 / sigma

        def one_chunk(i: int) -> np.ndarray:
            idx, noise = self.get(i)
            y = np.empty(noise.shape[0])
            if adjacency == "add":
                _kernels.log_ratio_add(shift, idx, noise, inv_sigma, y)
            else:
                _kernels.log_ratio_remove(diag_half, noise, inv_sigma, y)
            return y

        return _map_chunks(one_chunk, len(self.bounds), threads)


def _result_from_sums(sums: np.ndarray, m: int, adjacency: str) -> EstimatorResult:
    total, total_sq = float(sums[0]), float(sums[1])
    delta_hat = total / m
    if m > 1:
        var = max(total_sq - total * total / m, 0.0) / (m - 1)
        std_error = math.sqrt(var / m)
    else:
        std_error = 0.0
    return EstimatorResult(delta_hat, std_error, m, adjacency)


def _wanted(adjacency: str) -> tuple:
    if adjacency not in ADJACENCIES:
        raise ValueError(f"adjacency must be one of {ADJACENCIES}, got {adjacency!r}")
    return ("add", "remove") if adjacency == "both" else (adjacency,)


def _combine_both(per_adj: Dict[str, EstimatorResult]) -> EstimatorResult:
    add, rem = per_adj["add"], per_adj["remove"]
    worst = add if add.delta_hat >= rem.delta_hat else rem
    return EstimatorResult(worst.delta_hat, worst.std_error, worst.sample_count, "both")


def estimate_delta_per_adjacency(epsilon: float, sigma: float, base: PldBaseSample,
                                 gram: Optional[np.ndarray] = None,
                                 adjacency: str = "both",
                                 threads: int = 1) -> Dict[str, EstimatorResult]:
    """Per-adjacency delta estimates on a shared base sample."""
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    wanted = _wanted(adjacency)
    chunks = _ChunkedPld.from_base(base, gram)
    sums = chunks.delta_sums(epsilon, sigma, wanted, threads)
    return {adj: _result_from_sums(sums[adj], chunks.sample_count, adj)
            for adj in wanted}


def estimate_delta(epsilon: float, sigma: float, base: PldBaseSample,
                   gram: Optional[np.ndarray] = None, adjacency: str = "both",
                   threads: int = 1) -> EstimatorResult:
    """Estimate delta at (epsilon, sigma): mean of (1 - e^(eps - Y))_+.

    With adjacency "both", returns the worse of the add and remove estimates
    computed on the same base sample.
    """
    per_adj = estimate_delta_per_adjacency(epsilon, sigma, base, gram,
                                           adjacency, threads)
    if adjacency == "both":
        return _combine_both(per_adj)
    return per_adj[adjacency]


def estimate_delta_streaming(epsilon: float, sigma: float, modes: ModeSet,
                             sample_count: int, seed: int,
                             chunk_size: int = DEFAULT_CHUNK_SIZE,
                             adjacency: str = "both",
                             threads: int = 1) -> EstimatorResult:
    """Like :func:`estimate_delta` but regenerates chunks instead of storing them.

    Bitwise-identical to estimating on ``draw_base_sample(modes, m, seed,
    chunk_size)``; memory stays O(chunk_size) so verification-scale sample
    counts (1e8) are feasible.
    """
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    wanted = _wanted(adjacency)
    chunks = _ChunkedPld.streaming(modes, sample_count, seed, chunk_size)
    sums = chunks.delta_sums(epsilon, sigma, wanted, threads)
    per_adj = {adj: _result_from_sums(sums[adj], sample_count, adj) for adj in wanted}
    if adjacency == "both":
        return _combine_both(per_adj)
    return per_adj[adjacency]


def bernstein_failure_prob(sample_count: int, tau: float, delta: float) -> float:
    """Bernstein tail bound on the verifier missing a true divergence >= tau*delta.

    exp(-s (tau-1)^2 delta / (8 tau/3 - 2/3)); vacuous (=1) at s = 0.
    """
    if tau <= 1.0:
        raise ValueError(f"tau must exceed 1, got {tau}")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if sample_count < 0:
        raise ValueError(f"sample_count must be nonnegative, got {sample_count}")
    exponent = sample_count * (tau - 1.0) ** 2 * delta / (8.0 * tau / 3.0 - 2.0 / 3.0)
    return math.exp(-exponent)


@dataclass(frozen=True)
class GateDecision:
    """Outcome of the estimate-verify-release gate."""

    proceed: bool
    released: PrivacyParams

    @property
    def verdict(self) -> str:
        return "Proceed" if self.proceed else "Abort"


def evr_gate(target: PrivacyParams, delta_hat: float, tau: float) -> GateDecision:
    """Release gate: proceed iff delta_hat <= target delta (inclusive).

    On Proceed the guarantee that holds with the Bernstein failure probability
    is (epsilon, tau * delta)-DP.
    """
    released = PrivacyParams(target.epsilon, min(tau * target.delta, 1.0 - 1e-300))
    return GateDecision(proceed=delta_hat <= target.delta, released=released)


def solve_sigma(delta_target: float, epsilon: float, base: PldBaseSample,
                sigma_max: float, gram: Optional[np.ndarray] = None,
                adjacency: str = "both", threads: int = 1,
                rel_tol: float = 1e-4, max_iters: int = 80) -> float:
    """Bisection for delta_hat(sigma) = delta_target on a fixed base sample.

    The bracket is [1e-6 * sigma_max, sigma_max]; delta_hat is continuous and
    (statistically) decreasing in sigma, so the bracket must straddle the
    target or a CalibrationError is raised.  Returns the upper bracket end,
    i.e. a sigma whose estimate is at most the target.
    """
    def delta_at(sigma: float) -> float:
        return estimate_delta(epsilon, sigma, base, gram, adjacency, threads).delta_hat

    lo = 1e-6 * sigma_max
    hi = sigma_max
    if delta_at(hi) > delta_target:
        raise CalibrationError(
            f"delta_hat({hi:.6g}) > target {delta_target:.3g} at the unamplified "
            "sigma; increase the sample count or check the target")
    if delta_at(lo) < delta_target:
        raise CalibrationError(
            f"delta_hat({lo:.6g}) < target {delta_target:.3g} at the bracket "
            "floor; the target is vacuous for this mechanism")
    for _ in range(max_iters):
        if (hi - lo) <= rel_tol * hi:
            break
        mid = 0.5 * (lo + hi)
        if delta_at(mid) > delta_target:
            lo = mid
        else:
            hi = mid
    return hi


def calibrate_sigma(epsilon: float, delta: float, strategy: StrategyMatrix,
                    schema: ParticipationSchema, sample_count: int, seed: int,
                    *, tau: float = 1.25, adjacency: str = "both",
                    chunk_size: int = DEFAULT_CHUNK_SIZE, threads: int = 1,
                    rel_tol: float = 1e-4, max_iters: int = 80) -> float:
    """Smallest noise multiplier with delta_hat(sigma) = delta / tau.

    The margin delta' = delta / tau leaves room for the verification pass at
    a higher sample count to come in under delta with high probability (pass
    tau = 1 to calibrate to delta itself).  The upper bracket is the analytic
    unamplified calibration at delta'; one base sample is drawn and reused
    for every sigma the bisection probes.
    """
    if tau < 1.0:
        raise ValueError(f"tau must be >= 1, got {tau}")
    delta_prime = delta / tau
    modes = mode_vectors(strategy, schema)
    sigma_max = calibrate_sigma_unamplified(epsilon, delta_prime, strategy, schema)
    base = draw_base_sample(modes, sample_count, seed, chunk_size)
    # 10% headroom over the analytic bracket end: with a single batch the true
    # delta at sigma_max equals the target exactly, so the estimate would sit
    # above it with probability ~1/2.
    return solve_sigma(delta_prime, epsilon, base, 1.1 * sigma_max,
                       adjacency=adjacency, threads=threads,
                       rel_tol=rel_tol, max_iters=max_iters)


def estimate_epsilon(delta: float, sigma: float, base: PldBaseSample,
                     gram: Optional[np.ndarray] = None, adjacency: str = "both",
                     threads: int = 1, epsilon_max: float = 128.0,
                     rel_tol: float = 1e-4) -> float:
    """Invert the delta estimate over epsilon by bisection on [0, epsilon_max].

    The clamp terms are exactly nonincreasing in epsilon for fixed samples, so
    bisection is valid; the privacy losses are computed once and reused.
    Returns 0 when even epsilon = 0 already meets the target delta.
    """
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    wanted = _wanted(adjacency)
    chunks = _ChunkedPld.from_base(base, gram)
    ratios = {adj: chunks.log_ratios(sigma, adj, threads) for adj in wanted}
    m = chunks.sample_count

    def delta_at(epsilon: float) -> float:
        worst = 0.0
        for adj in wanted:
            per_chunk = np.array([_clamp_terms(y, epsilon).sum() for y in ratios[adj]])
            worst = max(worst, float(per_chunk.sum()) / m)
        return worst

    if delta_at(0.0) < delta:
        return 0.0
    if delta_at(epsilon_max) > delta:
        raise CalibrationError(
            f"target delta {delta:.3g} unreachable below epsilon {epsilon_max}")
    lo, hi = 0.0, epsilon_max
    while (hi - lo) > rel_tol * max(hi, 1e-9):
        mid = 0.5 * (lo + hi)
        if delta_at(mid) >= delta:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
