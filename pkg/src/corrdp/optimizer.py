"""Gradient-descent optimization of Toeplitz and BLT strategies under amplification.

The objective is the prefix-sum RMSE sigma(C) * ||A C^{-1}||_F, where sigma(C)
is pinned to the calibration constraint delta_hat(sigma; C) = delta'.  The
calibration itself runs through bisection, so sigma is differentiated
implicitly: holding the Monte Carlo sample fixed,

    d sigma / d params = -(d delta_hat / d params) / (d delta_hat / d sigma),

and every partial on the right is available in closed form because delta_hat
is built from smooth maps of (sigma, C): the mixture log-sum-exp, the mode
Gram matrix, its Cholesky factor (the sampled noise is re-projected through
it), and the clamp.  The norm factor is differentiated through the Toeplitz
inverse power-series recurrence.

Each step recalibrates sigma on that step's sample set, takes a projected
gradient step, and backtracks (up to 10 halvings) until the objective
decreases under the same samples; the reported final (sigma, RMSE) always
comes from one independent high-sample calibration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.linalg

from .accounting import (
    CalibrationError,
    PldBaseSample,
    draw_base_sample,
    estimate_delta,
    reproject_base,
    solve_sigma,
)
from .gaussian import calibrate_sigma_gaussian
from .strategies import (
    BltStrategy,
    ModeSet,
    ParticipationSchema,
    StrategyMatrix,
    ToeplitzStrategy,
    toeplitz_inverse_coeffs,
)


class DegenerateConstraintError(RuntimeError):
    """The calibration constraint has (numerically) zero slope in sigma."""


# ---------------------------------------------------------------------------
# delta_hat and its closed-form partials
# ---------------------------------------------------------------------------


def toeplitz_modes(coeffs: np.ndarray, schema: ParticipationSchema) -> np.ndarray:
    """Mode matrix (n x b) of a nonnegative Toeplitz strategy.

    Only valid for nonnegative coefficients (then |C| = C and the map is
    linear in the coefficients, which the gradients below exploit).
    """
    coeffs = np.asarray(coeffs, dtype=float)
    if np.any(coeffs < 0.0):
        raise ValueError("toeplitz_modes requires nonnegative coefficients")
    n = schema.iterations
    c = np.zeros(n)
    c[: coeffs.size] = coeffs
    full = scipy.linalg.toeplitz(c, np.zeros(n))
    return full.reshape(n, schema.epochs, schema.batches_per_epoch).sum(axis=1)


def gram_coeff_jacobian(modes: np.ndarray, schema: ParticipationSchema,
                        n_coeffs: int) -> np.ndarray:
    """Tensor T with dG/dc_k = T[k] + T[k]^T for the Toeplitz mode Gram matrix.

    T[k][p, q] = sum over epochs j of M[k + p + j*b, q] (rows past n read 0).
    """
    n, b = modes.shape
    padded = np.vstack([modes, np.zeros((n_coeffs + b, b))])
    tensor = np.zeros((n_coeffs, b, b))
    ks = np.arange(n_coeffs)
    for j in range(schema.epochs):
        for p in range(b):
            tensor[:, p, :] += padded[ks + p + j * b, :]
    return tensor


def cholesky_backward(factor: np.ndarray, factor_bar: np.ndarray) -> np.ndarray:
    """Adjoint of G -> cholesky(G): Gbar with df = <Gbar, dG> for symmetric dG."""
    p = factor.T @ factor_bar
    phi = np.tril(p, -1) + 0.5 * np.diag(np.diag(p))
    sym = phi + phi.T
    half = scipy.linalg.solve_triangular(factor.T, sym, lower=False)
    return 0.5 * scipy.linalg.solve_triangular(factor.T, half.T, lower=False).T


@dataclass(frozen=True)
class DeltaPartials:
    """delta_hat with derivatives at fixed Monte Carlo samples."""

    delta_hat: float
    d_sigma: float
    d_coeffs: np.ndarray
    adjacency: str


def _branch_partials(gram, factor, base, sigma, epsilon, adjacency):
    """Closed-form partials of one adjacency's delta_hat w.r.t. sigma and G."""
    v = base.standard_normals
    idx = base.mode_indices
    m = v.shape[0]
    noise = v @ factor.T
    diag = np.diag(gram)
    inv_s2 = 1.0 / (sigma * sigma)
    if adjacency == "add":
        direct = gram[idx] - 0.5 * diag[None, :]
        scores = direct * inv_s2 + noise / sigma
        sign = 1.0
    else:
        direct = np.broadcast_to(-0.5 * diag[None, :], noise.shape)
        scores = noise / sigma - 0.5 * diag[None, :] * inv_s2
        sign = -1.0
    peak = scores.max(axis=1)
    expd = np.exp(scores - peak[:, None])
    norm = expd.sum(axis=1)
    y = sign * (peak + np.log(norm) - math.log(gram.shape[0]))
    diff = epsilon - y
    delta_hat = float(np.where(diff < 0.0, -np.expm1(np.minimum(diff, 0.0)), 0.0).mean())

    active = y > epsilon
    # d delta_hat / dY_j, folded with the mixture softmax and the branch sign.
    gy = np.where(active, np.exp(np.minimum(epsilon - y, 0.0)), 0.0) / m
    weights = expd / norm[:, None]
    coef = (sign * gy)[:, None] * weights

    d_scores_d_sigma = -2.0 * direct / sigma ** 3 - noise * inv_s2
    d_sigma = float((coef * d_scores_d_sigma).sum())

    gram_bar = np.zeros_like(gram)
    scaled = coef * inv_s2
    if adjacency == "add":
        np.add.at(gram_bar, idx, scaled)
    step = gram.shape[0] + 1
    gram_bar.flat[::step] -= 0.5 * scaled.sum(axis=0)

    noise_bar = coef / sigma
    factor_bar = noise_bar.T @ v
    gram_bar += cholesky_backward(factor, factor_bar)
    return delta_hat, d_sigma, gram_bar


def delta_hat_partials(coeffs: np.ndarray, schema: ParticipationSchema,
                       sigma: float, base: PldBaseSample, epsilon: float,
                       adjacency: str = "both") -> DeltaPartials:
    """delta_hat and its derivatives w.r.t. sigma and the Toeplitz coefficients.

    The Monte Carlo sample (mode indices and standard normals) is held fixed;
    the noise is re-projected through the Cholesky factor of the Gram matrix
    of ``coeffs``, exactly as the estimator evaluates it.  With adjacency
    "both", the partials of the larger branch are returned (a subgradient of
    the max; ties go to "add").

    Raises:
        ValueError: sigma <= 0 or negative coefficients.
    """
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    modes = toeplitz_modes(coeffs, schema)
    gram = modes.T @ modes
    factor = np.linalg.cholesky(gram)
    branches = ("add", "remove") if adjacency == "both" else (adjacency,)
    results = {adj: _branch_partials(gram, factor, base, sigma, epsilon, adj)
               for adj in branches}
    best = max(branches, key=lambda adj: (results[adj][0], adj == "add"))
    delta_hat, d_sigma, gram_bar = results[best]

    tensor = gram_coeff_jacobian(modes, schema, np.asarray(coeffs).size)
    d_coeffs = np.einsum("pq,kpq->k", gram_bar + gram_bar.T, tensor)
    return DeltaPartials(delta_hat, d_sigma, d_coeffs, best)


def delta_hat_for_coeffs(coeffs: np.ndarray, schema: ParticipationSchema,
                         sigma: float, base: PldBaseSample, epsilon: float,
                         adjacency: str = "both") -> float:
    """The estimator delta_hat as a plain function of (sigma, coeffs).

    This is the function the partials above differentiate; finite differences
    of it are the gradient test oracle.
    """
    modes = toeplitz_modes(coeffs, schema)
    projected = reproject_base(base, modes.T @ modes)
    return estimate_delta(epsilon, sigma, projected, adjacency=adjacency).delta_hat


def implicit_sigma_gradient(d_coeffs: np.ndarray, d_sigma: float, *,
                            delta_target: float, sigma: float) -> np.ndarray:
    """d sigma / d coeffs from the calibration constraint delta_hat = const.

    Requires a strictly negative d delta_hat / d sigma; a slope smaller than
    1e-3 * delta_target / sigma (in magnitude) means the constraint surface
    is degenerate at this point.
    """
    if not d_sigma < 0.0 or abs(d_sigma) < 1e-3 * delta_target / sigma:
        raise DegenerateConstraintError(
            f"d delta_hat/d sigma = {d_sigma:.3g} too flat at sigma={sigma:.4g}")
    return -d_coeffs / d_sigma


# ---------------------------------------------------------------------------
# RMSE norm factor and its gradient through the inverse recurrence
# ---------------------------------------------------------------------------


def _toeplitz_transpose_apply(kernel: np.ndarray, vec: np.ndarray) -> np.ndarray:
    # (T_kernel^T v)_j = sum_{k >= j} kernel[k - j] * v[k]
    n = vec.size
    return np.convolve(vec[::-1], kernel)[:n][::-1]


def prefix_norm_and_grad(coeffs: np.ndarray, n: int):
    """||A C^{-1}||_F and its gradient w.r.t. the Toeplitz coefficients.

    With g the inverse coefficients and h their prefix sums,
    F^2 = sum_k (n - k) h_k^2; the adjoint runs back through the cumulative
    sum and the inverse-series relation dg = -T_g T_g dc.
    """
    g = toeplitz_inverse_coeffs(coeffs, n)
    h = np.cumsum(g)
    wts = n - np.arange(n)
    norm = math.sqrt(float(np.sum(wts * h * h)))
    h_bar = wts * h / norm
    g_bar = np.cumsum(h_bar[::-1])[::-1]
    c_bar = -_toeplitz_transpose_apply(g, _toeplitz_transpose_apply(g, g_bar))
    full = np.zeros(n)
    k = min(np.asarray(coeffs).size, n)
    full[:k] = c_bar[:k]
    return norm, full[: np.asarray(coeffs).size]


def rmse_gradient(coeffs: np.ndarray, n: int, sigma: float,
                  sigma_grad: np.ndarray):
    """Gradient of sigma * ||A C^{-1}||_F given the implicit sigma gradient."""
    norm, norm_grad = prefix_norm_and_grad(coeffs, n)
    return sigma * norm_grad + norm * sigma_grad


# ---------------------------------------------------------------------------
# Parameter families
# ---------------------------------------------------------------------------


class _ToeplitzFamily:
    """Free coefficients c_1..c_{n-1} with c_0 = 1 pinned."""

    name = "toeplitz"

    def __init__(self, n: int):
        self.n = n

    def init_params(self) -> np.ndarray:
        return np.zeros(self.n - 1)

    def coeffs(self, params: np.ndarray) -> np.ndarray:
        return np.concatenate([[1.0], params])

    def chain(self, params: np.ndarray, coeff_grad: np.ndarray) -> np.ndarray:
        return coeff_grad[1:]

    def project(self, params: np.ndarray) -> np.ndarray:
        return np.clip(params, 0.0, None)

    def to_strategy(self, params: np.ndarray) -> ToeplitzStrategy:
        return ToeplitzStrategy(self.coeffs(params), self.n)


class _BltFamily:
    """Buffer weights and decays, packed as [w_1..w_d, theta_1..theta_d]."""

    name = "blt"

    def __init__(self, n: int, buffers: int):
        self.n = n
        self.buffers = buffers

    def init_params(self) -> np.ndarray:
        decays = np.linspace(0.3, 0.9, self.buffers + 2)[1:-1]
        return np.concatenate([np.full(self.buffers, 0.1), decays])

    def _split(self, params):
        return params[: self.buffers], params[self.buffers :]

    def coeffs(self, params: np.ndarray) -> np.ndarray:
        weights, decays = self._split(params)
        k = np.arange(1, self.n)
        out = np.empty(self.n)
        out[0] = 1.0
        out[1:] = (weights[:, None] * decays[:, None] ** (k - 1)[None, :]).sum(axis=0)
        return out

    def chain(self, params: np.ndarray, coeff_grad: np.ndarray) -> np.ndarray:
        weights, decays = self._split(params)
        k = np.arange(1, self.n)
        pow_km1 = decays[:, None] ** (k - 1)[None, :]
        grad_w = pow_km1 @ coeff_grad[1:]
        # d c_k / d theta = w (k-1) theta^(k-2); the k = 1 term vanishes.
        pow_km2 = np.zeros_like(pow_km1)
        pow_km2[:, 1:] = decays[:, None] ** (k[1:] - 2)[None, :]
        grad_th = (weights[:, None] * (k - 1)[None, :] * pow_km2) @ coeff_grad[1:]
        return np.concatenate([grad_w, grad_th])

    def project(self, params: np.ndarray) -> np.ndarray:
        weights, decays = self._split(params)
        return np.concatenate([np.clip(weights, 0.0, None),
                               np.clip(decays, 1e-3, 1.0 - 1e-3)])

    def to_strategy(self, params: np.ndarray) -> BltStrategy:
        weights, decays = self._split(params)
        return BltStrategy(self.n, weights, decays)


def _make_family(name: str, n: int, buffers: int):
    if name == "toeplitz":
        return _ToeplitzFamily(n)
    if name == "blt":
        return _BltFamily(n, buffers)
    raise ValueError(f"unknown family {name!r}; expected 'toeplitz' or 'blt'")


# ---------------------------------------------------------------------------
# The optimization loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    """Settings for RMSE optimization under the amplified calibration."""

    family: str
    epsilon: float
    delta: float
    schema: ParticipationSchema
    steps: int
    learning_rate: float
    samples_per_step: int
    final_sample_count: int
    seed: int
    buffers: int = 3
    tau: float = 1.25
    adjacency: str = "both"
    resample_each_step: bool = True
    max_halvings: int = 10
    chunk_size: int = 1 << 16
    threads: int = 1

    def __post_init__(self):
        if self.family not in ("toeplitz", "blt"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.final_sample_count < self.samples_per_step:
            raise ValueError("final_sample_count must be >= samples_per_step")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")


@dataclass(frozen=True)
class StepRecord:
    step: int
    rmse: float
    sigma: float
    grad_norm: float
    accepted: bool
    rmse_after: Optional[float] = None
    note: str = ""


@dataclass
class OptimizationTrace:
    records: List[StepRecord] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {"steps": [vars(r) for r in self.records]}


@dataclass(frozen=True)
class OptimizationResult:
    strategy: StrategyMatrix
    params: np.ndarray
    sigma: float
    rmse: float
    trace: OptimizationTrace


def _calibrated_objective(coeffs, schema, base, epsilon, delta_prime, adjacency,
                          threads):
    """(sigma, norm, rmse) with sigma solved on the given base sample."""
    modes = toeplitz_modes(coeffs, schema)
    sens = float(np.sqrt((modes * modes).sum(axis=0).max()))
    sigma_max = calibrate_sigma_gaussian(epsilon, delta_prime, sens)
    projected = reproject_base(base, modes.T @ modes)
    sigma = solve_sigma(delta_prime, epsilon, projected, 1.1 * sigma_max,
                        adjacency=adjacency, threads=threads)
    norm = prefix_norm_and_grad(coeffs, schema.iterations)[0]
    return sigma, norm, sigma * norm


def optimize(config: OptimizerConfig) -> OptimizationResult:
    """Projected gradient descent on the amplified prefix-sum RMSE.

    Every step draws (or reuses) a base sample, solves sigma on it, forms the
    implicit gradient, and accepts the first backtracked candidate that
    decreases the objective under the same sample.  Stops early after 10
    consecutive stepless iterations.  The returned sigma and RMSE come from a
    final independent calibration at ``final_sample_count``.
    """
    schema = config.schema
    n = schema.iterations
    family = _make_family(config.family, n, config.buffers)
    params = family.init_params()
    delta_prime = config.delta / config.tau
    trace = OptimizationTrace()

    base = None
    stall = 0
    for step in range(config.steps):
        if base is None or config.resample_each_step:
            modes = ModeSet(toeplitz_modes(family.coeffs(params), schema))
            base = draw_base_sample(modes, config.samples_per_step,
                                    config.seed + step, config.chunk_size)
        coeffs = family.coeffs(params)
        try:
            sigma, norm, objective = _calibrated_objective(
                coeffs, schema, base, config.epsilon, delta_prime,
                config.adjacency, config.threads)
            partials = delta_hat_partials(coeffs, schema, sigma, base,
                                          config.epsilon, config.adjacency)
            sigma_grad = implicit_sigma_gradient(
                partials.d_coeffs, partials.d_sigma,
                delta_target=delta_prime, sigma=sigma)
        except (CalibrationError, DegenerateConstraintError) as exc:
            trace.records.append(StepRecord(step, math.nan, math.nan, math.nan,
                                            accepted=False, note=str(exc)))
            stall += 1
            if stall >= 10:
                break
            continue
        grad = family.chain(params, rmse_gradient(coeffs, n, sigma, sigma_grad))
        grad_norm = float(np.linalg.norm(grad))

        accepted = None
        scale = config.learning_rate
        for _ in range(config.max_halvings + 1):
            candidate = family.project(params - scale * grad)
            try:
                _, _, cand_objective = _calibrated_objective(
                    family.coeffs(candidate), schema, base, config.epsilon,
                    delta_prime, config.adjacency, config.threads)
            except CalibrationError:
                scale *= 0.5
                continue
            if cand_objective < objective:
                accepted = (candidate, cand_objective)
                break
            scale *= 0.5
        if accepted is None:
            trace.records.append(StepRecord(step, objective, sigma, grad_norm,
                                            accepted=False))
            stall += 1
            if stall >= 10:
                break
        else:
            params, new_objective = accepted
            trace.records.append(StepRecord(step, objective, sigma, grad_norm,
                                            accepted=True,
                                            rmse_after=new_objective))
            stall = 0

    final_modes = ModeSet(toeplitz_modes(family.coeffs(params), schema))
    final_base = draw_base_sample(final_modes, config.final_sample_count,
                                  config.seed + (1 << 20), config.chunk_size)
    sigma, _, rmse_final = _calibrated_objective(
        family.coeffs(params), schema, final_base, config.epsilon, delta_prime,
        config.adjacency, config.threads)
    return OptimizationResult(family.to_strategy(params), params, sigma,
                              rmse_final, trace)
