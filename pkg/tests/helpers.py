"""Shared independent oracles for the test suite.

These deliberately avoid the library's projected sampling and radial
quadrature paths: the full-dimensional estimator samples in the ambient
space, and the grid integrator is a plain midpoint rule.
"""

import numpy as np
from scipy.special import logsumexp


def full_dimensional_delta(mode_matrix: np.ndarray, sigma: float, epsilon: float,
                           sample_count: int, seed: int, adjacency: str = "add"):
    """Monte Carlo delta using ambient-space sampling X = m_i + sigma Z.

    Returns (delta_hat, std_error).  Independent of the projected path:
    draws Z in R^n directly and evaluates the mixture densities from the
    mode matrix.
    """
    n, b = mode_matrix.shape
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, b, sample_count)
    z = rng.standard_normal((sample_count, n))
    if adjacency == "add":
        x = mode_matrix.T[idx] + sigma * z
    else:
        x = sigma * z
    # log P(x)/Q(x) = lse_j[(x.m_j - |m_j|^2/2)/sigma^2] - log b
    inner = x @ mode_matrix
    sq = 0.5 * (mode_matrix * mode_matrix).sum(axis=0)
    log_ratio = logsumexp((inner - sq[None, :]) / sigma ** 2, axis=1) - np.log(b)
    if adjacency == "remove":
        log_ratio = -log_ratio
    terms = np.maximum(1.0 - np.exp(epsilon - log_ratio), 0.0)
    delta_hat = terms.mean()
    std_error = terms.std(ddof=1) / np.sqrt(sample_count)
    return float(delta_hat), float(std_error)


def grid_hockey_stick(modes: np.ndarray, weights: np.ndarray, sigma: float,
                      alpha: float, points_per_axis: int = 200) -> float:
    """Midpoint-rule integral of max(P - alpha Q, 0) on the mode span."""
    _, svals, vt = np.linalg.svd(np.atleast_2d(modes), full_matrices=False)
    rank = int((svals > 1e-12).sum())
    if rank == 0:
        return max(1.0 - alpha, 0.0)
    reduced = modes @ vt[:rank].T / sigma
    extent = float(np.linalg.norm(reduced, axis=1).max()) + 10.0
    axis = (np.arange(points_per_axis) + 0.5) / points_per_axis * 2 * extent - extent
    grid = np.stack(np.meshgrid(*[axis] * rank, indexing="ij"), -1).reshape(-1, rank)
    cell = (2 * extent / points_per_axis) ** rank
    norm = (2 * np.pi) ** (-rank / 2)
    q = norm * np.exp(-0.5 * (grid ** 2).sum(axis=1))
    p = np.zeros(grid.shape[0])
    for w, center in zip(weights, reduced):
        p += w * norm * np.exp(-0.5 * ((grid - center) ** 2).sum(axis=1))
    return float(np.maximum(p - alpha * q, 0.0).sum() * cell)
