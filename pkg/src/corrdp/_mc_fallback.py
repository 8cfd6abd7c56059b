"""Pure-NumPy privacy-loss kernels, used when the compiled extension is absent.

Both backends implement the same max-shifted log-sum-exp, so they agree to
floating-point noise; bitwise determinism is guaranteed within a backend for
a fixed chunk layout, not across backends.
"""

from __future__ import annotations

import numpy as np

BACKEND = "numpy"


def log_ratio_add(shift: np.ndarray, idx: np.ndarray, noise: np.ndarray,
                  inv_sigma: float, out: np.ndarray) -> None:
    """Privacy losses log(P/Q)(m_i + sigma Z) for a chunk of samples.

    Args:
        shift: (b, b) matrix with shift[i, k] = (G[i, k] - G[k, k]/2) / sigma^2.
        idx: (m,) mode index of each sample.
        noise: (m, b) projected noise u with covariance G.
        inv_sigma: 1 / sigma.
        out: (m,) output buffer for the log ratios.
    """
    scores = shift[idx] + noise * inv_sigma
    peak = scores.max(axis=1)
    np.log(np.exp(scores - peak[:, None]).sum(axis=1), out=out)
    out += peak
    out -= np.log(shift.shape[0])


def log_ratio_remove(diag_half: np.ndarray, noise: np.ndarray,
                     inv_sigma: float, out: np.ndarray) -> None:
    """Privacy losses log(Q/P)(sigma Z) for a chunk of samples.

    Args:
        diag_half: (b,) vector G[k, k] / (2 sigma^2).
        noise: (m, b) projected noise u with covariance G.
        inv_sigma: 1 / sigma.
        out: (m,) output buffer for the log ratios.
    """
    scores = noise * inv_sigma - diag_half
    peak = scores.max(axis=1)
    np.log(np.exp(scores - peak[:, None]).sum(axis=1), out=out)
    out += peak
    out -= np.log(diag_half.shape[0])
    np.negative(out, out=out)
