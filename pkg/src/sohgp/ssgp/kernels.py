"""Covariance functions used by the battery-specific and population models."""

import numpy as np


def wv_kernel(t, t2, sigma):
    """Wiener-velocity covariance, anchored to zero at ``t = 0``.

    ``sigma**2 * (min(t,t')**3 / 3 + |t - t'| * min(t,t')**2 / 2)``; broadcasts
    over array inputs.
    """
    t = np.asarray(t, dtype=float)
    t2 = np.asarray(t2, dtype=float)
    if np.any(t < 0) or np.any(t2 < 0):
        raise ValueError("Wiener-velocity kernel is defined for non-negative time only")
    lo = np.minimum(t, t2)
    # lo^2 (2 lo + 3|dt|) / 6 keeps the rational spot values exact in floating point
    return sigma**2 * (lo**2 * (2.0 * lo + 3.0 * np.abs(t - t2)) / 6.0)


def wv_gram(t, sigma):
    t = np.asarray(t, dtype=float)
    return wv_kernel(t[:, None], t[None, :], sigma)


def se_kernel(x, x2, sigma, lengths):
    """Squared-exponential ARD covariance between row sets ``x`` (n, D) and ``x2`` (m, D)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    x2 = np.atleast_2d(np.asarray(x2, dtype=float))
    diff = (x[:, None, :] - x2[None, :, :]) / np.asarray(lengths, dtype=float)
    return sigma**2 * np.exp(-0.5 * np.einsum("ijk,ijk->ij", diff, diff))


def wv_discretisation(dt, sigma):
    """Transition matrix and process covariance of the WV SDE over a step ``dt``."""
    A = np.array([[1.0, dt], [0.0, 1.0]])
    Q = sigma**2 * np.array([[dt**3 / 3.0, dt**2 / 2.0], [dt**2 / 2.0, dt]])
    return A, Q
