"""Gaussian kernels, their input gradient, and the median bandwidth heuristic.

Bandwidths are in squared-distance units: ``k(x, y) = exp(-|x - y|^2 / sigma)``.
"""

from dataclasses import dataclass

import numpy as np

from itdm.tensor import as_tensor, pairwise_sq_dist

SIGMA_FLOOR = 1e-8


def _check_sigma(sigma):
    if not np.isfinite(sigma) or sigma <= 0:
        raise ValueError(f"bandwidth must be positive and finite, got {sigma}")


@dataclass(frozen=True)
class KernelBank:
    """Bandwidths of an equally weighted mixture of Gaussian kernels."""

    sigmas: tuple
    sigma_med: float

    def __post_init__(self):
        if len(self.sigmas) == 0:
            raise ValueError("a kernel bank needs at least one bandwidth")
        for s in self.sigmas:
            _check_sigma(s)

    @property
    def g(self):
        return len(self.sigmas)


def gaussian_kernel_matrix(sq_dists, sigma):
    _check_sigma(sigma)
    sq_dists = as_tensor(sq_dists)
    if np.any(sq_dists < 0):
        raise ValueError("squared distances must be non-negative")
    return np.exp(-sq_dists / sigma)


def gaussian_kernel_grad(x, y, sigma):
    """Gradient of ``k(x, y)`` with respect to ``x``: ``-2 k(x, y) (x - y) / sigma``."""
    _check_sigma(sigma)
    x = as_tensor(x, 1, "x")
    y = as_tensor(y, 1, "y")
    diff = x - y
    k = np.exp(-np.dot(diff, diff) / sigma)
    return -2.0 * k * diff / sigma


def median_sq_dist(h1, h2):
    """Lower median of the squared distances over all cross pairs of ``h1`` and ``h2``.

    Clamped below at ``SIGMA_FLOOR`` so a collapsed batch still yields a usable
    bandwidth.
    """
    h1 = as_tensor(h1, 2, "h1")
    h2 = as_tensor(h2, 2, "h2")
    if h1.shape[0] == 0 or h2.shape[0] == 0:
        raise ValueError("median_sq_dist needs non-empty inputs")
    flat = pairwise_sq_dist(h1, h2).ravel()
    k = (flat.size - 1) // 2
    med = float(np.partition(flat, k)[k])
    return max(med, SIGMA_FLOOR)


def build_bank(sigma_med, g=5):
    """Bank with bandwidths ``2**i * sigma_med`` for ``i = 0 .. g-1``."""
    _check_sigma(sigma_med)
    if int(g) != g or g < 1:
        raise ValueError(f"kernel count must be a positive integer, got {g}")
    return KernelBank(tuple(float(sigma_med) * 2.0**i for i in range(int(g))), float(sigma_med))


def mixture_kernel_matrix(sq_dists, bank):
    sq_dists = as_tensor(sq_dists)
    total = np.zeros_like(sq_dists)
    for sigma in bank.sigmas:
        total += gaussian_kernel_matrix(sq_dists, sigma)
    return total / bank.g
