"""Dense float64 array helpers shared by every other module.

Arrays are plain ``numpy.ndarray`` objects in float64. The helpers here add the
shape validation and finiteness checks the rest of the package relies on.
"""

import numpy as np

DTYPE = np.float64


def as_tensor(x, ndim=None, name="tensor"):
    arr = np.asarray(x, dtype=DTYPE)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    return arr


def check_finite(arr, name="result"):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name} contains NaN or Inf")
    return arr


def matmul(a, b):
    """Matrix product of an (m, k) and a (k, n) array."""
    a = as_tensor(a, 2, "a")
    b = as_tensor(b, 2, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul")


def pairwise_sq_dist(x, y):
    """Squared Euclidean distances between every row of ``x`` and every row of ``y``.

    Uses direct differences rather than the ``|x|^2 + |y|^2 - 2xy`` expansion so
    entries are never negative and self-distances are exactly zero.
    """
    x = as_tensor(x, 2, "x")
    y = as_tensor(y, 2, "y")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"feature dimensions disagree: {x.shape[1]} vs {y.shape[1]}")
    diff = x[:, None, :] - y[None, :, :]
    return check_finite(np.einsum("ijk,ijk->ij", diff, diff), "pairwise_sq_dist")


def make_rng(seed):
    """Seeded PCG64 generator; the same seed gives the same stream everywhere."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.Generator(np.random.PCG64(int(seed)))
