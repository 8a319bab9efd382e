"""Biased MMD between feature batches and the joint / class-conditional match losses.

All gradients are analytic and treat the kernel bandwidths as constants.
"""

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from itdm.kernels import KernelBank, build_bank, median_sq_dist
from itdm.tensor import as_tensor, pairwise_sq_dist

SQRT_EPS = 1e-12


@dataclass
class FeatureBatch:
    """Latent features (one row per sample) and the matching class labels."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = as_tensor(self.features, 2, "features")
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.shape[0] == 0:
            raise ValueError("feature batch is empty")
        if self.labels.shape[0] != self.features.shape[0]:
            raise ValueError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )
        if np.any(self.labels < 0):
            raise ValueError("labels must be non-negative")

    def __len__(self):
        return self.features.shape[0]


@dataclass
class MatchResult:
    loss: float
    grad_h1: np.ndarray
    grad_h2: np.ndarray
    sigma_med: float
    classes_matched: int = 0
    class_sigmas: dict = field(default_factory=dict)


class KernelWork:
    """Counts kernel-matrix entries evaluated (summed over bank components)."""

    def __init__(self):
        self.entries = 0


_active_counters = []


@contextmanager
def count_kernel_work():
    counter = KernelWork()
    _active_counters.append(counter)
    try:
        yield counter
    finally:
        _active_counters.remove(counter)


def _record_work(n):
    for c in _active_counters:
        c.entries += n


def _kernel_and_weight(sq, bank):
    # k_mix and (1/g) sum_i k_i / sigma_i; the latter drives the input gradient
    k = np.zeros_like(sq)
    w = np.zeros_like(sq)
    for sigma in bank.sigmas:
        ki = np.exp(-sq / sigma)
        k += ki
        w += ki / sigma
    _record_work(sq.size * bank.g)
    return k / bank.g, w / bank.g


def mmd_sq_with_grad(h1, h2, bank):
    """Biased squared MMD and its gradients with respect to both feature matrices.

    Returns ``(value, grad_h1, grad_h2)`` where ``value`` is the raw three-term
    V-statistic (possibly a round-off negative).
    """
    x = as_tensor(h1, 2, "h1")
    y = as_tensor(h2, 2, "h2")
    m1, m2 = x.shape[0], y.shape[0]
    if m1 == 0 or m2 == 0:
        raise ValueError("MMD needs non-empty batches")
    kxx, wxx = _kernel_and_weight(pairwise_sq_dist(x, x), bank)
    kyy, wyy = _kernel_and_weight(pairwise_sq_dist(y, y), bank)
    kxy, wxy = _kernel_and_weight(pairwise_sq_dist(x, y), bank)

    xx = kxx.sum() / (m1 * m1)
    yy = kyy.sum() / (m2 * m2)
    xy = kxy.sum() / (m1 * m2)
    value = xx + yy - 2.0 * xy

    # d/dx_a sum_ij k(x_i, x_j) = -4 sum_j w_aj (x_a - x_j), pair counted twice
    c_xx = 4.0 / (m1 * m1)
    c_yy = 4.0 / (m2 * m2)
    c_xy = 4.0 / (m1 * m2)
    pull_xx = wxx.sum(axis=1)[:, None] * x - wxx @ x
    pull_yy = wyy.sum(axis=1)[:, None] * y - wyy @ y
    pull_xy = wxy.sum(axis=1)[:, None] * x - wxy @ y
    pull_yx = wxy.sum(axis=0)[:, None] * y - wxy.T @ x
    grad_x = c_xy * pull_xy - c_xx * pull_xx
    grad_y = c_xy * pull_yx - c_yy * pull_yy
    return float(value), grad_x, grad_y


def mmd_sq_biased(h1, h2, bank):
    """Biased (diagonal-inclusive) squared MMD under the mixture kernel, clamped at 0."""
    x = as_tensor(h1, 2, "h1")
    y = as_tensor(h2, 2, "h2")
    m1, m2 = x.shape[0], y.shape[0]
    if m1 == 0 or m2 == 0:
        raise ValueError("MMD needs non-empty batches")
    kxx, _ = _kernel_and_weight(pairwise_sq_dist(x, x), bank)
    kyy, _ = _kernel_and_weight(pairwise_sq_dist(y, y), bank)
    kxy, _ = _kernel_and_weight(pairwise_sq_dist(x, y), bank)
    value = kxx.sum() / (m1 * m1) + kyy.sum() / (m2 * m2) - 2.0 * (kxy.sum() / (m1 * m2))
    return max(float(value), 0.0)


def _features(batch):
    return batch.features if isinstance(batch, FeatureBatch) else as_tensor(batch, 2)


def match_joint(h1, h2, g=5, use_sqrt=True, sigma_med=None):
    """Match loss between the feature sets of two mini-batches.

    The bandwidth is the median cross-pair squared distance unless ``sigma_med``
    is supplied (used to freeze it for gradient checks). With ``use_sqrt`` the
    loss is ``sqrt(MMD^2 + 1e-12)``, otherwise the squared MMD itself.
    """
    x = _features(h1)
    y = _features(h2)
    if sigma_med is None:
        sigma_med = median_sq_dist(x, y)
    bank = build_bank(sigma_med, g)
    value, gx, gy = mmd_sq_with_grad(x, y, bank)
    value = max(value, 0.0)
    if use_sqrt:
        loss = float(np.sqrt(value + SQRT_EPS))
        scale = 0.5 / loss
        gx = gx * scale
        gy = gy * scale
    else:
        loss = value
    return MatchResult(loss, gx, gy, float(sigma_med), classes_matched=1)


def match_class_conditional(h1, h2, num_classes, g=5, use_sqrt=True, class_sigmas=None):
    """Average of per-class joint matches over classes present in both batches.

    Each class gets its own median bandwidth. Classes missing from either batch
    are skipped and left out of the average. ``class_sigmas`` maps class index
    to a fixed bandwidth and overrides the median estimate.
    """
    if not isinstance(h1, FeatureBatch) or not isinstance(h2, FeatureBatch):
        raise TypeError("class-conditional matching needs labelled FeatureBatch inputs")
    for b in (h1, h2):
        if np.any(b.labels >= num_classes):
            raise ValueError(f"label out of range for {num_classes} classes")
    grad1 = np.zeros_like(h1.features)
    grad2 = np.zeros_like(h2.features)
    per_class = []
    for k in range(num_classes):
        idx1 = np.flatnonzero(h1.labels == k)
        idx2 = np.flatnonzero(h2.labels == k)
        if idx1.size == 0 or idx2.size == 0:
            continue
        fixed = None if class_sigmas is None else class_sigmas[k]
        res = match_joint(h1.features[idx1], h2.features[idx2], g, use_sqrt, sigma_med=fixed)
        per_class.append((k, idx1, idx2, res))

    matched = len(per_class)
    if matched == 0:
        return MatchResult(0.0, grad1, grad2, 0.0, classes_matched=0)
    loss = 0.0
    for k, idx1, idx2, res in per_class:
        loss += res.loss
        grad1[idx1] = res.grad_h1 / matched
        grad2[idx2] = res.grad_h2 / matched
    sigmas = {k: res.sigma_med for k, _, _, res in per_class}
    return MatchResult(
        loss / matched,
        grad1,
        grad2,
        float(np.mean(list(sigmas.values()))),
        classes_matched=matched,
        class_sigmas=sigmas,
    )
