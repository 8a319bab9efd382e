"""In-training distribution matching: SGD with a mini-batch MMD regularizer."""

from itdm.kernels import KernelBank, build_bank, gaussian_kernel_grad, gaussian_kernel_matrix, median_sq_dist, mixture_kernel_matrix
from itdm.mmd import FeatureBatch, MatchResult, match_class_conditional, match_joint, mmd_sq_biased
from itdm.nn import Model, Optimizer, backward, default_architectures, forward, sgd_momentum_step, softmax_cross_entropy
from itdm.trainer import MetricsRecord, TrainConfig, evaluate, itdm_step, train

__version__ = "0.1.0"

__all__ = [
    "FeatureBatch",
    "KernelBank",
    "MatchResult",
    "MetricsRecord",
    "Model",
    "Optimizer",
    "TrainConfig",
    "backward",
    "build_bank",
    "default_architectures",
    "evaluate",
    "forward",
    "gaussian_kernel_grad",
    "gaussian_kernel_matrix",
    "itdm_step",
    "match_class_conditional",
    "match_joint",
    "median_sq_dist",
    "mixture_kernel_matrix",
    "mmd_sq_biased",
    "sgd_momentum_step",
    "softmax_cross_entropy",
    "train",
]
