"""Class-conditional distribution augmentation for domain generalization.

Submodules:

- ``autodiff``: tape-based reverse-mode autodiff and Adam.
- ``stats``: per-instance/per-cell Gaussian statistics and the momentum bank.
- ``kernel``: W2/RBF kernel embedding and the distribution-level classifier.
- ``augment``: distribution-level Universum, resampling and distribution mixup.
- ``training``: model, losses, training loop, checkpoints.
- ``data``: synthetic multi-domain generators and leave-one-domain-out splits.
- ``experiment`` / ``cli``: config-driven runs, ablations, sweeps, reports.
"""

from .autodiff import Adam, Tensor, softmax_cross_entropy
from .data import gen_correlation_flip, gen_rotated_moons, gen_shifted_blobs, split_lodo
from .stats import ConditionalGaussian, StatsBank
from .training import Con2EMModel, TrainConfig, evaluate, fit

__version__ = "0.1.0"
