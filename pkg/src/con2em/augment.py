"""Distribution-level Universum, Universum mixing, reparameterized resampling and
distribution mixup."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DimensionError, Tensor, relu, scale
from .stats import ConditionalGaussian, StatsBank

SIGMA_FLOOR = 1e-8


@dataclass
class MixupConfig:
    alpha: float = 0.2
    lambda_mix: float = 0.5

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not 0.0 < self.lambda_mix < 1.0:
            raise ValueError(f"lambda_mix must lie in (0, 1), got {self.lambda_mix}")


@dataclass
class AugmentedDistribution:
    """A generated Gaussian with its hard label and, for mixup, a soft label."""

    gaussian: ConditionalGaussian
    label: int
    source: str  # "universum_mix" or "mixup"
    soft_label: np.ndarray | None = None


def build_universum(bank: StatsBank) -> ConditionalGaussian:
    """Semantic-free average of every initialized bank cell (mu and sigma separately)."""
    mu, sigma, mask = bank.flat()
    if not mask.any():
        raise ValueError("cannot build a Universum from an empty bank")
    return ConditionalGaussian(mu[mask].mean(axis=0), sigma[mask].mean(axis=0))


def _lerp(a: Tensor, b: Tensor, w: float) -> Tensor:
    """``(1 - w) * a + w * b``."""
    if a.shape != b.shape:
        raise DimensionError(f"cannot mix shapes {a.shape} and {b.shape}")
    return scale(a, 1.0 - w) + scale(b, w)


def universum_mix(u: ConditionalGaussian, cell: ConditionalGaussian, lam: float) -> AugmentedDistribution:
    """Blend the Universum with a semantic cell, keeping the cell's class label.

    ``lam`` is the weight on the cell; ``lam = 1`` returns the cell itself.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    g = ConditionalGaussian(_lerp(u.mu, cell.mu, lam), _lerp(u.sigma, cell.sigma, lam), cell.domain, cell.cls)
    return AugmentedDistribution(g, int(cell.cls), "universum_mix")


def distribution_mixup(a: ConditionalGaussian, b: ConditionalGaussian, gamma: float,
                       n_classes: int) -> AugmentedDistribution:
    """``gamma * a + (1 - gamma) * b`` with the matching soft label."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    g = ConditionalGaussian(_lerp(b.mu, a.mu, gamma), _lerp(b.sigma, a.sigma, gamma))
    soft = np.zeros(n_classes)
    soft[a.cls] += gamma
    soft[b.cls] += 1.0 - gamma
    label = a.cls if gamma >= 0.5 else b.cls
    return AugmentedDistribution(g, int(label), "mixup", soft)


def floor_sigma(sigma: Tensor, floor: float = SIGMA_FLOOR) -> Tensor:
    """``max(sigma, floor)`` that keeps gradient 1 above the floor."""
    if np.all(sigma.data >= floor):
        return sigma
    return sigma + relu(floor - sigma)


def resample_many(mu: Tensor, sigma: Tensor, labels, m: int, rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
    """Draw ``m`` reparameterized samples ``mu + sigma * eps`` from each of G Gaussians.

    Returns a (G*m) x S tensor, grouped by distribution, and the repeated labels.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if mu.ndim != 2 or mu.shape != sigma.shape:
        raise DimensionError(f"mu {mu.shape} and sigma {sigma.shape} must be equal G x S")
    g = mu.shape[0]
    rows = np.repeat(np.arange(g), m)
    eps = rng.standard_normal((g * m, mu.shape[1]))
    samples = mu[rows] + floor_sigma(sigma)[rows] * eps
    return samples, np.repeat(np.asarray(labels, dtype=np.int64), m)


def resample(aug: AugmentedDistribution, m: int, rng: np.random.Generator) -> list[tuple[Tensor, int]]:
    """``m`` pseudo-instances from one augmented distribution, each with its hard label."""
    g = aug.gaussian
    samples, labels = resample_many(g.mu.reshape(1, -1), g.sigma.reshape(1, -1), [aug.label], m, rng)
    return [(samples[i], int(labels[i])) for i in range(m)]


def sample_mixup_pairs(n_cells: int, n_pairs: int, rng: np.random.Generator) -> np.ndarray:
    """``n_pairs`` uniformly drawn ordered pairs of distinct cell indices."""
    if n_cells < 2:
        raise ValueError("mixup needs at least two cells")
    first = rng.integers(0, n_cells, n_pairs)
    second = (first + rng.integers(1, n_cells, n_pairs)) % n_cells
    return np.stack([first, second], axis=1)


__all__ = [
    "MixupConfig",
    "AugmentedDistribution",
    "build_universum",
    "universum_mix",
    "distribution_mixup",
    "floor_sigma",
    "resample",
    "resample_many",
    "sample_mixup_pairs",
]
