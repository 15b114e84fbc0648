"""Distribution-level classifier over diagonal Gaussians.

Distances are the closed-form squared 2-Wasserstein distance between
diagonal Gaussians, ``||mu_p - mu_q||^2 + ||sigma_p - sigma_q||^2``. A query
distribution is embedded by its multi-bandwidth RBF similarity to every
reference cell of the momentum bank, and a linear head maps the embedding to
class logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import DimensionError, Tensor, div, exp, scale, square, stack
from .layers import Linear
from .stats import ConditionalGaussian, StatsBank

DEFAULT_LADDER = (0.25, 0.5, 1.0, 2.0, 4.0)
MEDIAN_FLOOR = 1e-6


class EstimationError(ValueError):
    """Not enough data to estimate a quantity."""


@dataclass
class KernelConfig:
    """Bandwidths ``h_i`` of the RBF sum; exponents always use the squared distance."""

    bandwidths: list[float] = field(default_factory=lambda: list(DEFAULT_LADDER))

    def __post_init__(self):
        bw = [float(h) for h in self.bandwidths]
        if not bw:
            raise ValueError("at least one bandwidth is required")
        if any(h <= 0 for h in bw):
            raise ValueError(f"bandwidths must be positive, got {bw}")
        if any(b <= a for a, b in zip(bw[:-1], bw[1:])):
            raise ValueError(f"bandwidths must be strictly increasing, got {bw}")
        self.bandwidths = bw

    @classmethod
    def from_base(cls, base: float, ladder=DEFAULT_LADDER) -> "KernelConfig":
        return cls([base * c for c in ladder])


class ProjectionHead(Linear):
    """Affine map from an N*|Y| embedding to |Y| logits."""


def wasserstein2_sq(p: ConditionalGaussian, q: ConditionalGaussian) -> Tensor:
    """Squared 2-Wasserstein distance between two diagonal Gaussians."""
    if p.dim != q.dim:
        raise DimensionError(f"dimension mismatch: {p.dim} vs {q.dim}")
    return square(p.mu - q.mu).sum() + square(p.sigma - q.sigma).sum()


def pairwise_w2_sq(mu_q: Tensor, sigma_q: Tensor, mu_r: np.ndarray, sigma_r: np.ndarray) -> Tensor:
    """Q x R matrix of squared W2 distances from query rows to (constant) reference rows."""
    if mu_q.ndim != 2 or mu_q.shape != sigma_q.shape:
        raise DimensionError(f"query mu {mu_q.shape} / sigma {sigma_q.shape} must be equal Q x S")
    if mu_r.shape[-1] != mu_q.shape[1]:
        raise DimensionError(f"query dim {mu_q.shape[1]} != reference dim {mu_r.shape[-1]}")
    q = mu_q.shape[0]
    dm = mu_q.reshape(q, 1, -1) - mu_r[None]
    ds = sigma_q.reshape(q, 1, -1) - sigma_r[None]
    return square(dm).sum(axis=-1) + square(ds).sum(axis=-1)


def rbf_sum(dist_sq: Tensor, bandwidths) -> Tensor:
    """``sum_i exp(-dist_sq / h_i)``, accumulated in bandwidth order."""
    neg = scale(dist_sq, -1.0)
    out = None
    for h in bandwidths:
        term = exp(div(neg, h))
        out = term if out is None else out + term
    return out


def embed_many(mu_q: Tensor, sigma_q: Tensor, bank: StatsBank, cfg: KernelConfig) -> Tensor:
    """Embed Q query Gaussians against every bank cell -> Q x (N*|Y|).

    Columns of cells the bank has not observed yet are exactly 0.
    """
    mu_r, sigma_r, mask = bank.flat()
    e = rbf_sum(pairwise_w2_sq(mu_q, sigma_q, mu_r, sigma_r), cfg.bandwidths)
    if not mask.all():
        e = e * mask.astype(np.float64)
    return e


def embed(p: ConditionalGaussian, bank: StatsBank, cfg: KernelConfig) -> Tensor:
    """Kernel embedding of one distribution, length N*|Y| (domain-major, then class)."""
    return embed_many(p.mu.reshape(1, -1), p.sigma.reshape(1, -1), bank, cfg).reshape(bank.n_cells)


def classify_many(mu_q: Tensor, sigma_q: Tensor, bank: StatsBank, cfg: KernelConfig,
                  head: ProjectionHead) -> Tensor:
    if head.in_features != bank.n_cells:
        raise DimensionError(f"head width {head.in_features} != bank cells {bank.n_cells}")
    return head(embed_many(mu_q, sigma_q, bank, cfg))


def classify_distribution(p: ConditionalGaussian, bank: StatsBank, cfg: KernelConfig,
                          head: ProjectionHead) -> Tensor:
    """Class logits ``head(embed(p))`` for a single distribution."""
    logits = classify_many(p.mu.reshape(1, -1), p.sigma.reshape(1, -1), bank, cfg, head)
    return logits.reshape(head.out_features)


def stack_gaussians(cells: list[ConditionalGaussian]) -> tuple[Tensor, Tensor]:
    return stack([c.mu for c in cells]), stack([c.sigma for c in cells])


def median_heuristic(bank: StatsBank) -> float:
    """Median pairwise squared W2 distance between initialized cells, floored at 1e-6."""
    mu, sigma, mask = bank.flat()
    mu, sigma = mu[mask], sigma[mask]
    if len(mu) < 2:
        raise EstimationError("median heuristic needs at least two initialized cells")
    iu = np.triu_indices(len(mu), k=1)
    d2 = ((mu[:, None] - mu[None]) ** 2).sum(-1) + ((sigma[:, None] - sigma[None]) ** 2).sum(-1)
    return max(float(np.median(d2[iu])), MEDIAN_FLOOR)


__all__ = [
    "KernelConfig",
    "ProjectionHead",
    "EstimationError",
    "wasserstein2_sq",
    "pairwise_w2_sq",
    "rbf_sum",
    "embed",
    "embed_many",
    "classify_distribution",
    "classify_many",
    "stack_gaussians",
    "median_heuristic",
]
