"""Per-instance Gaussian statistics, per-cell aggregation and the momentum bank."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DimensionError, Tensor, exp, scale
from .layers import Linear


@dataclass
class ConditionalGaussian:
    """Diagonal Gaussian ``N(mu, diag(sigma**2))`` for one (domain, class) cell.

    ``domain`` and ``cls`` are None for semantic-free distributions such as the
    Universum.
    """

    mu: Tensor
    sigma: Tensor
    domain: int | None = None
    cls: int | None = None

    def __post_init__(self):
        if not isinstance(self.mu, Tensor):
            self.mu = Tensor(self.mu)
        if not isinstance(self.sigma, Tensor):
            self.sigma = Tensor(self.sigma)
        if self.mu.shape != self.sigma.shape or self.mu.ndim != 1:
            raise DimensionError(f"mu {self.mu.shape} and sigma {self.sigma.shape} must be equal 1-d")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def detach(self) -> "ConditionalGaussian":
        return ConditionalGaussian(self.mu.detach(), self.sigma.detach(), self.domain, self.cls)


class StatsHeads:
    """The two affine maps producing mean and log-variance from a latent code."""

    def __init__(self, latent_dim: int, stats_dim: int, rng: np.random.Generator):
        self.fc_mu = Linear(latent_dim, stats_dim, rng)
        self.fc_logvar = Linear(latent_dim, stats_dim, rng)

    def parameters(self) -> list[Tensor]:
        return self.fc_mu.parameters() + self.fc_logvar.parameters()


def per_instance_stats(z: Tensor, heads: StatsHeads) -> tuple[Tensor, Tensor]:
    """Return ``(fc_mu(z), exp(0.5 * fc_logvar(z)))``, both B x S."""
    if z.ndim != 2 or z.shape[1] != heads.fc_mu.in_features:
        raise DimensionError(f"latent shape {z.shape} does not match heads ({heads.fc_mu.in_features})")
    mu = heads.fc_mu(z)
    sigma = exp(scale(heads.fc_logvar(z), 0.5))
    return mu, sigma


def cell_index(labels, domains) -> dict[tuple[int, int], np.ndarray]:
    """Row indices of each (domain, class) cell, in sorted cell order."""
    labels = np.asarray(labels, dtype=np.int64)
    domains = np.asarray(domains, dtype=np.int64)
    cells: dict[tuple[int, int], np.ndarray] = {}
    for d, k in sorted(set(zip(domains.tolist(), labels.tolist()))):
        cells[(d, k)] = np.flatnonzero((domains == d) & (labels == k))
    return cells


def aggregate_by_cell(mu: Tensor, sigma: Tensor, labels, domains) -> list[ConditionalGaussian]:
    """Average the instance means and standard deviations within every present cell.

    Cells with no instances in the batch are omitted. Gradients flow back to
    ``mu`` and ``sigma``.
    """
    if mu.shape != sigma.shape or mu.shape[0] != len(labels) or len(labels) != len(domains):
        raise DimensionError("mu, sigma, labels and domains must share the batch dimension")
    out = []
    for (d, k), rows in cell_index(labels, domains).items():
        out.append(ConditionalGaussian(mu[rows].mean(axis=0), sigma[rows].mean(axis=0), d, k))
    return out


class StatsBank:
    """Momentum-smoothed table of cell Gaussians indexed by (domain, class).

    Arrays are stored densely as ``mu[d, k]`` / ``sigma[d, k]``; a boolean
    mask records which cells have been observed at least once. Entries never
    carry gradient.
    """

    def __init__(self, n_domains: int, n_classes: int, stats_dim: int, rho: float = 0.95):
        if not 0.0 <= rho < 1.0:
            raise ValueError(f"rho must lie in [0, 1), got {rho}")
        self.n_domains, self.n_classes, self.stats_dim = n_domains, n_classes, stats_dim
        self.rho = float(rho)
        self.mu = np.zeros((n_domains, n_classes, stats_dim))
        self.sigma = np.ones((n_domains, n_classes, stats_dim))
        self.initialized = np.zeros((n_domains, n_classes), dtype=bool)

    @property
    def n_cells(self) -> int:
        return self.n_domains * self.n_classes

    @property
    def complete(self) -> bool:
        return bool(self.initialized.all())

    def __getitem__(self, cell: tuple[int, int]) -> ConditionalGaussian:
        d, k = cell
        if not self.initialized[d, k]:
            raise KeyError(f"cell {cell} has not been observed")
        return ConditionalGaussian(self.mu[d, k].copy(), self.sigma[d, k].copy(), d, k)

    def cells(self) -> list[ConditionalGaussian]:
        """Initialized cells in domain-major order."""
        return [self[d, k] for d, k in zip(*np.nonzero(self.initialized))]

    def flat(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(mu, sigma, mask)`` flattened to N*|Y| rows, domain-major then class."""
        n = self.n_cells
        return (self.mu.reshape(n, -1), self.sigma.reshape(n, -1), self.initialized.reshape(n))

    def copy(self) -> "StatsBank":
        other = StatsBank(self.n_domains, self.n_classes, self.stats_dim, self.rho)
        other.mu[...] = self.mu
        other.sigma[...] = self.sigma
        other.initialized[...] = self.initialized
        return other

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"mu": self.mu.copy(), "sigma": self.sigma.copy(),
                "initialized": self.initialized.copy(), "rho": np.array(self.rho)}

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "StatsBank":
        n_domains, n_classes, stats_dim = state["mu"].shape
        bank = cls(n_domains, n_classes, stats_dim, float(state["rho"]))
        bank.mu[...] = state["mu"]
        bank.sigma[...] = state["sigma"]
        bank.initialized[...] = state["initialized"]
        return bank


def momentum_update(bank: StatsBank, fresh: list[ConditionalGaussian]) -> None:
    """Fold batch cell statistics into the bank.

    A cell seen for the first time is copied verbatim; afterwards the entry
    becomes ``rho * old + (1 - rho) * fresh`` on both mu and sigma.
    """
    rho = bank.rho
    for cell in fresh:
        d, k = cell.domain, cell.cls
        if d is None or k is None or not (0 <= d < bank.n_domains and 0 <= k < bank.n_classes):
            raise KeyError(f"invalid cell ({d}, {k})")
        if cell.dim != bank.stats_dim:
            raise DimensionError(f"cell dim {cell.dim} != bank dim {bank.stats_dim}")
        if not bank.initialized[d, k]:
            bank.mu[d, k] = cell.mu.data
            bank.sigma[d, k] = cell.sigma.data
            bank.initialized[d, k] = True
        else:
            # old + (1 - rho)(fresh - old): exact fixed point when fresh == old
            bank.mu[d, k] += (1.0 - rho) * (cell.mu.data - bank.mu[d, k])
            bank.sigma[d, k] += (1.0 - rho) * (cell.sigma.data - bank.sigma[d, k])


__all__ = [
    "ConditionalGaussian",
    "StatsHeads",
    "StatsBank",
    "per_instance_stats",
    "aggregate_by_cell",
    "cell_index",
    "momentum_update",
]
