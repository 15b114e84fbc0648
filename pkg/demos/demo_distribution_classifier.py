"""
Classifying distributions instead of points
===========================================

Each (domain, class) cell is a diagonal Gaussian. A new Gaussian is embedded by
its RBF similarity to every cell of a reference bank, under the closed-form
2-Wasserstein distance, and a linear head turns that embedding into logits.
"""

import numpy as np

from con2em.augment import build_universum, distribution_mixup, universum_mix
from con2em.kernel import KernelConfig, embed, median_heuristic, wasserstein2_sq
from con2em.stats import ConditionalGaussian, StatsBank

# two domains, two classes, 2-d statistics
bank = StatsBank(n_domains=2, n_classes=2, stats_dim=2)
bank.mu[0] = [[0.0, 0.0], [3.0, 0.0]]
bank.mu[1] = [[0.0, 1.0], [3.0, 1.0]]
bank.sigma[...] = 1.0
bank.initialized[...] = True

p = ConditionalGaussian([2.5, 0.5], [1.2, 0.9])
print("W2^2 to cell (0, 1):", wasserstein2_sq(p, bank[0, 1]).item())

# bandwidths come from the median pairwise distance between cells
cfg = KernelConfig.from_base(median_heuristic(bank))
print("bandwidths:", np.round(cfg.bandwidths, 3))
print("embedding (domain-major cells):", np.round(embed(p, bank, cfg).data, 3))

# the Universum is the average of every cell; it carries no class
u = build_universum(bank)
print("universum mean:", u.mu.data, "sigma:", u.sigma.data)

# halfway between the Universum and a class-1 cell: a new class-1 distribution
aug = universum_mix(u, bank[1, 1], 0.5)
print("augmented class", aug.label, "mean", aug.gaussian.mu.data)

# mixing two cells of different classes yields a soft label
mix = distribution_mixup(bank[0, 0], bank[1, 1], 0.3, n_classes=2)
print("mixup soft label:", mix.soft_label)
