import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from con2em.autodiff import DimensionError, Tensor
from con2em.kernel import (
    EstimationError,
    KernelConfig,
    ProjectionHead,
    classify_distribution,
    embed,
    median_heuristic,
    wasserstein2_sq,
)
from con2em.stats import ConditionalGaussian, StatsBank

from conftest import numeric_grad, rel_err


def gauss(mu, sigma, d=None, k=None):
    return ConditionalGaussian(np.asarray(mu, float), np.asarray(sigma, float), d, k)


def filled_bank(rng, n_domains=2, n_classes=3, dim=4, mask=None):
    bank = StatsBank(n_domains, n_classes, dim)
    bank.mu[...] = rng.normal(size=bank.mu.shape)
    bank.sigma[...] = rng.uniform(0.2, 2.0, bank.sigma.shape)
    bank.initialized[...] = True if mask is None else mask
    return bank


def loop_embed(mu, sigma, bank, bandwidths):
    """Brute-force double loop over reference cells and bandwidths."""
    out = []
    for d in range(bank.n_domains):
        for k in range(bank.n_classes):
            if not bank.initialized[d, k]:
                out.append(0.0)
                continue
            d2 = np.sum((mu - bank.mu[d, k]) ** 2) + np.sum((sigma - bank.sigma[d, k]) ** 2)
            total = 0.0
            for h in bandwidths:
                total = total + np.exp(-d2 / h)
            out.append(total)
    return np.array(out)


class TestWasserstein:
    def test_identity(self):
        p = gauss([1.0, 2.0], [0.5, 0.5])
        assert wasserstein2_sq(p, p).item() == 0.0

    def test_mean_shift(self):
        assert wasserstein2_sq(gauss([1, 0], [1, 1]), gauss([0, 0], [1, 1])).item() == 1.0

    def test_sigma_difference(self):
        assert wasserstein2_sq(gauss([0], [1]), gauss([0], [3])).item() == 4.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            wasserstein2_sq(gauss([0], [1]), gauss([0, 0], [1, 1]))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_metric_axioms(self, seed):
        rng = np.random.default_rng(seed)
        p, q, r = (gauss(rng.normal(size=3), rng.uniform(0.01, 3, 3)) for _ in range(3))
        dpq = math.sqrt(wasserstein2_sq(p, q).item())
        dqp = math.sqrt(wasserstein2_sq(q, p).item())
        dpr = math.sqrt(wasserstein2_sq(p, r).item())
        dqr = math.sqrt(wasserstein2_sq(q, r).item())
        assert dpq >= 0 and dpq == pytest.approx(dqp, abs=1e-9)
        assert dpr <= dpq + dqr + 1e-9
        assert wasserstein2_sq(p, p).item() == 0.0


class TestEmbed:
    def test_self_match_counts_bandwidths(self):
        bank = StatsBank(1, 1, 2)
        bank.mu[0, 0], bank.sigma[0, 0], bank.initialized[0, 0] = [1.0, 2.0], [0.5, 1.0], True
        e = embed(bank[0, 0], bank, KernelConfig([1.0, 2.0]))
        assert e.data.tolist() == [2.0]

    def test_unit_distance(self):
        bank = StatsBank(1, 1, 1)
        bank.mu[0, 0], bank.sigma[0, 0], bank.initialized[0, 0] = [0.0], [1.0], True
        e = embed(gauss([1.0], [1.0]), bank, KernelConfig([1.0]))
        assert e.item() == pytest.approx(math.exp(-1), abs=1e-15)
        assert e.item() == pytest.approx(0.3679, abs=1e-4)

    def test_matches_loop_oracle_exactly(self, rng):
        cfg = KernelConfig([0.3, 1.0, 2.5])
        for _ in range(50):
            bank = filled_bank(rng, mask=rng.random((2, 3)) < 0.8)
            mu, sigma = rng.normal(size=4), rng.uniform(0.2, 2, 4)
            e = embed(gauss(mu, sigma), bank, cfg).data
            np.testing.assert_array_equal(e, loop_embed(mu, sigma, bank, cfg.bandwidths))

    def test_uninitialized_cells_are_zero(self, rng):
        mask = np.array([[True, False, True], [False, True, True]])
        e = embed(gauss(np.zeros(4), np.ones(4)), filled_bank(rng, mask=mask), KernelConfig())
        assert e.data[1] == 0.0 and e.data[3] == 0.0
        assert np.all(e.data[mask.reshape(-1)] > 0)

    def test_bounds_and_monotonicity(self, rng):
        bank = filled_bank(rng, 1, 1, 3)
        cfg = KernelConfig()
        ref = bank[0, 0]
        values = []
        for shift in [0.0, 0.1, 0.5, 1.0, 2.0, 4.0]:
            p = gauss(ref.mu.data + shift, ref.sigma.data)
            values.append(embed(p, bank, cfg).item())
        assert values[0] == len(cfg.bandwidths)
        assert all(0 <= v <= len(cfg.bandwidths) for v in values)
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_gradient_wrt_mean(self, rng):
        bank = filled_bank(rng)
        cfg = KernelConfig([0.5, 1.0, 2.0])
        mu0, sigma0 = rng.normal(size=4), rng.uniform(0.3, 1.5, 4)
        weights = rng.normal(size=bank.n_cells)
        mu = Tensor(mu0, requires_grad=True)
        (embed(ConditionalGaussian(mu, Tensor(sigma0)), bank, cfg) * weights).sum().backward()
        f = lambda m: float(loop_embed(m, sigma0, bank, cfg.bandwidths) @ weights)
        assert rel_err(mu.grad, numeric_grad(f, mu0)) < 1e-4

    def test_config_validation(self):
        for bad in ([], [1.0, -1.0], [2.0, 1.0]):
            with pytest.raises(ValueError):
                KernelConfig(bad)


class TestClassify:
    def test_zero_weight_head_returns_bias(self, rng):
        bank = filled_bank(rng)
        head = ProjectionHead(bank.n_cells, 3, rng)
        head.weight.data[...] = 0.0
        logits = classify_distribution(gauss(np.zeros(4), np.ones(4)), bank, KernelConfig(), head)
        np.testing.assert_array_equal(logits.data, head.bias.data)

    def test_one_hot_selector(self, rng):
        bank = filled_bank(rng)
        head = ProjectionHead(bank.n_cells, 3, rng)
        head.weight.data[...] = 0.0
        head.bias.data[...] = 0.0
        head.weight.data[4, 1] = 1.0
        p = gauss(rng.normal(size=4), np.ones(4))
        cfg = KernelConfig()
        logits = classify_distribution(p, bank, cfg, head)
        assert logits.data[1] == pytest.approx(embed(p, bank, cfg).data[4], rel=1e-15)

    def test_width_mismatch(self, rng):
        with pytest.raises(DimensionError):
            classify_distribution(gauss(np.zeros(4), np.ones(4)), filled_bank(rng), KernelConfig(),
                                  ProjectionHead(5, 3, rng))

    def test_learns_separated_cells(self):
        """A head trained on three well-separated cells classifies fresh resamples."""
        from con2em.autodiff import Adam, one_hot, softmax_cross_entropy
        from con2em.kernel import classify_many

        rng = np.random.default_rng(7)
        dim, n = 4, 30
        centers = np.array([[0.0] * dim, [4.0] + [0.0] * 3, [0.0, 4.0, 0.0, 0.0]])
        bank = StatsBank(1, 3, dim)
        bank.mu[0] = centers
        bank.sigma[0] = 1.0
        bank.initialized[...] = True
        head = ProjectionHead(3, 3, rng)
        cfg = KernelConfig.from_base(median_heuristic(bank))

        def sample_cells(m):
            mus, sig, labels = [], [], []
            for k in range(3):
                x = centers[k] + rng.standard_normal((m, n, dim))
                mus.append(x.mean(1))
                sig.append(x.std(1))
                labels += [k] * m
            return np.concatenate(mus), np.concatenate(sig), np.array(labels)

        opt = Adam(head.parameters(), lr=0.05)
        for _ in range(200):
            mu, sig, y = sample_cells(8)
            opt.zero_grad()
            softmax_cross_entropy(classify_many(Tensor(mu), Tensor(sig), bank, cfg, head), one_hot(y, 3)).backward()
            opt.step()
        mu, sig, y = sample_cells(100)
        pred = np.argmax(classify_many(Tensor(mu), Tensor(sig), bank, cfg, head).data, axis=1)
        assert np.mean(pred == y) >= 0.95


class TestMedianHeuristic:
    def _bank(self, mus):
        bank = StatsBank(1, len(mus), 1)
        bank.mu[0, :, 0] = mus
        bank.initialized[...] = True
        return bank

    def test_single_pair(self):
        assert median_heuristic(self._bank([0.0, 2.0])) == 4.0

    def test_three_cells(self):
        # pairwise squared distances 1, 4, 9
        assert median_heuristic(self._bank([0.0, 1.0, 3.0])) == 4.0

    def test_floor(self):
        assert median_heuristic(self._bank([1.0, 1.0])) == 1e-6

    def test_needs_two_cells(self):
        bank = self._bank([0.0, 1.0])
        bank.initialized[0, 1] = False
        with pytest.raises(EstimationError):
            median_heuristic(bank)
