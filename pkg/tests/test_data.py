import itertools

import numpy as np
import pytest
from sklearn.cluster import KMeans
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import adjusted_rand_score

from con2em.data import (
    dumps_dataset,
    gen_correlation_flip,
    gen_rotated_moons,
    gen_shifted_blobs,
    load_dataset,
    loads_dataset,
    save_dataset,
    split_lodo,
    two_moons,
)
from con2em.training import TrainConfig, evaluate, fit


def same(a, b):
    return all(np.array_equal(x.X, y.X) and np.array_equal(x.y, y.y) for x, y in zip(a.domains, b.domains))


class TestShiftedBlobs:
    def test_zero_shift_is_iid(self):
        ds = gen_shifted_blobs(3, 2, 5000, 4, shift_scale=0.0, seed=1)
        means = np.array([[d.X[d.y == k].mean(0) for k in range(2)] for d in ds.domains])
        # identical transforms: per-domain class means agree up to sampling noise
        assert np.max(np.abs(means - means[0])) < 0.1
        t = ds.metadata["transforms"]
        assert all(np.allclose(x["translation"], 0) and x["angle"] == 0 for x in t)

    def test_deterministic(self):
        assert same(gen_shifted_blobs(seed=3), gen_shifted_blobs(seed=3))
        assert not same(gen_shifted_blobs(seed=3), gen_shifted_blobs(seed=4))

    def test_domain_clusters_recoverable(self):
        ds = gen_shifted_blobs(n_domains=3, n_classes=2, n_per_cell=200, input_dim=8, shift_scale=6.0, seed=0)
        centers = np.array(ds.metadata["centers"])
        for k in range(2):
            moved = np.array([d.X[d.y == k].mean(0) for d in ds.domains])
            for i, j in itertools.combinations(range(3), 2):
                assert np.linalg.norm(moved[i] - moved[j]) > 4.0
            X = np.concatenate([d.X[d.y == k] for d in ds.domains])
            truth = np.concatenate([np.full((d.y == k).sum(), d.domain_id) for d in ds.domains])
            pred = KMeans(3, n_init=10, random_state=0).fit_predict(X)
            assert adjusted_rand_score(truth, pred) > 0.9
        assert centers.shape == (2, 8)

    def test_every_domain_has_every_class(self):
        ds = gen_shifted_blobs(seed=5)
        for d in ds.domains:
            assert np.bincount(d.y).tolist() == [200, 200, 200]

    def test_invalid_counts(self):
        with pytest.raises(ValueError):
            gen_shifted_blobs(n_domains=1)


class TestRotatedMoons:
    def test_zero_angle_is_canonical(self):
        ds = gen_rotated_moons(angles=[0, 30], n_per_domain=50, seed=2)
        rng = np.random.default_rng(np.random.SeedSequence(2).spawn(2)[0])
        X, y = two_moons(50, 0.1, rng)
        np.testing.assert_array_equal(ds.domains[0].X, X)
        np.testing.assert_array_equal(ds.domains[0].y, y)

    def test_half_turn_is_point_reflection(self):
        a = gen_rotated_moons(angles=[0, 90], n_per_domain=40, seed=9)
        b = gen_rotated_moons(angles=[180, 90], n_per_domain=40, seed=9)
        np.testing.assert_allclose(b.domains[0].X, -a.domains[0].X, atol=1e-12)
        np.testing.assert_array_equal(b.domains[0].y, a.domains[0].y)

    def test_duplicate_angles(self):
        with pytest.raises(ValueError):
            gen_rotated_moons(angles=[0, 15, 15])

    def test_too_few_angles(self):
        with pytest.raises(ValueError):
            gen_rotated_moons(angles=[0])

    @pytest.mark.slow
    def test_erm_generalization_gap(self):
        ds = gen_rotated_moons(angles=[0, 15, 30, 45], noise_std=0.2, seed=0)
        result = fit(ds, TrainConfig(method="erm", lr=1e-3, max_iters=1500, seed=0), target_domain=3)
        target = ds.domain(3)
        assert evaluate(result.model, target.X, target.y) < result.best_val_acc


class TestCorrelationFlip:
    def test_full_correlation(self):
        ds = gen_correlation_flip(rates=[1.0, 0.5], n_per_domain=200, seed=0)
        d = ds.domains[0]
        np.testing.assert_array_equal(d.X[:, -1], d.y)

    def test_zero_correlation(self):
        ds = gen_correlation_flip(rates=[0.0, 0.5], n_per_domain=10_000, seed=0)
        d = ds.domains[0]
        assert abs(np.corrcoef(d.X[:, -1], d.y)[0, 1]) < 0.05

    def test_spurious_probe_is_trapped(self):
        ds = gen_correlation_flip(rates=[0.9, 0.8, -0.9], n_per_domain=2000, seed=0)
        src_X = np.concatenate([d.X[:, -1:] for d in ds.domains[:2]])
        src_y = np.concatenate([d.y for d in ds.domains[:2]])
        probe = LogisticRegression().fit(src_X, src_y)
        target = ds.domains[2]
        assert probe.score(target.X[:, -1:], target.y) < 0.1

    def test_invalid_rate(self):
        with pytest.raises(ValueError):
            gen_correlation_flip(rates=[0.9, 1.5])


class TestSplit:
    def test_counts(self):
        ds = gen_rotated_moons(angles=[0, 15, 30], n_per_domain=10, seed=0)
        plan = split_lodo(ds, 2, seed=0)
        assert plan.source_domains == [0, 1]
        for d in (0, 1):
            assert len(plan.train[d]) == 8 and len(plan.val[d]) == 2

    def test_deterministic(self):
        ds = gen_shifted_blobs(seed=0)
        a, b = split_lodo(ds, 1, seed=4), split_lodo(ds, 1, seed=4)
        assert all(np.array_equal(a.val[d], b.val[d]) for d in a.val)

    def test_partition_and_stratification(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n_classes = int(rng.integers(2, 5))
            ds = gen_shifted_blobs(3, n_classes, int(rng.integers(3, 40)), 3, 2.0, seed=int(rng.integers(1e6)))
            plan = split_lodo(ds, 0, seed=int(rng.integers(1e6)))
            assert 0 not in plan.train
            for d in plan.source_domains:
                tr, va = plan.train[d], plan.val[d]
                assert not set(tr) & set(va)
                assert sorted(np.concatenate([tr, va]).tolist()) == list(range(len(ds.domain(d).y)))
                y = ds.domain(d).y
                for k in range(n_classes):
                    n_k = np.sum(y == k)
                    assert abs(np.sum(y[va] == k) - 0.2 * n_k) <= 1

    def test_unknown_target(self):
        with pytest.raises(KeyError):
            split_lodo(gen_rotated_moons(seed=0), 7)


class TestTextFormat:
    @pytest.mark.parametrize("make", [
        lambda: gen_shifted_blobs(3, 2, 5, 3, seed=1),
        lambda: gen_rotated_moons(n_per_domain=12, seed=2),
        lambda: gen_correlation_flip(n_per_domain=12, seed=3),
    ])
    def test_round_trip_is_exact(self, make):
        ds = make()
        again = loads_dataset(dumps_dataset(ds))
        assert same(ds, again)
        assert (again.generator, again.seed, again.n_classes) == (ds.generator, ds.seed, ds.n_classes)
        assert again.metadata == ds.metadata
        assert dumps_dataset(again) == dumps_dataset(ds)

    def test_file_round_trip(self, tmp_path):
        ds = gen_rotated_moons(n_per_domain=8, seed=0)
        save_dataset(ds, tmp_path / "d.csv")
        assert same(load_dataset(tmp_path / "d.csv"), ds)
        header = (tmp_path / "d.csv").read_text().splitlines()[:7]
        assert header[0] == "# format: con2em-dataset v1"
        assert header[-1] == "domain,label,x0,x1"

    def test_rejects_foreign_file(self):
        with pytest.raises(ValueError):
            loads_dataset("a,b\n1,2\n")
