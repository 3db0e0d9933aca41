import numpy as np
import pytest

from stlcf.synth import SynthConfig, generate, write_dataset


def small_cfg(**kw):
    defaults = dict(n_users=120, n_target_items=40, n_source_items=(30,),
                    k_true=4, target_density=0.05, source_densities=(0.1,),
                    noise_sigma=0.3, seed=9)
    defaults.update(kw)
    return SynthConfig(**defaults)


class TestConfig:
    def test_density_validation(self):
        with pytest.raises(ValueError):
            small_cfg(target_density=0.0)
        with pytest.raises(ValueError):
            small_cfg(source_densities=(1.5,))

    def test_rho_validation(self):
        with pytest.raises(ValueError):
            small_cfg(inconsistency_rho=1.2)

    def test_activity_levels_must_be_distribution(self):
        with pytest.raises(ValueError):
            small_cfg(activity_levels=((0.5, 1.0), (0.4, 2.0)))

    def test_source_lists_must_align(self):
        with pytest.raises(ValueError):
            small_cfg(n_source_items=(30, 20), source_densities=(0.1,))


class TestGenerate:
    def test_rho_zero_has_no_inconsistent_items(self):
        data, truth = generate(small_cfg(inconsistency_rho=0.0))
        assert all(bad.size == 0 for bad in truth.inconsistent_items)

    def test_inconsistent_set_sizes(self):
        cfg = small_cfg(inconsistency_rho=0.4, n_source_items=(30, 21),
                        source_densities=(0.1, 0.1))
        data, truth = generate(cfg)
        assert truth.inconsistent_items[0].size == round(0.4 * 30)
        assert truth.inconsistent_items[1].size == round(0.4 * 21)

    def test_nnz_within_binomial_bound(self):
        cfg = SynthConfig(n_users=1000, n_target_items=1000,
                          n_source_items=(10,), k_true=3,
                          target_density=0.01, source_densities=(0.05,),
                          seed=4)
        data, _ = generate(cfg)
        cells = 1000 * 1000
        expected = cells * 0.01
        bound = 3 * np.sqrt(cells * 0.01 * 0.99)
        assert abs(data.target.nnz - expected) <= bound

    def test_deterministic(self):
        cfg = small_cfg(inconsistency_rho=0.3)
        a, truth_a = generate(cfg)
        b, truth_b = generate(cfg)
        assert a.target.entry_set() == b.target.entry_set()
        assert a.sources[0].entry_set() == b.sources[0].entry_set()
        assert np.array_equal(truth_a.user_topics, truth_b.user_topics)

    def test_ratings_in_bounds(self):
        data, _ = generate(small_cfg(noise_sigma=2.0))
        for m in data.domains:
            assert np.all(m.ratings >= 1.0) and np.all(m.ratings <= 5.0)

    def test_shared_axis_is_all_users(self):
        data, _ = generate(small_cfg())
        assert data.shared_axis_size == 120
        assert data.target.n_users == data.sources[0].n_users == 120

    def test_dense_item_mean_matches_population_expectation(self):
        cfg = SynthConfig(n_users=1000, n_target_items=10,
                          n_source_items=(5,), k_true=4,
                          target_density=0.5, source_densities=(0.1,),
                          noise_sigma=0.2, seed=21)
        data, truth = generate(cfg)
        item = 0
        users, ratings = data.target.item_slice(item)
        population = float(
            np.mean(truth.user_topics @ truth.item_means[0][item]))
        assert ratings.mean() == pytest.approx(population, abs=0.25)

    def test_activity_levels_spread_user_counts(self):
        cfg = small_cfg(n_users=400, target_density=0.05,
                        activity_levels=((0.9, 0.5), (0.1, 5.5)), seed=2)
        data, truth = generate(cfg)
        counts = data.target.user_counts
        assert truth.activity_multipliers.mean() == pytest.approx(1.0, abs=0.2)
        # heavy users rate far more than the median user
        assert counts.max() >= 4 * max(np.median(counts), 1)

    def test_inconsistent_items_ignore_user_tastes(self):
        # with one dominant taste axis per user, a consistent item's column
        # correlates with user preference; an inconsistent one does not
        cfg = SynthConfig(n_users=1500, n_target_items=5, n_source_items=(40,),
                          k_true=2, target_density=0.5,
                          source_densities=(0.6,), inconsistency_rho=0.5,
                          noise_sigma=0.2, topic_concentration=0.2, seed=31)
        data, truth = generate(cfg)
        bad = set(truth.inconsistent_items[0].tolist())
        pref = truth.user_topics[:, 0]
        mu = truth.item_means[1]

        def correlation_with_taste(item):
            users, ratings = data.sources[0].item_slice(item)
            expected = (truth.user_topics[users] * mu[item]).sum(axis=1)
            if np.std(expected) < 1e-9:
                return 1.0
            return abs(np.corrcoef(ratings, expected)[0, 1])

        good_corr = np.mean([correlation_with_taste(i)
                             for i in range(40) if i not in bad])
        bad_corr = np.mean([correlation_with_taste(i) for i in sorted(bad)])
        assert good_corr > bad_corr + 0.2


class TestWriteDataset:
    def test_files_and_sidecar(self, tmp_path):
        cfg = small_cfg(inconsistency_rho=0.2)
        data, truth = generate(cfg)
        paths, sidecar = write_dataset(data, truth, cfg, tmp_path)
        assert len(paths) == 2
        import json
        doc = json.loads(open(sidecar).read())
        assert doc["config"]["seed"] == cfg.seed
        assert len(doc["inconsistent_items"][0]) == round(0.2 * 30)

    def test_byte_identical_reruns(self, tmp_path):
        cfg = small_cfg()
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        for out in (out_a, out_b):
            data, truth = generate(cfg)
            write_dataset(data, truth, cfg, out)
        for name in ("target.csv", "source_1.csv", "ground_truth.json"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()
