import numpy as np
import pytest

from stlcf.data import RatingsMatrix
from stlcf.evaluation import (ExperimentConfig, MethodSpec, bucket_label,
                              long_tail_report, mae, rmse, run_experiment,
                              save_report, save_sweep, subsample_matrix,
                              sweep)
from stlcf.synth import SynthConfig


class TestMetrics:
    def test_rmse_perfect(self):
        assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_rmse_unit_errors(self):
        assert rmse([2.0, 3.0], [1.0, 4.0]) == 1.0

    def test_rmse_value(self):
        assert rmse([1.0, 3.0], [2.0, 5.0]) == pytest.approx(
            1.5811388300841898, abs=1e-12)

    def test_mae_values(self):
        assert mae([1.0, 3.0], [1.0, 3.0]) == 0.0
        assert mae([1.0, 3.0], [2.0, 5.0]) == pytest.approx(1.5)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            rmse([], [])
        with pytest.raises(ValueError):
            mae([], [])

    def test_misaligned_rejected(self):
        with pytest.raises(ValueError):
            rmse([1.0], [1.0, 2.0])

    def test_mae_never_exceeds_rmse(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(1, 50))
            a, b = rng.normal(3, 1, n), rng.normal(3, 1, n)
            assert mae(a, b) <= rmse(a, b) + 1e-12


class TestBuckets:
    def test_edges(self):
        assert bucket_label(4) == "1-5"
        assert bucket_label(5) == "1-5"
        assert bucket_label(6) == "6-10"
        assert bucket_label(50) == "46-50"
        assert bucket_label(51) == ">50"
        assert bucket_label(0) == "0"

    def test_long_tail_report_partitions_and_omits_empty(self):
        # user 0: 2 train ratings -> "1-5"; user 1: 7 -> "6-10"
        train_triples = [("a", f"i{j}", 3.0) for j in range(2)]
        train_triples += [("b", f"i{j}", 3.0) for j in range(7)]
        train = RatingsMatrix.from_triples(train_triples)
        test = RatingsMatrix(train.n_users, train.n_items, [0, 1], [3, 0],
                             [4.0, 2.0], user_ids=train.user_ids,
                             item_ids=train.item_ids)
        table = long_tail_report(train, test,
                                 {"const": lambda p: np.full(len(p), 3.0)})
        assert set(table) == {"1-5", "6-10"}
        assert table["1-5"]["const"] == pytest.approx(1.0)
        assert table["6-10"]["const"] == pytest.approx(1.0)
        assert sum(b["n_ratings"] for b in table.values()) == test.nnz


class TestSubsample:
    def test_density_reached(self):
        rng = np.random.default_rng(1)
        m = RatingsMatrix(20, 20, *np.divmod(rng.permutation(400)[:200], 20),
                          np.full(200, 3.0))
        sub = subsample_matrix(m, 0.25, seed=3)
        assert sub.nnz == 100
        assert sub.entry_set() <= m.entry_set()

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        m = RatingsMatrix(10, 10, *np.divmod(rng.permutation(100)[:60], 10),
                          np.full(60, 2.0))
        a = subsample_matrix(m, 0.3, seed=5)
        b = subsample_matrix(m, 0.3, seed=5)
        assert a.entry_set() == b.entry_set()

    def test_impossible_density_rejected(self):
        m = RatingsMatrix(5, 5, [0], [0], [3.0])
        with pytest.raises(ValueError):
            subsample_matrix(m, 0.9, seed=0)


def tiny_experiment(methods, sparsities=(0.04,), seeds=(0,), **kw):
    synth = SynthConfig(n_users=80, n_target_items=40, n_source_items=(30,),
                        k_true=3, target_density=0.12,
                        source_densities=(0.25,), noise_sigma=0.4, seed=0)
    return ExperimentConfig(methods=tuple(methods), sparsities=sparsities,
                            seeds=seeds, synth=synth, holdout_fraction=0.3,
                            **kw)


FAST_EM = {"k": 3, "max_iters": 12}
FAST_BOOST = {"k": 3, "max_iters": 12, "n_rounds": 2, "tau": 0.35}


class TestRunExperiment:
    def test_single_cell(self):
        cfg = tiny_experiment([MethodSpec("gplsa", "gplsa", dict(FAST_EM))])
        report = run_experiment(cfg)
        cell = report.cell("gplsa", 0.04)
        assert cell["n_ok"] == 1
        assert cell["rmse_mean"] > 0 and np.isfinite(cell["rmse_mean"])

    def test_two_seeds_aggregate(self):
        cfg = tiny_experiment([MethodSpec("gplsa", "gplsa", dict(FAST_EM))],
                              seeds=(0, 1))
        report = run_experiment(cfg)
        cell = report.cell("gplsa", 0.04)
        assert len(cell["rmse_per_seed"]) == 2
        assert cell["rmse_mean"] == pytest.approx(
            np.mean(cell["rmse_per_seed"]))
        assert cell["rmse_std"] == pytest.approx(
            np.std(cell["rmse_per_seed"]))

    def test_paper_shape_grid(self):
        methods = [MethodSpec("gplsa", "gplsa", dict(FAST_EM)),
                   MethodSpec("tgplsa", "tgplsa", dict(FAST_EM)),
                   MethodSpec("stlcf-e", "stlcf-e", dict(FAST_BOOST)),
                   MethodSpec("stlcf-ev", "stlcf-ev", dict(FAST_BOOST))]
        cfg = tiny_experiment(methods, sparsities=(0.03, 0.04, 0.05))
        report = run_experiment(cfg)
        cells = [report.cell(m.name, s) for m in methods
                 for s in cfg.sparsities]
        assert len(cells) == 12

    def test_reproducible(self):
        cfg = tiny_experiment([MethodSpec("tgplsa", "tgplsa", dict(FAST_EM))],
                              seeds=(0, 1))
        a = run_experiment(cfg)
        b = run_experiment(cfg)
        assert a.cells == b.cells

    def test_threaded_matches_sequential(self):
        methods = [MethodSpec("gplsa", "gplsa", dict(FAST_EM)),
                   MethodSpec("tgplsa", "tgplsa", dict(FAST_EM))]
        cfg = tiny_experiment(methods, sparsities=(0.03, 0.05), seeds=(0, 1))
        assert run_experiment(cfg, n_threads=1).cells == \
            run_experiment(cfg, n_threads=4).cells

    def test_method_failure_recorded_not_raised(self):
        methods = [MethodSpec("gplsa", "gplsa", dict(FAST_EM)),
                   # tau so tight every round drops: "no useful weak learner"
                   MethodSpec("broken", "stlcf-ev",
                              {**FAST_BOOST, "tau": 1e-9})]
        cfg = tiny_experiment(methods)
        report = run_experiment(cfg)
        assert report.cell("gplsa", 0.04)["n_ok"] == 1
        bad = report.cell("broken", 0.04)
        assert bad["n_ok"] == 0
        assert "no useful weak learner" in bad["errors"][0]

    def test_impossible_sparsity_recorded(self):
        cfg = tiny_experiment([MethodSpec("gplsa", "gplsa", dict(FAST_EM))],
                              sparsities=(0.9,))
        report = run_experiment(cfg)
        assert report.cell("gplsa", 0.9)["n_ok"] == 0

    def test_long_tail_collected(self):
        cfg = tiny_experiment([MethodSpec("gplsa", "gplsa", dict(FAST_EM))],
                              long_tail=True)
        report = run_experiment(cfg)
        buckets = report.long_tail["gplsa"]["0.04"]
        assert buckets  # at least one bucket populated
        for stats in buckets.values():
            assert stats["rmse_mean"] >= 0


class TestSweep:
    def test_degenerate_grid_equals_run_experiment(self):
        cfg = tiny_experiment([MethodSpec("tgplsa", "tgplsa", dict(FAST_EM))])
        result = sweep("lam", [0.5], cfg)
        direct = run_experiment(
            tiny_experiment([MethodSpec("tgplsa", "tgplsa",
                                        {**FAST_EM, "lam": 0.5})]))
        assert len(result["rows"]) == 1
        assert result["rows"][0]["rmse_mean"] == \
            direct.cell("tgplsa", 0.04)["rmse_mean"]

    def test_gamma_zero_row_equals_stlcf_e_bit_exactly(self):
        base = tiny_experiment([MethodSpec("m", "stlcf-ev", dict(FAST_BOOST))])
        result = sweep("gamma", [0.0, 0.5], base)
        ev_at_zero = result["reports"][0].cell("m", 0.04)
        e_run = run_experiment(
            tiny_experiment([MethodSpec("m", "stlcf-e", dict(FAST_BOOST))]))
        assert ev_at_zero["rmse_per_seed"] == \
            e_run.cell("m", 0.04)["rmse_per_seed"]

    def test_unknown_param_rejected(self):
        cfg = tiny_experiment([MethodSpec("gplsa", "gplsa", dict(FAST_EM))])
        with pytest.raises(ValueError):
            sweep("learning_rate", [0.1], cfg)


class TestSaveReport:
    def test_files_written_and_deterministic(self, tmp_path):
        cfg = tiny_experiment([MethodSpec("gplsa", "gplsa", dict(FAST_EM))],
                              long_tail=True)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        tag = save_report(run_experiment(cfg), out_a)
        save_report(run_experiment(cfg), out_b)
        for name in (f"report_{tag}.json", f"cells_{tag}.csv",
                     f"long_tail_{tag}.csv"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()
        assert (out_a / "run_info.json").exists()

    def test_sweep_csv(self, tmp_path):
        cfg = tiny_experiment([MethodSpec("m", "stlcf-ev", dict(FAST_BOOST))])
        result = sweep("n_rounds", [1, 2], cfg)
        path = save_sweep(result, tmp_path, cfg.spec_hash())
        text = open(path).read()
        assert "n_rounds" in text and text.count("\n") == 3
        assert (tmp_path / f"alphas_n_rounds_{cfg.spec_hash()}.json").exists()
