import json
import math

import numpy as np
import pytest
from scipy import stats

from hybridinv import pipeline as pl
from hybridinv.dictionary import voxel_dictionary
from hybridinv.errors import ConfigError, DimensionMismatch, Misalignment
from hybridinv.fingerprinting import fit_exhaustive
from hybridinv.forward_model import PopulationParams, VoxelConfig, mix_signal
from hybridinv.linalg_nnls import nnls_solve

SMALL = pl.ExperimentConfig(grid_r=4, grid_f=5, n_train=300, n_test=40, bench_sizes=(10, 20), bench_voxels=5,
                            hybrid=pl.MethodSettings(0.01, 50, 3, 0.0, branch_hidden=(8,), joint_hidden=(8,)),
                            full=pl.MethodSettings(0.01, 50, 3, 0.0, hidden=(16,)))


@pytest.fixture(scope="module")
def small_sets():
    return pl.gen_dataset(SMALL, "train"), pl.gen_dataset(SMALL, "test")


def as_predictions(ds, method="oracle", **override):
    fields = dict(u=ds.u.copy(), nu=ds.nu.copy(), r=ds.r.copy(), f=ds.f.copy())
    fields.update(override)
    return pl.Predictions(method, "groundtruth", **fields)


def uniform_truth(n, seed=0):
    g = np.random.default_rng(seed)
    u = g.normal(size=(n, 2, 3))
    u /= np.linalg.norm(u, axis=2, keepdims=True)
    nu1 = g.uniform(0.1, 0.9, n)
    return pl.Dataset(u, np.column_stack([nu1, 1 - nu1]), g.uniform(0.5, 5.0, (n, 2)),
                      g.uniform(0.0, 0.9, (n, 2)), np.full(n, 50.0), np.arange(n, dtype=np.uint64),
                      np.zeros((n, 1)))


class TestConfig:
    def test_roundtrip(self):
        cfg = pl.ExperimentConfig(seed=12, snr=(20.0, 40.0), scenarios=("groundtruth", "perturbed(10)"))
        back = pl.parse_config(cfg.to_text())
        assert back == cfg
        assert back.digest() == cfg.digest()

    def test_small_roundtrip(self):
        assert pl.parse_config(SMALL.to_text()) == SMALL

    def test_partial_override(self):
        cfg = pl.parse_config("n_train = 50  # fewer\nhybrid.epochs = 2\n")
        assert cfg.n_train == 50 and cfg.hybrid.epochs == 2
        assert cfg.hybrid.learning_rate == pl.ExperimentConfig().hybrid.learning_rate

    @pytest.mark.parametrize("text", ["bogus = 1", "n_train", "n_train = many", "hybrid.depth = 3",
                                      "n_test = 0", "snr = 25, -1", "scenarios = sideways",
                                      "scenarios = perturbed(120)"])
    def test_errors(self, text):
        with pytest.raises(ConfigError):
            pl.parse_config(text)

    def test_manifest_as_config(self, tmp_path):
        path = pl.write_manifest(str(tmp_path), "gen-data", SMALL, [])
        assert pl.load_config(path) == SMALL

    def test_method_seeds_derived(self):
        cfg = pl.ExperimentConfig(seed=3)
        assert cfg.method_seed("hybrid") != cfg.method_seed("full")
        assert pl.ExperimentConfig(seed=4).method_seed("hybrid") != cfg.method_seed("hybrid")

    def test_scenario_angle(self):
        assert pl.scenario_angle("groundtruth") == 0.0
        assert pl.scenario_angle("perturbed(5)") == 5.0


class TestDataset:
    def test_noiseless_single_sample(self):
        ds = pl.gen_dataset(SMALL, "test", 1, snr=(math.inf,))
        pops = tuple(PopulationParams(tuple(ds.u[0, k]), ds.r[0, k], ds.f[0, k]) for k in range(2))
        S = mix_signal(VoxelConfig(pops, tuple(ds.nu[0])), SMALL.get_protocol())
        assert np.array_equal(ds.signals[0], S)

    def test_files_identical(self, tmp_path):
        for name in ("a.csv", "b.csv"):
            pl.save_dataset(pl.gen_dataset(SMALL, "train", 1000), tmp_path / name)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_roundtrip(self, small_sets, tmp_path):
        ds = small_sets[1]
        pl.save_dataset(ds, tmp_path / "d.csv")
        back = pl.load_dataset(tmp_path / "d.csv")
        for name in ("u", "nu", "r", "f", "snr", "seed", "signals"):
            assert np.array_equal(getattr(back, name), getattr(ds, name))

    def test_latent_ranges(self, small_sets):
        ds = small_sets[0]
        cross = np.degrees(np.arccos(np.clip(np.einsum("ij,ij->i", ds.u[:, 0], ds.u[:, 1]), -1, 1)))
        assert cross.min() >= 15 - 1e-9 and cross.max() <= 90 + 1e-9
        assert ds.nu.min() >= 0.1 and ds.nu.max() <= 0.9
        np.testing.assert_allclose(ds.nu.sum(axis=1), 1.0, rtol=1e-15)
        assert list(ds.snr[:4]) == [25.0, 50.0, 100.0, 25.0]

    def test_splits_differ(self):
        a = pl.gen_dataset(SMALL, "train", 3)
        b = pl.gen_dataset(SMALL, "test", 3)
        assert not np.array_equal(a.signals, b.signals)

    def test_density_sampler_uniform(self):
        f = np.array([pl.sample_latents(s, SMALL)[3][0] for s in range(100_000)])
        counts, _ = np.histogram(f, bins=20, range=(0.0, 0.9))
        assert stats.chisquare(counts).pvalue > 0.01


class TestStage1:
    def test_noiseless_support(self):
        # one density per radius keeps the generating pair the unique exact fit
        cfg = pl.ExperimentConfig()
        ds = pl.gen_dataset(cfg, "test", 1)
        D = voxel_dictionary(cfg.grid(), ds.u[0], cfg.get_protocol())
        keep = np.arange(9, 240, 10)
        A = D.matrix[:, keep]
        y = 0.35 * A[:, 2] + 0.65 * A[:, 12 + 7]
        sol = nnls_solve(A, y)
        assert list(sol.support) == [2, 19]
        np.testing.assert_allclose(sol.weights[[2, 19]], [0.35, 0.65], atol=1e-10)

    def test_interior_density_atoms_are_not_unique(self):
        # the signal is affine in f, so an interior-f atom is an exact convex
        # combination of the two f-extreme atoms of the same radius
        cfg = pl.ExperimentConfig()
        ds = pl.gen_dataset(cfg, "test", 1)
        D = voxel_dictionary(cfg.grid(), ds.u[0], cfg.get_protocol())
        f = np.array(cfg.grid().f_values)
        t = (f[7] - f[0]) / (f[9] - f[0])
        np.testing.assert_allclose((1 - t) * D.matrix[:, 10] + t * D.matrix[:, 19], D.matrix[:, 17], atol=1e-15)
        y = 0.35 * D.matrix[:, 17] + 0.65 * D.matrix[:, 208]
        sol = pl.stage1_features(y, D)
        assert sol.residual_norm < 1e-12 and sol.support.size >= 2

    def test_dimension_check(self):
        D = voxel_dictionary(SMALL.grid(), [np.array([0.0, 0, 1]), np.array([1.0, 0, 0])], SMALL.get_protocol())
        with pytest.raises(DimensionMismatch):
            pl.stage1_features(np.ones(3), D)

    def test_relaxation_and_support(self, small_sets):
        ds = small_sets[1]
        feats = pl.stage1_dataset(SMALL, ds)
        fp = pl.run_fingerprint(SMALL, ds)
        assert np.all(feats.residual <= fp.residual)
        assert feats.support_size.max() <= SMALL.get_protocol().M
        assert np.all(feats.wall_time > 0)

    def test_threads_same_result(self, small_sets):
        ds = small_sets[1].subset(slice(0, 12))
        a = pl.stage1_dataset(SMALL, ds)
        b = pl.stage1_dataset(pl.parse_config("threads = 3", SMALL), ds)
        assert np.array_equal(a.weights, b.weights)

    def test_roundtrip(self, small_sets, tmp_path):
        feats = pl.stage1_dataset(SMALL, small_sets[1].subset(slice(0, 10)), "perturbed(5)")
        pl.save_stage1(feats, tmp_path / "s.csv")
        back = pl.load_stage1(tmp_path / "s.csv")
        assert np.array_equal(back.weights, feats.weights)
        assert np.array_equal(back.iterations, feats.iterations)

    def test_desk_median_support(self, desk_run, calibration):
        med = np.median(desk_run.stage1["groundtruth"].support_size)
        assert med <= calibration["stage1_median_support_max"]


class TestMethods:
    def test_noiseless_in_grid_fingerprint(self):
        cfg = pl.ExperimentConfig(crossing_range=(30.0, 90.0))
        grid, g = cfg.grid(), np.random.default_rng(5)
        n = 20
        ds = pl.gen_dataset(cfg, "test", n, snr=(math.inf,))
        r_vals, f_vals = np.array(grid.r_values), np.array(grid.f_values)
        ds.r = r_vals[g.integers(r_vals.size, size=(n, 2))]
        ds.f = f_vals[g.integers(f_vals.size, size=(n, 2))]
        for i in range(n):
            pops = tuple(PopulationParams(tuple(ds.u[i, k]), ds.r[i, k], ds.f[i, k]) for k in range(2))
            ds.signals[i] = mix_signal(VoxelConfig(pops, tuple(ds.nu[i])), cfg.get_protocol())
        rep = pl.evaluate(pl.run_fingerprint(cfg, ds), ds, cfg)
        assert rep.mae("r") == 0.0 and rep.mae("f") == 0.0
        assert rep.mae("nu") <= 1e-9

    def test_fingerprint_matches_direct_fit(self, small_sets):
        ds = small_sets[1].subset(slice(0, 5))
        pred = pl.run_fingerprint(SMALL, ds, "perturbed(5)")
        for i in range(5):
            D = voxel_dictionary(SMALL.grid(), pl.voxel_orientations(ds, i, "perturbed(5)"), SMALL.get_protocol())
            fit = fit_exhaustive(ds.signals[i], D)
            assert (pred.extra["j1"][i], pred.extra["j2"][i]) == fit.atom_indices
            assert np.array_equal(pred.u[i], [sub.orientation for sub in D.subs])

    def test_perturbed_orientations(self, small_sets):
        ds = small_sets[1]
        U = pl.voxel_orientations(ds, 3, "perturbed(5)")
        np.testing.assert_allclose(np.einsum("kj,kj->k", U, ds.u[3]), math.cos(math.radians(5)), rtol=1e-12)
        assert np.array_equal(pl.voxel_orientations(ds, 3, "groundtruth"), ds.u[3])

    def test_small_end_to_end(self, small_sets):
        train, test = small_sets
        model, losses, preds, reports = pl.run_hybrid(SMALL, train, test)
        assert len(losses) == 3 and set(preds) == set(SMALL.scenarios)
        assert model.spec.branch_input_sizes == (20, 20)
        _, flosses, fpred, frep = pl.run_full(SMALL, train, test)
        assert np.all(np.isnan(fpred.u))
        for rep in list(reports.values()) + [frep]:
            assert all(row["mae"] >= 0 for row in rep.rows if row["count"])
            assert rep.timing["mean_s"] > 0

    def test_full_targets_ordered(self, small_sets):
        T = pl.full_targets(SMALL, small_sets[0])
        assert np.all(T[:, 0] >= T[:, 3])

    def test_scaler_roundtrip(self, small_sets):
        ds = small_sets[0]
        sc = pl.TargetScaler(SMALL)
        nu, r, f = sc.decode(sc.encode(ds.nu, ds.r, ds.f))
        np.testing.assert_allclose(r, ds.r, rtol=1e-14)
        np.testing.assert_allclose(f, ds.f, rtol=1e-14)
        assert np.array_equal(nu, ds.nu)

    def test_desk_hybrid_accuracy(self, desk_run, calibration):
        rep = desk_run.reports["hybrid", "groundtruth"]
        assert rep.mae("nu", snr=50.0) <= calibration["hybrid_mae_nu_snr50_max"]

    def test_desk_hybrid_training_progress(self, desk_run):
        cfg = desk_run.cfg
        _, losses = pl.train_hybrid(pl.parse_config("hybrid.epochs = 10", cfg), desk_run.train.subset(slice(0, 3000)),
                                    pl.stage1_dataset(cfg, desk_run.train.subset(slice(0, 3000))))
        assert losses[9] < losses[0]


class TestEvaluate:
    def test_truth_scores_zero(self, small_sets):
        ds = small_sets[1]
        rep = pl.evaluate(as_predictions(ds), ds, SMALL)
        assert all(row["mae"] == 0 for row in rep.rows if row["count"])

    def test_constant_density(self):
        truth = uniform_truth(100_000)
        pred = as_predictions(truth, f=np.full((100_000, 2), 0.45))
        assert abs(pl.evaluate(pred, truth).mae("f") / 0.225 - 1) < 0.02

    def test_swap_invariance(self, small_sets):
        ds = small_sets[1]
        g = np.random.default_rng(1)
        noisy = as_predictions(ds, r=ds.r + g.normal(0, 0.3, ds.r.shape), f=ds.f + g.normal(0, 0.1, ds.f.shape))
        swap = lambda a: a[:, ::-1].copy()
        swapped = pl.Predictions("oracle", "groundtruth", swap(noisy.u), swap(noisy.nu), swap(noisy.r), swap(noisy.f))
        a, b = pl.evaluate(noisy, ds, SMALL), pl.evaluate(swapped, ds, SMALL)
        np.testing.assert_array_equal([r["mae"] for r in a.rows], [r["mae"] for r in b.rows])

    def test_fraction_matching_without_orientations(self):
        truth = uniform_truth(500, seed=2)
        order = np.argsort(-truth.nu, axis=1)
        take = lambda a: np.take_along_axis(a, order, axis=1)
        pred = pl.Predictions("full", "n/a", np.full(truth.u.shape, np.nan), take(truth.nu), take(truth.r),
                              take(truth.f))
        assert pl.evaluate(pred, truth).mae("r") == 0.0

    def test_misalignment(self, small_sets):
        ds = small_sets[1]
        with pytest.raises(Misalignment):
            pl.evaluate(as_predictions(ds.subset(slice(0, 10))), ds, SMALL)

    def test_bins_cover_range(self):
        truth = uniform_truth(2000, seed=3)
        rep = pl.evaluate(as_predictions(truth), truth)
        assert rep.bins[0].startswith("[0.10") and rep.bins[-1].endswith("0.90]")
        counts = [row["count"] for row in rep.rows if row["snr"] == "all" and row["parameter"] == "nu"]
        assert counts[0] == 4000 and sum(counts[1:]) == 4000

    def test_clamping(self, small_sets):
        ds = small_sets[1]
        rep = pl.evaluate(as_predictions(ds, f=np.full(ds.f.shape, 5.0)), ds, SMALL)
        assert rep.mae("f") == pytest.approx(np.mean(0.9 - ds.f), rel=1e-12)

    def test_report_csv(self, small_sets, tmp_path):
        ds = small_sets[1]
        pl.write_reports([pl.evaluate(as_predictions(ds), ds, SMALL)], tmp_path / "e.csv")
        lines = (tmp_path / "e.csv").read_text().splitlines()
        assert lines[0] == "# hybridinv-eval v1"
        assert lines[1] == "method,scenario,snr,nu_bin,parameter,mae,count"


class TestPredictionsFile:
    def test_roundtrip(self, small_sets, tmp_path):
        pred = pl.run_fingerprint(SMALL, small_sets[1].subset(slice(0, 6)))
        pl.save_predictions(pred, tmp_path / "p.csv")
        back = pl.load_predictions(tmp_path / "p.csv")
        assert (back.method, back.scenario) == ("fingerprint", "groundtruth")
        for name in ("u", "nu", "r", "f", "residual"):
            assert np.array_equal(getattr(back, name), getattr(pred, name))

    def test_nan_orientations(self, small_sets, tmp_path):
        ds = small_sets[1]
        pl.save_predictions(as_predictions(ds, u=np.full(ds.u.shape, np.nan)), tmp_path / "p.csv")
        assert np.all(np.isnan(pl.load_predictions(tmp_path / "p.csv").u))


class TestBenchmark:
    def test_rows(self):
        rows = pl.benchmark(SMALL)
        assert {r["method"] for r in rows} == {"precompute", "fingerprint", "stage1", "hybrid", "full"}
        assert {r["n_per_block"] for r in rows} == {10, 20}
        assert all(r["voxels"] == 5 and r["mean_s"] > 0 and r["p95_s"] >= r["p50_s"] > 0 for r in rows)

    def test_size_must_fit_grid(self):
        with pytest.raises(ConfigError):
            pl.benchmark(SMALL, sizes=(12,))


class TestManifest:
    def test_contents(self, tmp_path):
        out = tmp_path / "x.csv"
        out.write_text("a\n")
        path = pl.write_manifest(str(tmp_path), "eval", SMALL, [str(out)])
        m = json.loads(open(path).read())
        assert m["config_sha256"] == SMALL.digest() and m["seed"] == SMALL.seed
        assert m["outputs"] == {"x.csv": pl.file_digest(out)}
        assert set(m["versions"]) == {"hybridinv", "python", "numpy", "numba"}

    def test_digest_ignores_execution_settings(self):
        base = pl.ExperimentConfig()
        assert pl.parse_config("out = elsewhere\nthreads = 4").digest() == base.digest()
        assert pl.parse_config("seed = 1").digest() != base.digest()
