import numpy as np
import pytest

from quantimp.data import (MaskSplit, batch_iter, compute_deltas, denormalize,
                           export_split, fit_normalizer, load_csv,
                           make_mcar_split, make_synthetic, make_windows,
                           normalize)


def write(tmp_path, text, name="data.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestLoadCsv:
    def test_basic_parse_with_missing(self, tmp_path):
        ds = load_csv(write(tmp_path, "t,a\n0,1.0\n1,\n2,3.0\n"))
        assert ds.n_steps == 3 and ds.n_features == 1
        assert ds.mask[:, 0].tolist() == [1.0, 0.0, 1.0]
        assert ds.values[0, 0] == 1.0 and ds.values[2, 0] == 3.0
        assert ds.values[1, 0] == 0.0  # sentinel, never read
        assert ds.timestamps.tolist() == [0.0, 1.0, 2.0]

    def test_header_only_is_zero_rows(self, tmp_path):
        with pytest.raises(ValueError, match="zero rows"):
            load_csv(write(tmp_path, "t,a\n"))

    def test_missing_token(self, tmp_path):
        ds = load_csv(write(tmp_path, "t,a\n0,NA\n1,2.0\n"), missing_token="NA")
        assert ds.mask[0, 0] == 0.0 and ds.mask[1, 0] == 1.0

    def test_no_time_column_defaults_to_row_index(self, tmp_path):
        ds = load_csv(write(tmp_path, "a,b\n1,2\n3,4\n"))
        assert ds.n_features == 2
        assert ds.timestamps.tolist() == [0.0, 1.0]

    def test_zero_feature_columns(self, tmp_path):
        with pytest.raises(ValueError, match="zero feature columns"):
            load_csv(write(tmp_path, "t\n0\n1\n"))

    def test_unparseable_cell_names_row(self, tmp_path):
        with pytest.raises(ValueError, match="row 2"):
            load_csv(write(tmp_path, "t,a\n0,1.0\n1,oops\n"))

    def test_nonmonotone_timestamps_sorted_with_flag(self, tmp_path):
        ds = load_csv(write(tmp_path, "t,a\n2,30\n0,10\n1,20\n"))
        assert ds.meta["sorted"] is True
        assert ds.timestamps.tolist() == [0.0, 1.0, 2.0]
        assert ds.values[:, 0].tolist() == [10.0, 20.0, 30.0]


class TestDeltas:
    def test_hand_recursion_single_gap(self):
        d = compute_deltas(np.array([0.0, 1, 2, 3]),
                           np.array([[1.0], [1], [0], [1]]))
        assert d[:, 0].tolist() == [0.0, 1.0, 1.0, 2.0]

    def test_hand_recursion_double_gap(self):
        d = compute_deltas(np.array([0.0, 1, 2, 3]),
                           np.array([[1.0], [0], [0], [1]]))
        assert d[:, 0].tolist() == [0.0, 1.0, 2.0, 3.0]

    def test_single_step(self):
        d = compute_deltas(np.array([5.0]), np.ones((1, 2)))
        assert d.tolist() == [[0.0, 0.0]]

    def test_recursion_property_random(self):
        # delta[t] - gap(t) is 0 after an observation, else delta[t-1]
        rng = np.random.default_rng(0)
        for _ in range(50):
            T, K = rng.integers(2, 20), rng.integers(1, 5)
            ts = np.sort(rng.uniform(0, 100, size=T))
            mask = (rng.random((T, K)) < 0.6).astype(float)
            delta = compute_deltas(ts, mask)
            gaps = np.diff(ts)
            for t in range(1, T):
                expect = np.where(mask[t - 1] > 0, 0.0, delta[t - 1])
                assert np.allclose(delta[t] - gaps[t - 1], expect)
            assert np.all(delta >= 0)


class TestNormalizer:
    def test_two_point_feature(self):
        ds = make_synthetic(n_steps=2, n_features=1, noise_std=0.0)
        ds.values = np.array([[1.0], [3.0]])
        ds.mask = np.ones((2, 1))
        stats = fit_normalizer(ds)
        assert stats.mean[0] == 2.0 and stats.std[0] == 1.0  # population var
        normed = normalize(ds, stats)
        assert normed.values[:, 0].tolist() == [-1.0, 1.0]

    def test_constant_feature_floored(self):
        ds = make_synthetic(n_steps=3, n_features=1, noise_std=0.0)
        ds.values = np.full((3, 1), 5.0)
        ds.mask = np.ones((3, 1))
        stats = fit_normalizer(ds)
        assert stats.std[0] == 1e-5
        assert normalize(ds, stats).values[:, 0].tolist() == [0.0, 0.0, 0.0]

    def test_roundtrip_identity(self):
        rng = np.random.default_rng(3)
        ds = make_synthetic(n_steps=50, n_features=4, seed=1)
        ds.mask = (rng.random(ds.values.shape) < 0.7).astype(float)
        ds.values = ds.values * ds.mask
        stats = fit_normalizer(ds)
        back = denormalize(normalize(ds, stats), stats)
        sel = ds.mask > 0
        assert np.allclose(back.values[sel], ds.values[sel], rtol=1e-9)

    def test_statistics_use_observed_cells_only(self):
        ds = make_synthetic(n_steps=100, n_features=2, seed=2)
        ds.mask[:, 0] = 0.0
        ds.mask[:3, 0] = 1.0
        ds.values = ds.values * ds.mask
        stats = fit_normalizer(ds)
        obs = ds.values[:3, 0]
        assert np.isclose(stats.mean[0], obs.mean())

    def test_unobserved_feature_is_an_error(self):
        ds = make_synthetic(n_steps=5, n_features=2, seed=0)
        ds.mask[:, 1] = 0.0
        with pytest.raises(ValueError, match="ch1"):
            fit_normalizer(ds)


class TestMcarSplit:
    def test_rate_zero_boundary(self):
        ds = make_synthetic(n_steps=20, n_features=3, seed=0)
        split = make_mcar_split(ds, 0.0, seed=1)
        assert split.eval_mask.sum() == 0
        assert np.array_equal(split.train_mask, ds.mask)

    def test_rate_validation(self):
        ds = make_synthetic(n_steps=5, n_features=2, seed=0)
        for bad in (-0.1, 1.0, 1.5):
            with pytest.raises(ValueError):
                make_mcar_split(ds, bad, seed=0)

    def test_disjoint_and_covering(self):
        rng = np.random.default_rng(5)
        for seed in range(20):
            ds = make_synthetic(n_steps=40, n_features=5, seed=seed)
            ds.mask = (rng.random(ds.values.shape) < 0.8).astype(float)
            split = make_mcar_split(ds, 0.4, seed=seed)
            assert np.all(split.train_mask * split.eval_mask == 0)
            assert np.array_equal(split.train_mask + split.eval_mask, ds.mask)

    def test_empirical_rate(self):
        ds = make_synthetic(n_steps=1000, n_features=10, seed=0)
        split = make_mcar_split(ds, 0.5, seed=7)
        frac = split.eval_mask.sum() / ds.mask.sum()
        assert abs(frac - 0.5) < 0.02

    def test_determinism(self):
        ds = make_synthetic(n_steps=30, n_features=4, seed=0)
        a = make_mcar_split(ds, 0.3, seed=11)
        b = make_mcar_split(ds, 0.3, seed=11)
        assert np.array_equal(a.eval_mask, b.eval_mask)

    def test_export(self, tmp_path):
        ds = make_synthetic(n_steps=6, n_features=2, seed=0)
        split = make_mcar_split(ds, 0.5, seed=3)
        path = tmp_path / "split.csv"
        export_split(split, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "t,k,split"
        assert len(lines) - 1 == int(ds.mask.sum())


class TestWindows:
    def test_exact_fit_no_padding(self):
        ds = make_synthetic(n_steps=48, n_features=2, seed=0)
        wins = make_windows(ds.values, ds.mask, ds.timestamps, 48)
        assert len(wins) == 1 and not wins[0].padded

    def test_partial_window_padded(self):
        ds = make_synthetic(n_steps=5, n_features=2, seed=0)
        wins = make_windows(ds.values, ds.mask, ds.timestamps, 4)
        assert len(wins) == 2
        assert wins[1].length == 1 and wins[1].padded
        assert np.all(wins[1].mask[1:] == 0.0)
        assert np.all(wins[1].values[1:] == 0.0)

    def test_delta_restarts_at_window_boundary(self):
        ds = make_synthetic(n_steps=8, n_features=1, seed=0)
        wins = make_windows(ds.values, ds.mask, ds.timestamps, 4)
        for w in wins:
            assert np.all(w.delta_fwd[0] == 0.0)
            assert np.all(w.delta_bwd[0] == 0.0)

    def test_batch_iter_deterministic(self):
        ds = make_synthetic(n_steps=100, n_features=2, seed=0)
        order1 = [w.start for batch in batch_iter(ds, 10, 3, seed=5)
                  for w in batch]
        order2 = [w.start for batch in batch_iter(ds, 10, 3, seed=5)
                  for w in batch]
        order3 = [w.start for batch in batch_iter(ds, 10, 3, seed=6)
                  for w in batch]
        assert order1 == order2
        assert sorted(order1) != order1 or order1 != order3
        assert sorted(order1) == list(range(0, 100, 10))


def test_synthetic_generator():
    ds = make_synthetic(n_steps=100, n_features=7, noise_std=0.05, seed=42)
    assert ds.values.shape == (100, 7)
    assert np.all(ds.mask == 1.0)
    assert len(ds.meta["periods"]) == 3
    again = make_synthetic(n_steps=100, n_features=7, noise_std=0.05, seed=42)
    assert np.array_equal(ds.values, again.values)
