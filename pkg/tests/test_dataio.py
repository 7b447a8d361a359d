import numpy as np
import pytest

from fxnn.dataio import (
    BlobConfig,
    Dataset,
    GridGeometry,
    NoiseSpec,
    add_noise,
    default_geometry,
    gen_synthetic,
    load_csv,
    load_geometry_csv,
    normalize_rows,
)


class TestGeometry:
    def test_default_grid(self):
        g = default_geometry()
        assert g.n_cells == 48
        d = g.distance_matrix()
        assert d.shape == (48, 48)
        assert np.all(np.diag(d) == 0)
        assert d[0, 1] == 1.0  # unit spacing neighbors

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            GridGeometry(np.array([[0.0, np.inf]]))


class TestGenSynthetic:
    def test_degenerate_blob_is_one_hot(self):
        g = default_geometry()
        k = 17
        cfg = BlobConfig(
            n_blobs=(1, 1),
            width=(1e-9, 1e-9),
            amplitude=(1.0, 1.0),
            photons=None,
            center=tuple(g.coords[k]),
        )
        data = gen_synthetic(1, seed=0, geometry=g, blobs=cfg)
        expected = np.zeros(48)
        expected[k] = 1.0
        assert np.array_equal(data.samples[0], expected)

    def test_rows_normalized_nonnegative(self):
        data = gen_synthetic(64, seed=1)
        assert np.all(data.samples >= 0)
        assert np.abs(data.samples.sum(axis=1) - 1.0).max() <= 1e-9

    def test_deterministic_by_seed(self):
        a = gen_synthetic(32, seed=9)
        b = gen_synthetic(32, seed=9)
        assert np.array_equal(a.samples, b.samples)
        c = gen_synthetic(32, seed=10)
        assert not np.array_equal(a.samples, c.samples)

    def test_n_validated(self):
        with pytest.raises(ValueError):
            gen_synthetic(0, seed=0)


class TestNormalize:
    def test_idempotent(self):
        rng = np.random.default_rng(0)
        x = rng.random((5, 8))
        once = normalize_rows(x)
        assert np.array_equal(normalize_rows(once), once)

    def test_zero_row_rejected(self):
        with pytest.raises(ValueError, match="row 1"):
            normalize_rows(np.array([[1.0, 1.0], [0.0, 0.0]]))


class TestLoadCsv:
    def geometry2(self):
        return GridGeometry(np.array([[0.0, 0.0], [1.0, 0.0]]))

    def test_one_hot_row(self, tmp_path):
        g = default_geometry()
        p = tmp_path / "d.csv"
        p.write_text("1" + ",0" * 47 + "\n")
        data = load_csv(p, g)
        assert data.samples[0, 0] == 1.0
        assert data.samples[0, 1:].sum() == 0.0

    def test_normalization(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("2,2\n")
        data = load_csv(p, self.geometry2())
        assert np.array_equal(data.samples[0], [0.5, 0.5])

    def test_negative_rejected_with_row(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("1,-1\n")
        with pytest.raises(ValueError, match="row 1"):
            load_csv(p, self.geometry2())

    def test_wrong_arity(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("1,2\n1,2,3\n")
        with pytest.raises(ValueError, match="row 2"):
            load_csv(p, self.geometry2())

    def test_zero_sum_rejected(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("1,1\n0,0\n")
        with pytest.raises(ValueError, match="row 2.*zero-sum"):
            load_csv(p, self.geometry2())

    def test_geometry_round_trip(self, tmp_path):
        p = tmp_path / "g.csv"
        p.write_text("0.0,0.0\n1.5,2.5\n")
        g = load_geometry_csv(p)
        assert np.array_equal(g.coords, [[0.0, 0.0], [1.5, 2.5]])


class TestAddNoise:
    def test_zero_level_identity(self):
        data = gen_synthetic(16, seed=2)
        out = add_noise(data.samples, NoiseSpec(level=0.0, seed=1))
        assert np.array_equal(out, data.samples)

    def test_nonnegative_output(self):
        data = gen_synthetic(64, seed=3)
        out = add_noise(data.samples, NoiseSpec(level=0.5, seed=4))
        assert np.all(out >= 0)

    def test_deterministic(self):
        data = gen_synthetic(8, seed=5)
        a = add_noise(data.samples, NoiseSpec(level=0.05, seed=6))
        b = add_noise(data.samples, NoiseSpec(level=0.05, seed=6))
        assert np.array_equal(a, b)

    def test_monte_carlo_std_matches_level(self):
        # large constant samples keep the zero clamp inactive, so the noise std
        # per cell must come out at level * rms within Monte Carlo error
        c = 6
        n = 100_000
        x = np.full((n, c), 10.0)
        level = 0.05
        rms = np.sqrt(np.mean(x**2, axis=0))
        out = add_noise(x, NoiseSpec(level=level, seed=7))
        emp = (out - x).std(axis=0, ddof=1)
        target = level * rms
        mc_err = target * np.sqrt(2.0 / (n - 1))
        assert np.all(np.abs(emp - target) <= 3 * mc_err)

    def test_single_sample_needs_or_computes_rms(self):
        x = np.array([1.0, 2.0, 3.0])
        out = add_noise(x, NoiseSpec(level=0.1, seed=8), cell_rms=np.ones(3))
        assert out.shape == (3,)


class TestDataset:
    def test_row_sum_validated(self):
        g = GridGeometry(np.array([[0.0, 0.0], [1.0, 0.0]]))
        with pytest.raises(ValueError, match="sum to 1"):
            Dataset(samples=np.array([[0.7, 0.2]]), geometry=g)

    def test_cell_rms(self):
        g = GridGeometry(np.array([[0.0, 0.0], [1.0, 0.0]]))
        d = Dataset(samples=np.array([[1.0, 0.0], [0.0, 1.0]]), geometry=g)
        assert np.allclose(d.cell_rms(), np.sqrt(0.5))
