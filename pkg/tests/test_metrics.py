import numpy as np
import pytest

from fxnn import nn
from fxnn.dataio import GridGeometry, default_geometry
from fxnn.fixedpoint import FixedPointFormat
from fxnn.metrics import (
    emd_1d,
    emd_batch,
    emd_exact,
    linear_cka,
    neural_efficiency,
    pattern_entropy,
    reconstruction_emd,
)


def random_dist(rng, c):
    p = rng.random(c)
    return p / p.sum()


class TestEmd1d:
    def test_identical_is_zero(self):
        p = np.array([0.2, 0.3, 0.5])
        assert emd_1d(p, p, np.array([0.0, 1.0, 2.0])) == 0.0

    def test_single_move(self):
        d = 3.7
        assert emd_1d([1.0, 0.0], [0.0, 1.0], [0.0, d]) == pytest.approx(d, abs=1e-15)

    def test_cdf_oracle_case(self):
        # |cdf gap| = [.5, .5] over unit spacings -> 1.0
        val = emd_1d([0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.0, 1.0, 2.0])
        assert val == pytest.approx(1.0, abs=1e-15)

    def test_unnormalized_rejected(self):
        with pytest.raises(ValueError, match="sum to 1"):
            emd_1d([0.5, 0.4], [0.5, 0.5], [0.0, 1.0])

    def test_unsorted_rejected(self):
        with pytest.raises(ValueError, match="sorted"):
            emd_1d([0.5, 0.5], [0.5, 0.5], [1.0, 0.0])


class TestEmdExact:
    def test_identical_zero_cost_diagonal_plan(self):
        rng = np.random.default_rng(0)
        geom = default_geometry()
        p = random_dist(rng, 48)
        cost, plan = emd_exact(p, p, geom)
        assert cost == 0.0
        assert all(i == j for i, j, _ in plan.flows)
        mp, mq = plan.marginals(48)
        assert np.abs(mp - p).max() <= 1e-9
        assert np.abs(mq - p).max() <= 1e-9

    def test_collinear_matches_1d_closed_form(self):
        rng = np.random.default_rng(1)
        positions = np.sort(rng.random(12)) * 10
        geom = GridGeometry(np.column_stack([positions, np.zeros(12)]))
        for _ in range(100):
            p, q = random_dist(rng, 12), random_dist(rng, 12)
            cost, _ = emd_exact(p, q, geom)
            assert abs(cost - emd_1d(p, q, positions)) <= 1e-9

    def test_c3_against_flow_enumeration_oracle(self):
        # with three cells the optimal flow has one free variable; enumerate it
        # on a fine grid plus its breakpoints
        rng = np.random.default_rng(2)
        for _ in range(50):
            coords = rng.random((3, 2)) * 5
            geom = GridGeometry(coords)
            d = geom.distance_matrix()
            p, q = random_dist(rng, 3), random_dist(rng, 3)
            b = p - q
            ts = np.concatenate(
                [np.linspace(-2, 2, 400001), [0.0, b[0], -b[1]]]
            )
            costs = (
                np.abs(ts) * d[0, 1]
                + np.abs(b[0] - ts) * d[0, 2]
                + np.abs(b[1] + ts) * d[1, 2]
            )
            oracle = costs.min()
            cost, _ = emd_exact(p, q, geom)
            assert abs(cost - oracle) <= 1e-6

    def test_metric_axioms(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            c = int(rng.integers(3, 17))
            geom = GridGeometry(rng.random((c, 2)) * 4)
            p, q, r = (random_dist(rng, c) for _ in range(3))
            pq, _ = emd_exact(p, q, geom)
            qp, _ = emd_exact(q, p, geom)
            qr, _ = emd_exact(q, r, geom)
            pr, _ = emd_exact(p, r, geom)
            assert pq >= 0
            assert abs(pq - qp) <= 1e-9
            assert pr <= pq + qr + 1e-8

    def test_mean_position_lower_bound(self):
        rng = np.random.default_rng(4)
        geom = default_geometry()
        for _ in range(50):
            p, q = random_dist(rng, 48), random_dist(rng, 48)
            cost, _ = emd_exact(p, q, geom)
            gap = np.linalg.norm((p - q) @ geom.coords)
            assert cost >= gap - 1e-9

    def test_marginals_match(self):
        rng = np.random.default_rng(5)
        geom = default_geometry()
        p, q = random_dist(rng, 48), random_dist(rng, 48)
        _, plan = emd_exact(p, q, geom)
        mp, mq = plan.marginals(48)
        assert np.abs(mp - p).max() <= 1e-9
        assert np.abs(mq - q).max() <= 1e-9

    def test_size_guard(self):
        c = 300
        geom = GridGeometry(np.random.default_rng(0).random((c, 2)))
        u = np.full(c, 1.0 / c)
        with pytest.raises(ValueError, match="exceeds"):
            emd_exact(u, u, geom)

    def test_unnormalized_rejected(self):
        geom = GridGeometry(np.array([[0.0, 0.0], [1.0, 0.0]]))
        with pytest.raises(ValueError):
            emd_exact(np.array([0.6, 0.6]), np.array([0.5, 0.5]), geom)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(6)
        geom = default_geometry()
        P = np.vstack([random_dist(rng, 48) for _ in range(10)])
        Q = np.vstack([random_dist(rng, 48) for _ in range(10)])
        batch = emd_batch(P, Q, geom)
        for i in range(10):
            cost, _ = emd_exact(P[i], Q[i], geom)
            assert abs(batch[i] - cost) <= 1e-12

    def test_reconstruction_normalizes_and_handles_zero(self):
        geom = GridGeometry(np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]))
        inputs = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        outputs = np.array([[2.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        vals = reconstruction_emd(inputs, outputs, geom)
        assert vals[0] == 0.0  # renormalized to the same one-hot
        assert vals[1] == pytest.approx(1.0)  # zero output scored vs uniform


class TestLinearCka:
    def test_self_similarity_is_one(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((50, 6))
        assert linear_cka(x, x).value == pytest.approx(1.0, abs=1e-12)

    def test_invariance_scale_and_orthogonal(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((40, 5))
        q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
        y = 3.7 * x @ q
        assert linear_cka(x, y).value == pytest.approx(1.0, abs=1e-10)

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((30, 4))
        y = rng.standard_normal((30, 7))
        assert linear_cka(x, y).value == pytest.approx(linear_cka(y, x).value, abs=1e-12)

    def test_independent_inputs_score_low(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1000, 8))
        y = rng.standard_normal((1000, 8))
        assert linear_cka(x, y).value < 0.1

    def test_bounded(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            x = rng.standard_normal((25, 3))
            y = x @ rng.standard_normal((3, 4)) + 0.1 * rng.standard_normal((25, 4))
            v = linear_cka(x, y).value
            assert 0.0 <= v <= 1.0 + 1e-9

    def test_sample_mismatch(self):
        with pytest.raises(ValueError, match="sample counts"):
            linear_cka(np.zeros((3, 2)), np.zeros((4, 2)))

    def test_zero_variance_rejected(self):
        with pytest.raises(ValueError, match="zero-variance"):
            linear_cka(np.ones((5, 2)), np.random.default_rng(0).standard_normal((5, 2)))


def tiny_relu_spec():
    wide = FixedPointFormat(16, 6)
    return nn.ModelSpec(
        layers=(nn.DenseLayerSpec(2, 2, "relu"),),
        formats=nn.uniform_formats(1, FixedPointFormat(8, 2), wide),
        input_format=wide,
        encoder_len=1,
    )


def identity_theta(spec):
    layout = nn.ParamLayout.of(spec)
    theta = np.zeros(layout.total)
    layout.weights(theta, 0)[:] = np.eye(2)
    return theta


class TestNeuralEfficiency:
    def test_constant_pattern_zero(self):
        spec = tiny_relu_spec()
        x = np.tile([0.5, 0.5], (8, 1))
        rep = neural_efficiency(spec, identity_theta(spec), x, mode="float")
        assert rep.per_layer == (0.0,)
        assert rep.aggregate == 0.0

    def test_uniform_patterns_full_efficiency(self):
        spec = tiny_relu_spec()
        x = np.array([[0.5, 0.5], [0.5, 0.0], [0.0, 0.5], [0.0, 0.0]])
        rep = neural_efficiency(spec, identity_theta(spec), x, mode="float")
        assert rep.per_layer[0] == pytest.approx(1.0)

    def test_hand_computed_entropy(self):
        # pattern frequencies (1/2, 1/4, 1/4, 0): H = 1.5 bits over 2 neurons
        spec = tiny_relu_spec()
        x = np.array([[0.5, 0.5], [0.5, 0.5], [0.5, 0.0], [0.0, 0.5]])
        rep = neural_efficiency(spec, identity_theta(spec), x, mode="float")
        assert rep.per_layer[0] == pytest.approx(0.75)

    def test_duplication_invariant(self):
        rng = np.random.default_rng(5)
        spec = nn.benchmark_spec(6, hidden=8, latent=4)
        theta = nn.init_params(spec, 0)
        x = rng.random((32, 48))
        x /= x.sum(axis=1, keepdims=True)
        a = neural_efficiency(spec, theta, x)
        b = neural_efficiency(spec, theta, np.vstack([x, x]))
        assert a.per_layer == b.per_layer

    def test_bounds(self):
        rng = np.random.default_rng(6)
        spec = nn.benchmark_spec(6, hidden=8, latent=4)
        theta = nn.init_params(spec, 1)
        x = rng.random((64, 48))
        x /= x.sum(axis=1, keepdims=True)
        rep = neural_efficiency(spec, theta, x)
        assert all(0.0 <= e <= 1.0 for e in rep.per_layer)

    def test_pattern_entropy_direct(self):
        pats = np.array([[1, 1], [1, 1], [1, 0], [0, 1]], dtype=bool)
        assert pattern_entropy(pats) == pytest.approx(1.5)
