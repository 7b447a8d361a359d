import numpy as np
import pytest

from fxnn import nn
from fxnn.fixedpoint import FixedPointFormat, quantize, quantize_codes
from fxnn.modelio import QuantizedModel

WIDE = FixedPointFormat(16, 6)


def small_spec(activations=("relu", "linear"), dims=(5, 4, 3), weight_fmt=None, act_fmt=None):
    layers = tuple(
        nn.DenseLayerSpec(dims[k], dims[k + 1], activations[k]) for k in range(len(activations))
    )
    return nn.ModelSpec(
        layers=layers,
        formats=nn.uniform_formats(
            len(layers), weight_fmt or FixedPointFormat(8, 2), act_fmt or WIDE
        ),
        input_format=act_fmt or WIDE,
        encoder_len=1,
    )


def fd_gradient(spec, theta, batch, h=1e-5):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        g[i] = (
            nn.loss_and_grad(spec, tp, batch)[0] - nn.loss_and_grad(spec, tm, batch)[0]
        ) / (2 * h)
    return g


class TestModelSpec:
    def test_dim_chain_enforced(self):
        with pytest.raises(ValueError, match="chain"):
            nn.ModelSpec(
                layers=(nn.DenseLayerSpec(4, 3), nn.DenseLayerSpec(2, 5)),
                formats=nn.uniform_formats(2, FixedPointFormat(6, 1), WIDE),
                input_format=WIDE,
                encoder_len=1,
            )

    def test_encoder_len_bounds(self):
        with pytest.raises(ValueError, match="encoder_len"):
            nn.ModelSpec(
                layers=(nn.DenseLayerSpec(4, 3),),
                formats=nn.uniform_formats(1, FixedPointFormat(6, 1), WIDE),
                input_format=WIDE,
                encoder_len=2,
            )

    def test_bias_alignment_guard(self):
        # bias with more fractional bits than the accumulator cannot be aligned
        with pytest.raises(ValueError, match="bias"):
            nn.ModelSpec(
                layers=(nn.DenseLayerSpec(4, 3),),
                formats=(
                    nn.LayerFormats(
                        weight=FixedPointFormat(4, 3),
                        bias=FixedPointFormat(32, 1),
                        activation=WIDE,
                    ),
                ),
                input_format=FixedPointFormat(4, 3),
                encoder_len=1,
            )

    def test_benchmark_parameter_count(self):
        spec = nn.benchmark_spec()
        assert spec.encoder_spec().n_params == 48 * 31 + 31 + 31 * 16 + 16 == 2031
        assert spec.n_params == 4094
        assert spec.latent_dim == 16

    def test_param_layout_total(self):
        spec = small_spec()
        layout = nn.ParamLayout.of(spec)
        assert layout.total == 5 * 4 + 4 + 4 * 3 + 3


class TestForward:
    def test_identity_layer_fakequant_is_quantize(self):
        spec = small_spec(("linear",), dims=(4, 4), weight_fmt=FixedPointFormat(8, 2))
        theta = np.zeros(nn.ParamLayout.of(spec).total)
        nn.ParamLayout.of(spec).weights(theta, 0)[:] = np.eye(4)
        x = np.array([0.17, -0.23, 0.5, 0.111])
        out = nn.forward_fakequant(spec, theta, x)[-1][0]
        assert np.array_equal(out, quantize(quantize(x, WIDE), WIDE))

    def test_relu_all_negative_is_zero(self):
        spec = small_spec(("relu",), dims=(3, 2))
        theta = np.zeros(nn.ParamLayout.of(spec).total)
        nn.ParamLayout.of(spec).weights(theta, 0)[:] = -1.0
        nn.ParamLayout.of(spec).biases(theta, 0)[:] = -0.5
        x = np.array([0.5, 0.25, 0.125])
        for mode in ("float", "fake-quant"):
            assert np.all(nn.forward(spec, theta, x, mode=mode)[-1] == 0.0)

    def test_shape_mismatch(self):
        spec = small_spec()
        theta = nn.init_params(spec, 0)
        with pytest.raises(nn.ShapeError):
            nn.forward_float(spec, theta, np.zeros(7))

    @pytest.mark.parametrize("width", [2, 4, 6, 8])
    def test_dual_path_exact(self, width):
        spec = nn.benchmark_spec(width)
        theta = nn.init_params(spec, 42)
        rng = np.random.default_rng(7)
        x = rng.random((500, 48))
        x /= x.sum(axis=1, keepdims=True)
        model = QuantizedModel.from_params(spec, theta)
        codes = model.forward_codes(quantize_codes(x, spec.input_format))
        fq = nn.forward_fakequant(spec, theta, x)
        for k in range(len(spec.layers)):
            decoded = codes[k + 1] * spec.formats[k].activation.step
            assert np.array_equal(fq[k + 1], decoded)

    def test_sigmoid_table_used_in_fakequant(self):
        spec = small_spec(("sigmoid",), dims=(3, 2))
        theta = nn.init_params(spec, 1)
        out = nn.forward_fakequant(spec, theta, np.array([0.5, 0.25, 0.125]))[-1]
        tab_vals = set((nn.sigmoid_table_codes(WIDE) * WIDE.step).tolist())
        assert all(v in tab_vals for v in out.ravel())


class TestLossAndGrad:
    def test_zero_model_zero_targets(self):
        spec = small_spec(("linear",), dims=(3, 2))
        theta = np.zeros(nn.ParamLayout.of(spec).total)
        loss, g = nn.loss_and_grad(spec, theta, (np.ones((4, 3)), np.zeros((4, 2))))
        assert loss == 0.0
        assert np.all(g == 0.0)

    def test_one_parameter_analytic(self):
        # y = w*x, data {(1, 1)}, w=0: loss 1, dL/dw = -2
        spec = nn.ModelSpec(
            layers=(nn.DenseLayerSpec(1, 1, "linear"),),
            formats=nn.uniform_formats(1, FixedPointFormat(8, 2), WIDE),
            input_format=WIDE,
            encoder_len=1,
        )
        theta = np.zeros(2)
        loss, g = nn.loss_and_grad(spec, theta, (np.array([[1.0]]), np.array([[1.0]])))
        assert loss == 1.0
        assert g[0] == -2.0

    def test_gradient_matches_central_differences_encoder(self):
        rng = np.random.default_rng(0)
        spec = nn.ModelSpec(
            layers=(nn.DenseLayerSpec(48, 8, "relu"), nn.DenseLayerSpec(8, 16, "linear")),
            formats=nn.uniform_formats(2, FixedPointFormat(8, 2), WIDE),
            input_format=WIDE,
            encoder_len=2,
        )
        theta = nn.init_params(spec, 3)
        batch = (rng.random((10, 48)), rng.standard_normal((10, 16)))
        _, g = nn.loss_and_grad(spec, theta, batch)
        gfd = fd_gradient(spec, theta, batch)
        rel = np.abs(g - gfd).max() / max(np.abs(gfd).max(), 1e-12)
        assert rel <= 1e-4

    def test_gradient_on_many_random_models(self):
        rng = np.random.default_rng(5)
        for trial in range(20):
            dims = rng.integers(2, 6, size=3)
            acts = rng.choice(["relu", "sigmoid", "linear"], size=2)
            spec = small_spec(tuple(acts), dims=tuple(int(d) for d in dims))
            theta = nn.init_params(spec, trial)
            batch = (
                rng.standard_normal((6, int(dims[0]))),
                rng.standard_normal((6, int(dims[2]))),
            )
            _, g = nn.loss_and_grad(spec, theta, batch)
            gfd = fd_gradient(spec, theta, batch)
            rel = np.abs(g - gfd).max() / max(np.abs(gfd).max(), 1e-12)
            assert rel <= 1e-4, f"trial {trial}: rel err {rel}"

    def test_empty_batch_rejected(self):
        spec = small_spec()
        theta = nn.init_params(spec, 0)
        with pytest.raises(ValueError, match="empty"):
            nn.loss_and_grad(spec, theta, (np.zeros((0, 5)), np.zeros((0, 3))))

    def test_ste_equals_float_gradient_on_grid(self):
        # With parameters and data exactly on the quantization grids and wide
        # activation formats, the straight-through gradient must equal the
        # float gradient at the (identical) quantized parameters.
        wfmt = FixedPointFormat(8, 2)
        # activation fraction bits grow layer by layer so no product ever rounds
        spec = nn.ModelSpec(
            layers=(nn.DenseLayerSpec(4, 3, "relu"), nn.DenseLayerSpec(3, 2, "linear")),
            formats=(
                nn.LayerFormats(wfmt, wfmt, FixedPointFormat(24, 8)),
                nn.LayerFormats(wfmt, wfmt, FixedPointFormat(30, 8)),
            ),
            input_format=FixedPointFormat(8, 2),
            encoder_len=2,
        )
        rng = np.random.default_rng(9)
        theta = quantize(rng.uniform(-1, 1, nn.ParamLayout.of(spec).total), wfmt)
        x = quantize(rng.uniform(0, 1, (5, 4)), spec.input_format)
        y = rng.standard_normal((5, 2))
        loss_q, g_q = nn.loss_and_grad(spec, theta, (x, y), mode="fake-quant")
        loss_f, g_f = nn.loss_and_grad(spec, theta, (x, y), mode="float")
        assert loss_q == loss_f
        assert np.array_equal(g_q, g_f)


class TestHvp:
    def test_linearity_sign(self):
        spec = small_spec()
        theta = nn.init_params(spec, 2)
        rng = np.random.default_rng(0)
        batch = (rng.random((6, 5)), rng.standard_normal((6, 3)))
        v = rng.standard_normal(theta.size)
        hv = nn.hvp(spec, theta, batch, v)
        hv_neg = nn.hvp(spec, theta, batch, -v)
        assert np.linalg.norm(hv + hv_neg) <= 1e-6 * np.linalg.norm(hv)

    def test_zero_vector_rejected(self):
        spec = small_spec()
        theta = nn.init_params(spec, 2)
        with pytest.raises(ValueError, match="nonzero"):
            nn.hvp(spec, theta, (np.ones((2, 5)), np.zeros((2, 3))), np.zeros(theta.size))

    def test_assembled_hessian_matches_fd(self):
        # tiny smooth model (sigmoid avoids relu kinks): assemble H from
        # hvp(e_i) columns and compare to the explicit FD Hessian
        spec = small_spec(("sigmoid", "linear"), dims=(3, 4, 2))
        theta = nn.init_params(spec, 11)
        rng = np.random.default_rng(1)
        batch = (rng.random((8, 3)), rng.standard_normal((8, 2)))
        p = theta.size
        H_hvp = np.column_stack([nn.hvp(spec, theta, batch, np.eye(p)[:, i]) for i in range(p)])
        h = 1e-4
        H_fd = np.zeros((p, p))
        for i in range(p):
            tp, tm = theta.copy(), theta.copy()
            tp[i] += h
            tm[i] -= h
            H_fd[:, i] = (
                nn.loss_and_grad(spec, tp, batch)[1] - nn.loss_and_grad(spec, tm, batch)[1]
            ) / (2 * h)
        err = np.linalg.norm(H_hvp - H_fd) / np.linalg.norm(H_fd)
        assert err <= 1e-3


class TestTrain:
    def test_lr_zero_keeps_init(self):
        spec = small_spec()
        rng = np.random.default_rng(4)
        x = rng.random((20, 5))
        cfg = nn.TrainConfig(lr=0.0, epochs=2, batch_size=4, seed=6, qat=False)
        res = nn.train(spec, (x, rng.random((20, 3))), cfg)
        assert np.array_equal(res.theta, nn.init_params(spec, 6))

    def test_linear_regression_converges(self):
        spec = nn.ModelSpec(
            layers=(nn.DenseLayerSpec(1, 1, "linear"),),
            formats=nn.uniform_formats(1, FixedPointFormat(8, 2), WIDE),
            input_format=WIDE,
            encoder_len=1,
        )
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, (64, 1))
        y = 2.0 * x
        cfg = nn.TrainConfig(lr=0.05, epochs=120, batch_size=16, seed=1, qat=False, val_fraction=0.0)
        res = nn.train(spec, (x, y), cfg)
        assert abs(res.theta[0] - 2.0) <= 1e-3

    def test_deterministic(self):
        spec = small_spec()
        rng = np.random.default_rng(8)
        data = (rng.random((30, 5)), rng.random((30, 3)))
        cfg = nn.TrainConfig(lr=1e-2, epochs=3, batch_size=8, seed=5)
        a = nn.train(spec, data, cfg)
        b = nn.train(spec, data, cfg)
        assert np.array_equal(a.theta, b.theta)
        assert a.history.val_mse == b.history.val_mse

    def test_divergence_reports_epoch(self):
        spec = small_spec(("relu", "relu", "linear"), dims=(4, 8, 8, 2))
        rng = np.random.default_rng(3)
        data = (rng.random((16, 4)), rng.random((16, 2)))
        cfg = nn.TrainConfig(lr=1e80, epochs=4, batch_size=4, seed=0, qat=False)
        with pytest.raises(nn.DivergenceError) as exc:
            nn.train(spec, data, cfg)
        assert exc.value.epoch >= 0

    def test_qat_val_loss_improves_early(self):
        # 6-bit QAT on synthetic data: validation loss after 5 epochs beats
        # epoch 1 for at least 4 of 5 seeds
        from fxnn.dataio import gen_synthetic

        data = gen_synthetic(256, seed=0)
        spec = nn.benchmark_spec(6)
        wins = 0
        for seed in range(5):
            cfg = nn.TrainConfig(lr=3e-3, epochs=5, batch_size=32, seed=seed, qat=True)
            res = nn.train(spec, (data.samples, data.samples), cfg)
            if res.history.val_mse[-1] < res.history.val_mse[0]:
                wins += 1
        assert wins >= 4
