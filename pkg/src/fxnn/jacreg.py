"""Jacobian-norm regularized training and noise-robustness evaluation.

The regularizer is the batch-mean squared Frobenius norm of the encoder's
input-output Jacobian; shrinking it pushes the compressed representation away
from steep directions and buys robustness to input noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .dataio import Dataset, NoiseSpec, add_noise
from .fixedpoint import quantize
from .metrics import reconstruction_emd

_EXACT_MAX_OUT = 64


@dataclass(frozen=True)
class JacRegConfig:
    lambda_jr: float = 0.0
    mode: str = "exact"  # or "projection"
    n_proj: int = 1
    encoder_only: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lambda_jr < 0:
            raise ValueError("lambda_jr must be >= 0")
        if self.mode not in ("exact", "projection"):
            raise ValueError(f"unknown jacobian mode {self.mode!r}")
        if self.n_proj < 1:
            raise ValueError("n_proj must be >= 1")


@dataclass(frozen=True)
class RobustnessPoint:
    lambda_jr: float
    clean_emd: float
    noisy_emd_mean: float
    noisy_emd_std: float
    clean_per_seed: tuple[float, ...]
    noisy_per_seed: tuple[float, ...]


@dataclass(frozen=True)
class RobustnessCurve:
    points: tuple[RobustnessPoint, ...]
    noise_level: float
    seeds: tuple[int, ...]


def _layer_derivs(
    spec: nn.ModelSpec, theta: np.ndarray, x: np.ndarray, mode: str
) -> tuple[list[np.ndarray], list[np.ndarray], list[np.ndarray]]:
    """Forward pass collecting per-layer effective weights, activation
    derivative factors, and input activations (batched)."""
    layout = nn.ParamLayout.of(spec)
    xb, _ = nn._as_batch(x, spec.in_dim)
    if mode == "fake-quant":
        a = quantize(xb, spec.input_format)
    elif mode == "float":
        a = xb
    else:
        raise ValueError(f"unsupported jacobian mode {mode!r}")
    weights, derivs, inputs = [], [], []
    for k, layer in enumerate(spec.layers):
        fmts = spec.formats[k]
        w = layout.weights(theta, k)
        b = layout.biases(theta, k)
        if mode == "fake-quant":
            w = quantize(w, fmts.weight)
            b = quantize(b, fmts.bias)
        z = a @ w.T + b
        if layer.activation == "relu":
            g = (z > 0.0).astype(np.float64)
            a_next = np.maximum(z, 0.0)
        elif layer.activation == "sigmoid":
            s = 1.0 / (1.0 + np.exp(-z))
            g = s * (1.0 - s)
            a_next = s
        else:
            g = np.ones_like(z)
            a_next = z
        if mode == "fake-quant":
            afmt = fmts.activation
            # straight-through: saturated activations stop the chain
            g = g * ((a_next >= afmt.min_value) & (a_next <= afmt.max_value))
            if layer.activation == "sigmoid":
                a_next = nn._cached_table(afmt)[nn._sigmoid_index_real(z)] * afmt.step
            else:
                a_next = quantize(a_next, afmt)
        weights.append(w)
        derivs.append(g)
        inputs.append(a)
        a = a_next
    return weights, derivs, inputs


def jacobian_exact(
    spec: nn.ModelSpec,
    theta: np.ndarray,
    x: np.ndarray,
    mode: str = "float",
    n_layers: int | None = None,
) -> np.ndarray:
    """Input-output Jacobian of the first ``n_layers`` layers (default: all).
    Single sample in -> (out, in) matrix; batch in -> (n, out, in)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    depth = len(spec.layers) if n_layers is None else n_layers
    weights, derivs, _ = _layer_derivs(spec, theta, x, mode)
    n = derivs[0].shape[0]
    J = np.broadcast_to(np.eye(spec.in_dim), (n, spec.in_dim, spec.in_dim)).copy()
    for k in range(depth):
        J = np.einsum("no,oi,nij->noj", derivs[k], weights[k], J, optimize=True)
    return J[0] if single else J


def jacfrob_grad(
    spec: nn.ModelSpec,
    theta: np.ndarray,
    x: np.ndarray,
    cfg: JacRegConfig,
    mode: str = "float",
) -> tuple[float, np.ndarray]:
    """Batch-mean squared Frobenius norm of the (encoder) Jacobian and its
    gradient w.r.t. theta, treating activation gates as locally constant.

    Projection mode estimates out_dim * mean_v |v^T J|^2 over unit-sphere
    draws; it matches the exact value in expectation.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    depth = spec.encoder_len if cfg.encoder_only else len(spec.layers)
    out_dim = spec.layers[depth - 1].out_dim
    if cfg.mode == "exact" and out_dim > _EXACT_MAX_OUT:
        raise ValueError(
            f"exact jacobian regularizer limited to {_EXACT_MAX_OUT} outputs, got {out_dim}"
        )
    weights, derivs, inputs = _layer_derivs(spec, theta, x, mode)
    n = x.shape[0]

    # prefix products V_k = D_k W_k ... D_1 W_1 (V_0 = I)
    V: list[np.ndarray] = [np.broadcast_to(np.eye(spec.in_dim), (n, spec.in_dim, spec.in_dim))]
    for k in range(depth):
        V.append(np.einsum("no,oi,nij->noj", derivs[k], weights[k], V[k], optimize=True))

    if cfg.mode == "projection":
        rng = np.random.default_rng(cfg.seed)
        probes = rng.standard_normal((cfg.n_proj, out_dim))
        probes /= np.linalg.norm(probes, axis=1, keepdims=True)
    else:
        probes = None

    layout = nn.ParamLayout.of(spec)
    grad = np.zeros(layout.total)

    if probes is None:
        J = V[depth]
        r_value = float(np.einsum("noj,noj->", J, J) / n)
        # suffix products U_k = D_L W_L ... D_{k+1} W_{k+1} (U_depth = I)
        U = np.broadcast_to(np.eye(out_dim), (n, out_dim, out_dim))
        for k in range(depth - 1, -1, -1):
            T = np.einsum("nop,noj,nkj->npk", U, J, V[k], optimize=True)
            gw = 2.0 * np.einsum("np,npk->pk", derivs[k], T, optimize=True) / n
            layout.weights(grad, k)[:] = gw
            U = np.einsum("nop,np,pi->noi", U, derivs[k], weights[k], optimize=True)
    else:
        r_value = 0.0
        for v in probes:
            # u_k = v^T (suffix product); row vector per sample
            u = np.broadcast_to(v, (n, out_dim)).copy()
            rows = [None] * (depth + 1)
            rows[depth] = u
            for k in range(depth - 1, -1, -1):
                rows[k] = np.einsum("no,no,oi->ni", rows[k + 1], derivs[k], weights[k], optimize=True)
            jv = rows[0]  # v^T J, (n, in)
            r_value += float(np.einsum("ni,ni->", jv, jv) / n)
            for k in range(depth):
                T = np.einsum("np,ni,nki->npk", rows[k + 1], jv, V[k], optimize=True)
                gw = 2.0 * np.einsum("np,npk->pk", derivs[k], T, optimize=True) / n
                layout.weights(grad, k)[:] += gw
        scale = out_dim / cfg.n_proj
        r_value *= scale
        grad *= scale

    if mode == "fake-quant":
        for k in range(depth):
            fmts = spec.formats[k]
            w = layout.weights(theta, k)
            mask = (w >= fmts.weight.min_value) & (w <= fmts.weight.max_value)
            layout.weights(grad, k)[:] *= mask
    return r_value, grad


def make_regularizer(spec: nn.ModelSpec, cfg: JacRegConfig, mode: str):
    """Regularizer callable for nn.train: (theta, x_batch) -> (R, dR/dtheta)."""

    def reg(theta: np.ndarray, xb: np.ndarray) -> tuple[float, np.ndarray]:
        return jacfrob_grad(spec, theta, xb, cfg, mode=mode)

    return reg


def train_robust(
    spec: nn.ModelSpec,
    data: tuple[np.ndarray, np.ndarray],
    train_cfg: nn.TrainConfig,
    jr_cfg: JacRegConfig,
) -> nn.TrainResult:
    """Minimize mse + lambda/2 * R. With lambda 0 this takes exactly the same
    code path as plain training, reproducing it bitwise."""
    mode = "fake-quant" if train_cfg.qat else "float"
    if jr_cfg.lambda_jr == 0.0:
        return nn.train(spec, data, train_cfg)
    return nn.train(
        spec,
        data,
        train_cfg,
        regularizer=make_regularizer(spec, jr_cfg, mode),
        reg_weight=jr_cfg.lambda_jr,
    )


def model_emd(
    spec: nn.ModelSpec,
    theta: np.ndarray,
    data: Dataset,
    noise: NoiseSpec | None = None,
    mode: str = "fake-quant",
) -> np.ndarray:
    """Per-sample EMD between clean references and the model's reconstruction,
    optionally feeding noise-corrupted inputs."""
    x_in = data.samples
    if noise is not None and noise.level > 0:
        x_in = add_noise(x_in, noise, cell_rms=data.cell_rms())
    out = nn.forward(spec, theta, x_in, mode=mode)[-1]
    return reconstruction_emd(data.samples, out, data.geometry)


def noise_robustness_curve(
    spec: nn.ModelSpec,
    data: Dataset,
    train_cfg: nn.TrainConfig,
    jr_cfg: JacRegConfig,
    lambdas: list[float],
    seeds: list[int],
    noise: NoiseSpec,
) -> RobustnessCurve:
    """Train per (lambda, seed), evaluate clean and noisy reconstruction EMD on
    each run's validation split, aggregate across seeds."""
    points = []
    for lam in lambdas:
        clean_vals, noisy_vals = [], []
        for seed in seeds:
            cfg = nn.TrainConfig(
                lr=train_cfg.lr,
                beta1=train_cfg.beta1,
                beta2=train_cfg.beta2,
                eps=train_cfg.eps,
                batch_size=train_cfg.batch_size,
                epochs=train_cfg.epochs,
                seed=seed,
                loss=train_cfg.loss,
                qat=train_cfg.qat,
                val_fraction=train_cfg.val_fraction,
            )
            jr = JacRegConfig(
                lambda_jr=lam,
                mode=jr_cfg.mode,
                n_proj=jr_cfg.n_proj,
                encoder_only=jr_cfg.encoder_only,
                seed=jr_cfg.seed,
            )
            result = train_robust(spec, (data.samples, data.samples), cfg, jr)
            _, va_idx = nn.split_train_val(data.n, cfg.val_fraction, cfg.seed)
            eval_set = Dataset(samples=data.samples[va_idx], geometry=data.geometry)
            clean_vals.append(float(model_emd(spec, result.theta, eval_set).mean()))
            noisy = NoiseSpec(level=noise.level, kind=noise.kind, seed=noise.seed + seed)
            noisy_vals.append(float(model_emd(spec, result.theta, eval_set, noise=noisy).mean()))
        points.append(
            RobustnessPoint(
                lambda_jr=lam,
                clean_emd=float(np.mean(clean_vals)),
                noisy_emd_mean=float(np.mean(noisy_vals)),
                noisy_emd_std=float(np.std(noisy_vals)),
                clean_per_seed=tuple(clean_vals),
                noisy_per_seed=tuple(noisy_vals),
            )
        )
    return RobustnessCurve(points=tuple(points), noise_level=noise.level, seeds=tuple(seeds))
