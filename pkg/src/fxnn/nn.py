"""Dense-network engine: float / fake-quantized / bit-exact forward passes,
reverse-mode gradients with straight-through estimators, finite-difference
Hessian-vector products, and deterministic Adam training.

The fake-quant and bit-exact paths are constructed to agree exactly: every
fake-quant intermediate is an integer multiple of a power of two that double
precision represents without rounding, so the float pipeline reproduces the
widened-integer pipeline value for value.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Literal, Sequence

import numpy as np

from .fixedpoint import (
    FixedPointFormat,
    OVERFLOW_SATURATE,
    ROUND_HALF_EVEN,
    quantize,
    quantize_codes,
)

Activation = Literal["relu", "sigmoid", "linear"]
ForwardMode = Literal["float", "fake-quant", "bit-exact"]

SIGMOID_TABLE_SIZE = 256
SIGMOID_RANGE = 8.0  # table covers pre-activations in [-8, 8)


class ShapeError(ValueError):
    pass


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class DenseLayerSpec:
    in_dim: int
    out_dim: int
    activation: Activation = "linear"

    def __post_init__(self) -> None:
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dims must be >= 1")
        if self.activation not in ("relu", "sigmoid", "linear"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class LayerFormats:
    weight: FixedPointFormat
    bias: FixedPointFormat
    activation: FixedPointFormat


@dataclass(frozen=True)
class ModelSpec:
    """Layered encoder/decoder description.

    ``formats[k]`` carries the weight/bias/activation formats of layer k;
    ``input_format`` quantizes the network input. Layers [0, encoder_len) form
    the encoder (the deployed, fault-exposed part), the rest the decoder.
    """

    layers: tuple[DenseLayerSpec, ...]
    formats: tuple[LayerFormats, ...]
    input_format: FixedPointFormat
    encoder_len: int

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValueError("model needs at least one layer")
        if len(self.formats) != len(self.layers):
            raise ValueError("one LayerFormats per layer required")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(
                    f"layer chain mismatch: out_dim {a.out_dim} vs in_dim {b.in_dim}"
                )
        if not (1 <= self.encoder_len <= len(self.layers)):
            raise ValueError("encoder_len must be in [1, n_layers]")
        for k, (layer, fmts) in enumerate(zip(self.layers, self.formats)):
            s = fmts.weight.frac_bits + self._in_frac(k)
            if s < fmts.bias.frac_bits:
                raise ValueError(
                    f"layer {k}: bias frac_bits {fmts.bias.frac_bits} exceeds "
                    f"accumulator scale {s}; bias cannot be aligned exactly"
                )
            # widened accumulator must stay exact in int64 and float64
            width = fmts.weight.total_bits + self._in_total(k) + max(
                1, int(np.ceil(np.log2(layer.in_dim + 1)))
            )
            if width > 52:
                raise ValueError(
                    f"layer {k}: accumulator needs {width} bits; formats too wide "
                    "for exact dual-path arithmetic"
                )

    def _in_fmt(self, k: int) -> FixedPointFormat:
        return self.input_format if k == 0 else self.formats[k - 1].activation

    def _in_frac(self, k: int) -> int:
        return self._in_fmt(k).frac_bits

    def _in_total(self, k: int) -> int:
        return self._in_fmt(k).total_bits

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def latent_dim(self) -> int:
        return self.layers[self.encoder_len - 1].out_dim

    @property
    def n_params(self) -> int:
        return sum(l.in_dim * l.out_dim + l.out_dim for l in self.layers)

    def encoder_spec(self) -> "ModelSpec":
        return ModelSpec(
            layers=self.layers[: self.encoder_len],
            formats=self.formats[: self.encoder_len],
            input_format=self.input_format,
            encoder_len=self.encoder_len,
        )


def uniform_formats(
    n_layers: int,
    weight: FixedPointFormat,
    activation: FixedPointFormat,
    bias: FixedPointFormat | None = None,
) -> tuple[LayerFormats, ...]:
    b = bias if bias is not None else weight
    return tuple(LayerFormats(weight, b, activation) for _ in range(n_layers))


def benchmark_spec(
    weight_bits: int = 6,
    hidden: int = 31,
    latent: int = 16,
    n_cells: int = 48,
) -> ModelSpec:
    """Default 48-cell autoencoder: encoder 48->hidden->latent (~2000 trainable
    values at hidden=31), decoder mirrors it back with a sigmoid output."""
    wfmt = FixedPointFormat(weight_bits, 1, signed=True)
    layers = (
        DenseLayerSpec(n_cells, hidden, "relu"),
        DenseLayerSpec(hidden, latent, "linear"),
        DenseLayerSpec(latent, hidden, "relu"),
        DenseLayerSpec(hidden, n_cells, "sigmoid"),
    )
    hid_act = FixedPointFormat(12, 2, signed=False)
    lat_act = FixedPointFormat(12, 3, signed=True)
    out_act = FixedPointFormat(10, 1, signed=False)
    formats = (
        LayerFormats(wfmt, wfmt, hid_act),
        LayerFormats(wfmt, wfmt, lat_act),
        LayerFormats(wfmt, wfmt, hid_act),
        LayerFormats(wfmt, wfmt, out_act),
    )
    return ModelSpec(
        layers=layers,
        formats=formats,
        input_format=FixedPointFormat(10, 1, signed=False),
        encoder_len=2,
    )


# ---------------------------------------------------------------------------
# Parameter vector layout


@dataclass(frozen=True)
class ParamLayout:
    """Deterministic flat layout: per layer, row-major (out, in) weights then
    biases, layers in order."""

    shapes: tuple[tuple[int, int], ...]
    w_offsets: tuple[int, ...]
    b_offsets: tuple[int, ...]
    total: int

    @classmethod
    def of(cls, spec: ModelSpec) -> "ParamLayout":
        shapes, w_off, b_off = [], [], []
        pos = 0
        for layer in spec.layers:
            shapes.append((layer.out_dim, layer.in_dim))
            w_off.append(pos)
            pos += layer.out_dim * layer.in_dim
            b_off.append(pos)
            pos += layer.out_dim
        return cls(tuple(shapes), tuple(w_off), tuple(b_off), pos)

    def weights(self, theta: np.ndarray, k: int) -> np.ndarray:
        o, i = self.shapes[k]
        return theta[self.w_offsets[k] : self.w_offsets[k] + o * i].reshape(o, i)

    def biases(self, theta: np.ndarray, k: int) -> np.ndarray:
        o, _ = self.shapes[k]
        return theta[self.b_offsets[k] : self.b_offsets[k] + o]

    def layer_slice(self, k: int) -> slice:
        o, i = self.shapes[k]
        return slice(self.w_offsets[k], self.b_offsets[k] + o)


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Glorot-uniform initialization, biases zero; deterministic by seed."""
    rng = np.random.default_rng(seed)
    layout = ParamLayout.of(spec)
    theta = np.zeros(layout.total)
    for k, layer in enumerate(spec.layers):
        bound = np.sqrt(6.0 / (layer.in_dim + layer.out_dim))
        w = rng.uniform(-bound, bound, size=(layer.out_dim, layer.in_dim))
        layout.weights(theta, k)[:] = w
    return theta


# ---------------------------------------------------------------------------
# Sigmoid lookup table (shared by fake-quant, bit-exact and emitted C)


def sigmoid_table_codes(act_fmt: FixedPointFormat) -> np.ndarray:
    """256-entry table of activation-format codes for the logistic function,
    uniform over pre-activations in [-8, 8), sampled at bin centers."""
    k = np.arange(SIGMOID_TABLE_SIZE)
    centers = -SIGMOID_RANGE + (k + 0.5) * (2 * SIGMOID_RANGE / SIGMOID_TABLE_SIZE)
    return quantize_codes(1.0 / (1.0 + np.exp(-centers)), act_fmt)


def _sigmoid_index_real(z: np.ndarray) -> np.ndarray:
    # floor((z + 8) * 16); exact in float64 because 16 is a power of two
    idx = np.floor((z + SIGMOID_RANGE) * (SIGMOID_TABLE_SIZE / (2 * SIGMOID_RANGE)))
    return np.clip(idx, 0, SIGMOID_TABLE_SIZE - 1).astype(np.int64)


def _sigmoid_index_codes(acc: np.ndarray, acc_frac: int) -> np.ndarray:
    # same index computed on integer accumulators at scale 2**-acc_frac
    shift = acc_frac - 4  # 16 = 2**4 table bins per unit
    if shift >= 0:
        idx = (acc >> shift) + SIGMOID_TABLE_SIZE // 2
    else:
        idx = (acc << (-shift)) + SIGMOID_TABLE_SIZE // 2
    return np.clip(idx, 0, SIGMOID_TABLE_SIZE - 1)


_TABLE_CACHE: dict[FixedPointFormat, np.ndarray] = {}


def _cached_table(act_fmt: FixedPointFormat) -> np.ndarray:
    tab = _TABLE_CACHE.get(act_fmt)
    if tab is None:
        tab = sigmoid_table_codes(act_fmt)
        _TABLE_CACHE[act_fmt] = tab
    return tab


# ---------------------------------------------------------------------------
# Forward passes


def _as_batch(x: np.ndarray, in_dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != in_dim:
        raise ShapeError(f"input shape {x.shape} incompatible with in_dim {in_dim}")
    return x, single


def forward_float(spec: ModelSpec, theta: np.ndarray, x: np.ndarray) -> list[np.ndarray]:
    """Unquantized forward pass. Returns [input, act_1, ..., act_L]."""
    layout = ParamLayout.of(spec)
    a, _ = _as_batch(x, spec.in_dim)
    acts = [a]
    for k, layer in enumerate(spec.layers):
        z = a @ layout.weights(theta, k).T + layout.biases(theta, k)
        if layer.activation == "relu":
            a = np.maximum(z, 0.0)
        elif layer.activation == "sigmoid":
            a = 1.0 / (1.0 + np.exp(-z))
        else:
            a = z
        acts.append(a)
    return acts


def forward_fakequant(spec: ModelSpec, theta: np.ndarray, x: np.ndarray) -> list[np.ndarray]:
    """Fake-quantized forward: weights, biases and activations pass through
    quantize() at the configured formats. Returns [quantized input, act_1, ...]."""
    return _fakequant_cache(spec, theta, x)["acts"]


def _fakequant_cache(spec: ModelSpec, theta: np.ndarray, x: np.ndarray) -> dict:
    layout = ParamLayout.of(spec)
    xb, _ = _as_batch(x, spec.in_dim)
    a = quantize(xb, spec.input_format)
    acts, pre, wq_list, wmask_list, bmask_list = [a], [], [], [], []
    for k, layer in enumerate(spec.layers):
        fmts = spec.formats[k]
        w = layout.weights(theta, k)
        b = layout.biases(theta, k)
        wq = quantize(w, fmts.weight)
        bq = quantize(b, fmts.bias)
        wmask_list.append((w >= fmts.weight.min_value) & (w <= fmts.weight.max_value))
        bmask_list.append((b >= fmts.bias.min_value) & (b <= fmts.bias.max_value))
        z = a @ wq.T + bq
        afmt = fmts.activation
        if layer.activation == "relu":
            a = quantize(np.maximum(z, 0.0), afmt)
        elif layer.activation == "sigmoid":
            tab = _cached_table(afmt)
            a = tab[_sigmoid_index_real(z)] * afmt.step
        else:
            a = quantize(z, afmt)
        pre.append(z)
        wq_list.append(wq)
        acts.append(a)
    return {
        "acts": acts,
        "pre": pre,
        "wq": wq_list,
        "wmask": wmask_list,
        "bmask": bmask_list,
    }


def forward_bitexact(
    spec: ModelSpec,
    weight_codes: Sequence[np.ndarray],
    bias_codes: Sequence[np.ndarray],
    x_codes: np.ndarray,
) -> list[np.ndarray]:
    """Integer-only forward on codes with 64-bit accumulators. ``x_codes`` must
    be pre-quantized to the input format. Returns per-layer activation codes
    [input, act_1, ..., act_L]."""
    x_codes = np.asarray(x_codes, dtype=np.int64)
    if x_codes.ndim == 1:
        x_codes = x_codes[None, :]
    if x_codes.shape[1] != spec.in_dim:
        raise ShapeError(f"input shape {x_codes.shape} incompatible with in_dim {spec.in_dim}")
    a = x_codes
    frac = spec.input_format.frac_bits
    outs = [a]
    for k, layer in enumerate(spec.layers):
        fmts = spec.formats[k]
        s = fmts.weight.frac_bits + frac
        acc = a @ np.asarray(weight_codes[k], dtype=np.int64).T
        acc = acc + (np.asarray(bias_codes[k], dtype=np.int64) << (s - fmts.bias.frac_bits))
        a = activation_codes(acc, s, layer.activation, fmts.activation)
        frac = fmts.activation.frac_bits
        outs.append(a)
    return outs


def activation_codes(
    acc: np.ndarray, acc_frac: int, activation: str, afmt: FixedPointFormat
) -> np.ndarray:
    """Apply an activation to integer accumulators at scale 2**-acc_frac and
    requantize to the activation format."""
    if activation == "relu":
        return requantize_codes(np.maximum(acc, 0), acc_frac, afmt)
    if activation == "sigmoid":
        return _cached_table(afmt)[_sigmoid_index_codes(acc, acc_frac)]
    return requantize_codes(acc, acc_frac, afmt)


def requantize_codes(acc: np.ndarray, acc_frac: int, fmt: FixedPointFormat) -> np.ndarray:
    """Rescale integer accumulators from 2**-acc_frac to the format's scale with
    the format's rounding, then apply its overflow mode. Matches quantize() on
    the equivalent real value exactly."""
    delta = acc_frac - fmt.frac_bits
    if delta > 0:
        q = acc >> delta  # arithmetic shift == floor division
        if fmt.rounding == ROUND_HALF_EVEN:
            r = acc - (q << delta)
            half = np.int64(1) << (delta - 1)
            q = q + ((r > half) | ((r == half) & ((q & 1) == 1)))
    elif delta < 0:
        q = acc << (-delta)
    else:
        q = acc.copy()
    if fmt.overflow == OVERFLOW_SATURATE:
        return np.clip(q, fmt.min_code, fmt.max_code)
    span = np.int64(1) << fmt.total_bits
    return (q - fmt.min_code) % span + fmt.min_code


def forward(
    spec: ModelSpec,
    theta_or_codes,
    x: np.ndarray,
    mode: ForwardMode = "float",
) -> list[np.ndarray]:
    """Mode-dispatching forward pass. For ``bit-exact`` pass a
    (weight_codes, bias_codes) pair and integer input codes."""
    if mode == "float":
        return forward_float(spec, theta_or_codes, x)
    if mode == "fake-quant":
        return forward_fakequant(spec, theta_or_codes, x)
    if mode == "bit-exact":
        wc, bc = theta_or_codes
        return forward_bitexact(spec, wc, bc, x)
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# Loss and gradients


def _check_batch(x: np.ndarray, y: np.ndarray, spec: ModelSpec) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if y.ndim == 1:
        y = y[None, :]
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if x.shape[1] != spec.in_dim or y.shape[1] != spec.out_dim or x.shape[0] != y.shape[0]:
        raise ShapeError(f"batch shapes {x.shape}/{y.shape} incompatible with model")
    return x, y


def loss_and_grad(
    spec: ModelSpec,
    theta: np.ndarray,
    batch: tuple[np.ndarray, np.ndarray],
    mode: str = "float",
) -> tuple[float, np.ndarray]:
    """Mean-squared-error loss and its gradient w.r.t. theta.

    ``float`` differentiates the smooth network; ``fake-quant`` uses the
    quantized forward with straight-through gradients (quantizers count as
    identity inside their representable range, zero where saturated; the
    sigmoid table backpropagates through the smooth logistic derivative).
    """
    x, y = _check_batch(*batch, spec=spec)
    layout = ParamLayout.of(spec)
    n, d = y.shape

    if mode == "float":
        acts = forward_float(spec, theta, x)
        pre = None
        wq = [layout.weights(theta, k) for k in range(len(spec.layers))]
        wmask = bmask = None
    elif mode == "fake-quant":
        cache = _fakequant_cache(spec, theta, x)
        acts, pre, wq = cache["acts"], cache["pre"], cache["wq"]
        wmask, bmask = cache["wmask"], cache["bmask"]
    else:
        raise ValueError(f"unsupported gradient mode {mode!r}")

    out = acts[-1]
    resid = out - y
    loss = float(np.mean(resid * resid))
    grad = np.zeros(layout.total)
    da = (2.0 / (n * d)) * resid
    for k in reversed(range(len(spec.layers))):
        layer = spec.layers[k]
        if pre is not None and layer.activation != "sigmoid":
            # straight-through the activation quantizer: block saturated cells
            afmt = spec.formats[k].activation
            h = np.maximum(pre[k], 0.0) if layer.activation == "relu" else pre[k]
            da = da * ((h >= afmt.min_value) & (h <= afmt.max_value))
        if layer.activation == "relu":
            z = pre[k] if pre is not None else None
            mask = (z > 0.0) if z is not None else (acts[k + 1] > 0.0)
            dz = da * mask
        elif layer.activation == "sigmoid":
            if pre is not None:
                s = 1.0 / (1.0 + np.exp(-pre[k]))
            else:
                s = acts[k + 1]
            dz = da * s * (1.0 - s)
        else:
            dz = da
        gw = dz.T @ acts[k]
        gb = dz.sum(axis=0)
        if wmask is not None:
            gw = gw * wmask[k]
            gb = gb * bmask[k]
        layout.weights(grad, k)[:] = gw
        layout.biases(grad, k)[:] = gb
        da = dz @ wq[k]
    return loss, grad


def hvp(
    spec: ModelSpec,
    theta: np.ndarray,
    batch: tuple[np.ndarray, np.ndarray],
    v: np.ndarray,
    mode: str = "float",
) -> np.ndarray:
    """Hessian-vector product by central differences of the gradient."""
    v = np.asarray(v, dtype=np.float64)
    nv = float(np.linalg.norm(v))
    if nv == 0.0:
        raise ValueError("hvp requires a nonzero direction")
    eps = np.sqrt(np.finfo(np.float64).eps) * (1.0 + float(np.linalg.norm(theta))) / nv
    _, gp = loss_and_grad(spec, theta + eps * v, batch, mode=mode)
    _, gm = loss_and_grad(spec, theta - eps * v, batch, mode=mode)
    return (gp - gm) / (2.0 * eps)


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    loss: str = "mse"
    qat: bool = True
    val_fraction: float = 0.2

    def __post_init__(self) -> None:
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss != "mse":
            raise ValueError(f"unsupported loss {self.loss!r}")


@dataclass
class TrainHistory:
    train_mse: list[float] = field(default_factory=list)
    train_reg: list[float] = field(default_factory=list)
    train_total: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)


@dataclass
class TrainResult:
    theta: np.ndarray
    history: TrainHistory


def split_train_val(
    n: int, val_fraction: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic train/val index split."""
    rng = np.random.default_rng(seed ^ 0x5EED)
    perm = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    return perm[n_val:], perm[:n_val]

def train(
    spec: ModelSpec,
    data: tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    regularizer: Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]] | None = None,
    reg_weight: float = 0.0,
    theta0: np.ndarray | None = None,
) -> TrainResult:
    """Adam training with a deterministic schedule.

    ``data`` is (inputs, targets); for autoencoders pass the inputs twice.
    ``regularizer(theta, x_batch) -> (R, dR/dtheta)`` is added to the objective
    as reg_weight/2 * R when provided. The update sequence is a pure function
    of (spec, data, cfg, theta0), so reruns are bitwise identical.
    """
    x, y = _check_batch(*data, spec=spec)
    mode = "fake-quant" if cfg.qat else "float"
    rng = np.random.default_rng(cfg.seed)
    theta = init_params(spec, cfg.seed) if theta0 is None else theta0.astype(np.float64).copy()

    tr_idx, va_idx = split_train_val(x.shape[0], cfg.val_fraction, cfg.seed)
    if tr_idx.size == 0:
        raise ValueError("training split is empty")
    x_tr, y_tr = x[tr_idx], y[tr_idx]
    x_va, y_va = x[va_idx], y[va_idx]

    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    hist = TrainHistory()
    t = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(x_tr.shape[0])
        mse_sum = 0.0
        reg_sum = 0.0
        n_steps = 0
        for start in range(0, x_tr.shape[0], cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = x_tr[idx], y_tr[idx]
            loss, grad = loss_and_grad(spec, theta, (xb, yb), mode=mode)
            if regularizer is not None:
                r_val, r_grad = regularizer(theta, xb)
                loss = loss + 0.5 * reg_weight * r_val
                grad = grad + (0.5 * reg_weight) * r_grad
                reg_sum += r_val
                mse_sum += loss - 0.5 * reg_weight * r_val
            else:
                mse_sum += loss
            if not np.isfinite(loss):
                raise DivergenceError(epoch, loss)
            t += 1
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
            mhat = m / (1.0 - cfg.beta1**t)
            vhat = v / (1.0 - cfg.beta2**t)
            theta = theta - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
            n_steps += 1
        ep_mse = mse_sum / n_steps
        ep_reg = reg_sum / n_steps
        hist.train_mse.append(ep_mse)
        hist.train_reg.append(ep_reg)
        hist.train_total.append(ep_mse + 0.5 * reg_weight * ep_reg)
        if x_va.shape[0] > 0:
            val_loss, _ = loss_and_grad(spec, theta, (x_va, y_va), mode=mode)
        else:
            val_loss = float("nan")
        hist.val_mse.append(val_loss)
        if x_va.shape[0] > 0 and not np.isfinite(val_loss):
            raise DivergenceError(epoch, val_loss)
    return TrainResult(theta=theta, history=hist)
