"""Bit-accurate C emission.

Emits a self-contained, integer-only C implementation of a quantized model
(the deployed encoder by default) plus a conformance harness with embedded
golden vectors produced by the interpreter. The arithmetic contract mirrors
the bit-exact interpreter: 64-bit products and accumulation, floor shifts via
explicit division (no implementation-defined behavior), round-half-even
requantization, saturation or wraparound per format, and table-based sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fixedpoint import FixedPointFormat, OVERFLOW_SATURATE, ROUND_HALF_EVEN
from .modelio import QuantizedModel

FUNC_NAME = "fxnn_infer"


@dataclass(frozen=True)
class EmittedSource:
    inference: str
    harness: str
    manifest: dict


class UnsupportedModelError(ValueError):
    pass


def _fmt_array(name: str, values: np.ndarray, per_line: int = 12) -> str:
    vals = [str(int(v)) for v in np.asarray(values).ravel()]
    lines = []
    for i in range(0, len(vals), per_line):
        lines.append("    " + ", ".join(vals[i : i + per_line]) + ",")
    body = "\n".join(lines)
    return f"static const int32_t {name}[{len(vals)}] = {{\n{body}\n}};\n"


def _requant_call(
    acc_expr: str, acc_frac: int, fmt: FixedPointFormat
) -> str:
    delta = acc_frac - fmt.frac_bits
    rne = 1 if fmt.rounding == ROUND_HALF_EVEN else 0
    wrap = 0 if fmt.overflow == OVERFLOW_SATURATE else 1
    span = 1 << fmt.total_bits
    return (
        f"fxnn_requant({acc_expr}, {delta}, {rne}, "
        f"INT64_C({fmt.min_code}), INT64_C({fmt.max_code}), {wrap}, INT64_C({span}))"
    )


_HELPERS = """\
static int64_t fxnn_floor_div_pow2(int64_t v, int s) {
    int64_t d = (int64_t)1 << s;
    int64_t q = v / d;
    if (v % d != 0 && v < 0) {
        q -= 1;
    }
    return q;
}

static int32_t fxnn_requant(int64_t acc, int delta, int rne,
                            int64_t cmin, int64_t cmax, int wrap, int64_t span) {
    int64_t q;
    if (delta > 0) {
        q = fxnn_floor_div_pow2(acc, delta);
        if (rne) {
            int64_t r = acc - q * ((int64_t)1 << delta);
            int64_t half = (int64_t)1 << (delta - 1);
            if (r > half || (r == half && (q & 1) != 0)) {
                q += 1;
            }
        }
    } else if (delta < 0) {
        q = acc * ((int64_t)1 << (-delta));
    } else {
        q = acc;
    }
    if (wrap) {
        int64_t r = (q - cmin) % span;
        if (r < 0) {
            r += span;
        }
        q = r + cmin;
    } else {
        if (q < cmin) {
            q = cmin;
        }
        if (q > cmax) {
            q = cmax;
        }
    }
    return (int32_t)q;
}
"""

_SIGMOID_HELPER = """\
static int32_t fxnn_sigmoid_index(int64_t acc, int frac) {
    int64_t idx;
    if (frac >= 4) {
        idx = fxnn_floor_div_pow2(acc, frac - 4);
    } else {
        idx = acc * ((int64_t)1 << (4 - frac));
    }
    idx += 128;
    if (idx < 0) {
        idx = 0;
    }
    if (idx > 255) {
        idx = 255;
    }
    return (int32_t)idx;
}
"""


def emit_model_source(model: QuantizedModel, part: str = "encoder") -> tuple[str, dict]:
    """C source for the inference function (codes in, codes out). Emission is a
    pure function of the model file: same model, byte-identical text."""
    spec = model.spec
    if part == "encoder":
        n_layers = spec.encoder_len
    elif part == "full":
        n_layers = len(spec.layers)
    else:
        raise ValueError(f"unknown part {part!r}")
    for k in range(n_layers):
        if spec.layers[k].activation not in ("relu", "sigmoid", "linear"):
            raise UnsupportedModelError(
                f"layer {k}: activation {spec.layers[k].activation!r} not emittable"
            )

    in_dim = spec.in_dim
    out_dim = spec.layers[n_layers - 1].out_dim
    tables = model.sigmoid_tables()
    uses_sigmoid = any(
        spec.layers[k].activation == "sigmoid" for k in range(n_layers)
    )

    parts: list[str] = []
    parts.append(
        "/* Integer-only fixed-point inference kernel.\n"
        f" * model: {model.content_hash()}\n"
        f" * part: {part} ({n_layers} layers, {in_dim} -> {out_dim})\n"
        " * Interface: codes in, codes out; quantization of real inputs is the\n"
        " * caller's job. Reentrant; no external dependencies.\n"
        " */\n"
        "#include <stdint.h>\n\n"
        f"#define FXNN_IN {in_dim}\n"
        f"#define FXNN_OUT {out_dim}\n\n"
        f"void {FUNC_NAME}(const int32_t *in, int32_t *out);\n\n"
    )
    for k in range(n_layers):
        parts.append(_fmt_array(f"FXNN_W{k}", model.weight_codes[k]))
        parts.append(_fmt_array(f"FXNN_B{k}", model.bias_codes[k]))
        if spec.layers[k].activation == "sigmoid":
            parts.append(_fmt_array(f"FXNN_SIG{k}", tables[k]))
    parts.append("\n" + _HELPERS)
    if uses_sigmoid:
        parts.append("\n" + _SIGMOID_HELPER)

    body: list[str] = []
    body.append(f"\nvoid {FUNC_NAME}(const int32_t *in, int32_t *out) {{\n")
    frac = spec.input_format.frac_bits
    src = "in"
    for k in range(n_layers):
        layer = spec.layers[k]
        fmts = spec.formats[k]
        s = fmts.weight.frac_bits + frac
        bshift = s - fmts.bias.frac_bits
        dst = "out" if k == n_layers - 1 else f"a{k}"
        if dst != "out":
            body.append(f"    int32_t a{k}[{layer.out_dim}];\n")
        body.append(f"    for (int o = 0; o < {layer.out_dim}; ++o) {{\n")
        body.append(
            f"        int64_t acc = (int64_t)FXNN_B{k}[o] * ((int64_t)1 << {bshift});\n"
        )
        body.append(f"        for (int i = 0; i < {layer.in_dim}; ++i) {{\n")
        body.append(
            f"            acc += (int64_t)FXNN_W{k}[o * {layer.in_dim} + i] * (int64_t){src}[i];\n"
        )
        body.append("        }\n")
        if layer.activation == "relu":
            body.append("        if (acc < 0) {\n            acc = 0;\n        }\n")
            body.append(
                f"        {dst}[o] = {_requant_call('acc', s, fmts.activation)};\n"
            )
        elif layer.activation == "sigmoid":
            body.append(
                f"        {dst}[o] = FXNN_SIG{k}[fxnn_sigmoid_index(acc, {s})];\n"
            )
        else:
            body.append(
                f"        {dst}[o] = {_requant_call('acc', s, fmts.activation)};\n"
            )
        body.append("    }\n")
        src = dst
        frac = fmts.activation.frac_bits
    body.append("}\n")
    parts.append("".join(body))

    manifest = {
        "model_hash": model.content_hash(),
        "part": part,
        "n_layers": n_layers,
        "in_dim": in_dim,
        "out_dim": out_dim,
        "function": FUNC_NAME,
        "input_format": spec.input_format.to_json(),
        "output_format": spec.formats[n_layers - 1].activation.to_json(),
    }
    return "".join(parts), manifest


def golden_vectors(
    model: QuantizedModel, n_vectors: int, seed: int, part: str = "encoder"
) -> tuple[np.ndarray, np.ndarray]:
    """Seeded random input codes spanning the full input-format range, with the
    interpreter's output codes as the expected answers."""
    if n_vectors < 1:
        raise ValueError("n_vectors must be >= 1")
    spec = model.spec
    rng = np.random.default_rng(seed)
    fmt = spec.input_format
    x = rng.integers(fmt.min_code, fmt.max_code + 1, size=(n_vectors, spec.in_dim)).astype(
        np.int64
    )
    acts = model.forward_codes(x)
    n_layers = spec.encoder_len if part == "encoder" else len(spec.layers)
    return x, acts[n_layers]


def emit_test_harness(
    model: QuantizedModel, n_vectors: int = 100, seed: int = 0, part: str = "encoder"
) -> tuple[str, dict]:
    """Self-checking main(): runs every embedded vector, prints the first
    mismatch (vector, index, got, want) and exits nonzero on failure."""
    x, want = golden_vectors(model, n_vectors, seed, part=part)
    in_dim = x.shape[1]
    out_dim = want.shape[1]
    parts = [
        "/* Conformance harness with embedded golden vectors.\n"
        f" * model: {model.content_hash()}\n"
        f" * vectors: {n_vectors} (seed {seed})\n"
        " */\n"
        "#include <stdint.h>\n"
        "#include <stdio.h>\n\n"
        f"extern void {FUNC_NAME}(const int32_t *in, int32_t *out);\n\n"
        f"#define N_VEC {n_vectors}\n"
        f"#define N_IN {in_dim}\n"
        f"#define N_OUT {out_dim}\n\n",
        _fmt_array("HARNESS_IN", x),
        _fmt_array("HARNESS_WANT", want),
        "\nint main(void) {\n"
        "    int32_t got[N_OUT];\n"
        "    for (int v = 0; v < N_VEC; ++v) {\n"
        f"        {FUNC_NAME}(&HARNESS_IN[v * N_IN], got);\n"
        "        for (int i = 0; i < N_OUT; ++i) {\n"
        "            if (got[i] != HARNESS_WANT[v * N_OUT + i]) {\n"
        '                printf("mismatch: vector %d index %d got %d want %d\\n",\n'
        "                       v, i, (int)got[i], (int)HARNESS_WANT[v * N_OUT + i]);\n"
        "                return 1;\n"
        "            }\n"
        "        }\n"
        "    }\n"
        '    printf("ok: %d vectors\\n", (int)N_VEC);\n'
        "    return 0;\n"
        "}\n",
    ]
    manifest = {"n_vectors": n_vectors, "seed": seed, "part": part}
    return "".join(parts), manifest


def emit(
    model: QuantizedModel, n_vectors: int = 100, seed: int = 0, part: str = "encoder"
) -> EmittedSource:
    inference, m1 = emit_model_source(model, part=part)
    harness, m2 = emit_test_harness(model, n_vectors=n_vectors, seed=seed, part=part)
    return EmittedSource(inference=inference, harness=harness, manifest={**m1, **m2})
