"""Quantized model container and its JSON file format.

A model file is one JSON document carrying the layer specs, all fixed-point
formats, the stored parameter codes, and the sigmoid lookup tables. Loading
revalidates every structural invariant so that downstream consumers (the
interpreter, the fault injector, the C emitter) can trust the contents.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fixedpoint import FixedPointFormat, quantize_codes
from .nn import (
    DenseLayerSpec,
    LayerFormats,
    ModelSpec,
    ParamLayout,
    forward_bitexact,
    sigmoid_table_codes,
)

SCHEMA = "fxnn-model/1"


@dataclass(frozen=True)
class QuantizedModel:
    """A deployed model: spec plus the integer codes actually stored in
    registers. Codes, not reals, are the ground truth for bit-exact inference,
    fault injection and code emission."""

    spec: ModelSpec
    weight_codes: tuple[np.ndarray, ...]
    bias_codes: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        if len(self.weight_codes) != len(self.spec.layers) or len(self.bias_codes) != len(
            self.spec.layers
        ):
            raise ValueError("one code array pair per layer required")
        wc, bc = [], []
        for k, layer in enumerate(self.spec.layers):
            fmts = self.spec.formats[k]
            w = np.asarray(self.weight_codes[k], dtype=np.int64)
            b = np.asarray(self.bias_codes[k], dtype=np.int64)
            if w.shape != (layer.out_dim, layer.in_dim):
                raise ValueError(f"layer {k}: weight codes shape {w.shape}")
            if b.shape != (layer.out_dim,):
                raise ValueError(f"layer {k}: bias codes shape {b.shape}")
            for arr, fmt, what in ((w, fmts.weight, "weight"), (b, fmts.bias, "bias")):
                if arr.min(initial=0) < fmt.min_code or arr.max(initial=0) > fmt.max_code:
                    raise ValueError(f"layer {k}: {what} code out of range")
            wc.append(w)
            bc.append(b)
        object.__setattr__(self, "weight_codes", tuple(wc))
        object.__setattr__(self, "bias_codes", tuple(bc))

    @classmethod
    def from_params(cls, spec: ModelSpec, theta: np.ndarray) -> "QuantizedModel":
        layout = ParamLayout.of(spec)
        wc = [
            quantize_codes(layout.weights(theta, k), spec.formats[k].weight)
            for k in range(len(spec.layers))
        ]
        bc = [
            quantize_codes(layout.biases(theta, k), spec.formats[k].bias)
            for k in range(len(spec.layers))
        ]
        return cls(spec=spec, weight_codes=tuple(wc), bias_codes=tuple(bc))

    def decode_params(self) -> np.ndarray:
        """Real-valued parameter vector equal to quantize(theta)."""
        layout = ParamLayout.of(self.spec)
        theta = np.zeros(layout.total)
        for k in range(len(self.spec.layers)):
            fmts = self.spec.formats[k]
            layout.weights(theta, k)[:] = self.weight_codes[k] * fmts.weight.step
            layout.biases(theta, k)[:] = self.bias_codes[k] * fmts.bias.step
        return theta

    def forward_codes(self, x_codes: np.ndarray) -> list[np.ndarray]:
        return forward_bitexact(self.spec, self.weight_codes, self.bias_codes, x_codes)

    def sigmoid_tables(self) -> dict[int, np.ndarray]:
        return {
            k: sigmoid_table_codes(self.spec.formats[k].activation)
            for k, layer in enumerate(self.spec.layers)
            if layer.activation == "sigmoid"
        }

    def to_json_obj(self) -> dict:
        return {
            "schema": SCHEMA,
            "spec": {
                "encoder_len": self.spec.encoder_len,
                "layers": [
                    {"in_dim": l.in_dim, "out_dim": l.out_dim, "activation": l.activation}
                    for l in self.spec.layers
                ],
            },
            "input_format": self.spec.input_format.to_json(),
            "formats": [
                {
                    "weight": f.weight.to_json(),
                    "bias": f.bias.to_json(),
                    "activation": f.activation.to_json(),
                }
                for f in self.spec.formats
            ],
            "parameters": [
                {"weights": self.weight_codes[k].tolist(), "biases": self.bias_codes[k].tolist()}
                for k in range(len(self.spec.layers))
            ],
            "sigmoid_tables": {str(k): t.tolist() for k, t in self.sigmoid_tables().items()},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json_obj(), sort_keys=True, separators=(",", ":")) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    def content_hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    @classmethod
    def from_json_obj(cls, obj: dict) -> "QuantizedModel":
        if obj.get("schema") != SCHEMA:
            raise ValueError(f"unsupported model schema {obj.get('schema')!r}")
        spec_obj = obj["spec"]
        layers = tuple(
            DenseLayerSpec(int(l["in_dim"]), int(l["out_dim"]), str(l["activation"]))
            for l in spec_obj["layers"]
        )
        formats = tuple(
            LayerFormats(
                weight=FixedPointFormat.from_json(f["weight"]),
                bias=FixedPointFormat.from_json(f["bias"]),
                activation=FixedPointFormat.from_json(f["activation"]),
            )
            for f in obj["formats"]
        )
        spec = ModelSpec(
            layers=layers,
            formats=formats,
            input_format=FixedPointFormat.from_json(obj["input_format"]),
            encoder_len=int(spec_obj["encoder_len"]),
        )
        params = obj["parameters"]
        if len(params) != len(layers):
            raise ValueError("parameter block count does not match layer count")
        model = cls(
            spec=spec,
            weight_codes=tuple(np.array(p["weights"], dtype=np.int64) for p in params),
            bias_codes=tuple(np.array(p["biases"], dtype=np.int64) for p in params),
        )
        stored_tables = {int(k): np.array(v, dtype=np.int64) for k, v in obj["sigmoid_tables"].items()}
        derived = model.sigmoid_tables()
        if set(stored_tables) != set(derived):
            raise ValueError("sigmoid table set does not match sigmoid layers")
        for k, tab in derived.items():
            if not np.array_equal(stored_tables[k], tab):
                raise ValueError(f"layer {k}: stored sigmoid table disagrees with its format")
        return model

    @classmethod
    def load(cls, path: str | Path) -> "QuantizedModel":
        return cls.from_json_obj(json.loads(Path(path).read_text()))
