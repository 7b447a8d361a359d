"""Run configuration: JSON schema with defaults, strict unknown-key rejection,
canonical serialization and hashing. Every CLI command resolves its config up
front, embeds the hash in every artifact, and writes the resolved copy next to
the outputs so any result is reproducible from its directory alone.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

from .dataio import BlobConfig, GridGeometry, NoiseSpec
from .jacreg import JacRegConfig
from .nn import FixedPointFormat, ModelSpec, TrainConfig, benchmark_spec


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "model": {
        "weight_bits": 6,
        "hidden": 31,
        "latent": 16,
        "n_cells": 48,
    },
    "data": {
        "n": 1024,
        "nx": 8,
        "ny": 6,
        "spacing": 1.0,
        "blobs": {
            "n_blobs": [1, 3],
            "width": [0.5, 2.0],
            "amplitude": [0.5, 1.5],
            "photons": 200.0,
        },
    },
    "train": {
        "lr": 3e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "batch_size": 64,
        "epochs": 20,
        "qat": True,
        "val_fraction": 0.2,
    },
    "noise": {
        "level": 0.05,
        "kind": "gaussian-additive",
    },
    "fault": {
        "metric": "emd",
        "tau": 0.01,
        "rank_k": 8,
        "layers": None,
        "budget": 0.06,
    },
    "landscape": {
        "k": 3,
        "tol": 1e-3,
        "max_iters": 200,
        "n_probes": 100,
        "extent": 1.0,
        "resolution": 21,
        "batch": 256,
    },
    "jacreg": {
        "lambdas": [0.0, 1e-3, 1e-2, 1e-1],
        "mode": "exact",
        "n_proj": 1,
        "encoder_only": True,
        "seeds": [0, 1, 2, 3, 4],
    },
    "codegen": {
        "n_vectors": 100,
        "part": "encoder",
    },
    "study": {
        "widths": [2, 4, 6, 8],
        "hiddens": [16, 31],
        "seeds": [0, 1, 2],
    },
}


def _merge(defaults: Any, user: Any, path: str) -> Any:
    if isinstance(defaults, dict):
        if not isinstance(user, dict):
            raise ConfigError(f"{path or 'config'}: expected an object")
        unknown = set(user) - set(defaults)
        if unknown:
            raise ConfigError(
                f"{path or 'config'}: unknown keys: {', '.join(sorted(unknown))}"
            )
        out = {}
        for key, dval in defaults.items():
            if key in user:
                sub = f"{path}.{key}" if path else key
                if isinstance(dval, dict):
                    out[key] = _merge(dval, user[key], sub)
                else:
                    out[key] = user[key]
            else:
                out[key] = dval
        return out
    return user


def resolve_config(user: dict | None) -> dict:
    """Merge a user config over the defaults, rejecting unknown keys."""
    return _merge(DEFAULTS, user or {}, "")


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return resolve_config(None)
    obj = json.loads(Path(path).read_text())
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return resolve_config(obj)


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


# --- constructors from resolved config sections -----------------------------


def model_spec_from(cfg: dict) -> ModelSpec:
    m = cfg["model"]
    return benchmark_spec(
        weight_bits=int(m["weight_bits"]),
        hidden=int(m["hidden"]),
        latent=int(m["latent"]),
        n_cells=int(m["n_cells"]),
    )


def geometry_from(cfg: dict) -> GridGeometry:
    d = cfg["data"]
    return GridGeometry.rectangular(int(d["nx"]), int(d["ny"]), float(d["spacing"]))


def blob_config_from(cfg: dict) -> BlobConfig:
    b = cfg["data"]["blobs"]
    photons = b["photons"]
    return BlobConfig(
        n_blobs=(int(b["n_blobs"][0]), int(b["n_blobs"][1])),
        width=(float(b["width"][0]), float(b["width"][1])),
        amplitude=(float(b["amplitude"][0]), float(b["amplitude"][1])),
        photons=None if photons is None else float(photons),
    )


def train_config_from(cfg: dict, seed: int | None = None) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        lr=float(t["lr"]),
        beta1=float(t["beta1"]),
        beta2=float(t["beta2"]),
        eps=float(t["eps"]),
        batch_size=int(t["batch_size"]),
        epochs=int(t["epochs"]),
        seed=int(cfg["seed"] if seed is None else seed),
        qat=bool(t["qat"]),
        val_fraction=float(t["val_fraction"]),
    )


def noise_spec_from(cfg: dict, seed: int | None = None) -> NoiseSpec:
    n = cfg["noise"]
    return NoiseSpec(
        level=float(n["level"]),
        kind=str(n["kind"]),
        seed=int(cfg["seed"] if seed is None else seed),
    )


def jacreg_config_from(cfg: dict, lambda_jr: float) -> JacRegConfig:
    j = cfg["jacreg"]
    return JacRegConfig(
        lambda_jr=lambda_jr,
        mode=str(j["mode"]),
        n_proj=int(j["n_proj"]),
        encoder_only=bool(j["encoder_only"]),
        seed=int(cfg["seed"]),
    )
