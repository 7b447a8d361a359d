"""Command-line interface tying the toolkit together.

Every command resolves its configuration, writes a resolved copy plus a config
hash into each artifact, and produces deterministic bytes: rerunning a command
with the same config and seed reproduces every output file exactly.
"""

from __future__ import annotations

import argparse
import json
import os
import shlex
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import codegen as cg
from . import config as cfgmod
from . import fault, jacreg, landscape, metrics, nn
from .dataio import Dataset, GridGeometry, gen_synthetic, load_csv, load_geometry_csv
from .modelio import QuantizedModel
from .report import StudyReport, write_report

STRICT_CC = "cc -std=c99 -Wall -Wextra -Wpedantic -Werror"


def _write_json(obj: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")


def _write_csv(lines: list[str], path: Path, chash: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join([f"# config_hash={chash}"] + lines) + "\n")


def _prepare(args) -> tuple[dict, str, Path]:
    cfg = cfgmod.load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = int(args.seed)
    if getattr(args, "tau", None) is not None:
        cfg["fault"]["tau"] = float(args.tau)
    if getattr(args, "noise_level", None) is not None:
        cfg["noise"]["level"] = float(args.noise_level)
    if getattr(args, "widths", None) is not None:
        cfg["study"]["widths"] = [int(w) for w in args.widths.split(",")]
    if getattr(args, "budget", None) is not None:
        cfg["fault"]["budget"] = float(args.budget)
    chash = cfgmod.config_hash(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json({"config_hash": chash, "resolved": cfg}, out / "resolved_config.json")
    if getattr(args, "threads", None):
        import numba

        numba.set_num_threads(max(1, int(args.threads)))
    return cfg, chash, out


def _dataset(cfg: dict, args, seed_offset: int = 0) -> Dataset:
    """Dataset from --data/--geometry when given, else synthesized from the
    config with the run seed plus a role-specific offset."""
    data_path = getattr(args, "data", None)
    if data_path:
        geom_path = getattr(args, "geometry", None)
        geom = load_geometry_csv(geom_path) if geom_path else cfgmod.geometry_from(cfg)
        return load_csv(data_path, geom)
    return gen_synthetic(
        int(cfg["data"]["n"]),
        int(cfg["seed"]) + seed_offset,
        cfgmod.geometry_from(cfg),
        cfgmod.blob_config_from(cfg),
    )


def _load_model(path: str) -> QuantizedModel:
    return QuantizedModel.load(path)


# --- commands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg, chash, out = _prepare(args)
    data = _dataset(cfg, args)
    rows = [",".join(repr(v) for v in row) for row in data.samples]
    _write_csv(rows, out / "data.csv", chash)
    geo = [",".join(repr(v) for v in xy) for xy in data.geometry.coords]
    _write_csv(geo, out / "geometry.csv", chash)
    _write_json(
        {"config_hash": chash, "n": data.n, "n_cells": data.geometry.n_cells},
        out / "data_summary.json",
    )
    return 0


def _history_obj(result: nn.TrainResult) -> dict:
    h = result.history
    return {
        "train_mse": h.train_mse,
        "train_reg": h.train_reg,
        "train_total": h.train_total,
        "val_mse": h.val_mse,
    }


def cmd_train(args) -> int:
    cfg, chash, out = _prepare(args)
    spec = cfgmod.model_spec_from(cfg)
    data = _dataset(cfg, args)
    tc = cfgmod.train_config_from(cfg)
    result = nn.train(spec, (data.samples, data.samples), tc)
    model = QuantizedModel.from_params(spec, result.theta)
    model.save(out / "model.json")
    _write_json({"config_hash": chash, **_history_obj(result)}, out / "history.json")
    return 0


def cmd_jacreg_train(args) -> int:
    cfg, chash, out = _prepare(args)
    spec = cfgmod.model_spec_from(cfg)
    data = _dataset(cfg, args)
    tc = cfgmod.train_config_from(cfg)
    lam = float(args.lambda_jr)
    jc = cfgmod.jacreg_config_from(cfg, lam)
    result = jacreg.train_robust(spec, (data.samples, data.samples), tc, jc)
    model = QuantizedModel.from_params(spec, result.theta)
    model.save(out / "model.json")
    _write_json(
        {"config_hash": chash, "lambda_jr": lam, **_history_obj(result)},
        out / "history.json",
    )
    return 0


def cmd_eval(args) -> int:
    cfg, chash, out = _prepare(args)
    model = _load_model(args.model)
    data = _dataset(cfg, args, seed_offset=1)
    theta = model.decode_params()
    clean = jacreg.model_emd(model.spec, theta, data)
    columns = ["sample,emd_clean"]
    summary = {
        "config_hash": chash,
        "model_hash": model.content_hash(),
        "n": data.n,
        "clean": {"mean": float(clean.mean()), "median": float(np.median(clean))},
    }
    noisy = None
    if cfg["noise"]["level"] > 0:
        noisy = jacreg.model_emd(
            model.spec, theta, data, noise=cfgmod.noise_spec_from(cfg)
        )
        columns = ["sample,emd_clean,emd_noisy"]
        summary["noisy"] = {
            "level": cfg["noise"]["level"],
            "mean": float(noisy.mean()),
            "median": float(np.median(noisy)),
        }
    lines = columns + [
        f"{i},{clean[i]!r}" + ("" if noisy is None else f",{noisy[i]!r}")
        for i in range(data.n)
    ]
    _write_csv(lines, out / "emd_per_sample.csv", chash)
    _write_json(summary, out / "eval_summary.json")
    return 0


def cmd_hessian(args) -> int:
    cfg, chash, out = _prepare(args)
    model = _load_model(args.model)
    data = _dataset(cfg, args, seed_offset=1)
    ls = cfg["landscape"]
    batch = data.samples[: int(ls["batch"])]
    summary = landscape.hessian_summary(
        model.spec,
        model.decode_params(),
        (batch, batch),
        k=int(ls["k"]),
        tol=float(ls["tol"]),
        max_iters=int(ls["max_iters"]),
        n_probes=int(ls["n_probes"]),
        seed=int(cfg["seed"]),
    )
    _write_json(
        {
            "config_hash": chash,
            "model_hash": model.content_hash(),
            "top_eigenvalues": list(summary.top_eigenvalues),
            "residuals": [p.residual for p in summary.eigenpairs],
            "converged": [p.converged for p in summary.eigenpairs],
            "trace_estimate": summary.trace_estimate,
            "trace_stderr": summary.trace_stderr,
            "n_probes": summary.n_probes,
        },
        out / "hessian.json",
    )
    return 0


def cmd_landscape(args) -> int:
    cfg, chash, out = _prepare(args)
    model = _load_model(args.model)
    data = _dataset(cfg, args, seed_offset=1)
    ls = cfg["landscape"]
    batch = data.samples[: int(ls["batch"])]
    grid = landscape.loss_slice_2d(
        model.spec,
        model.decode_params(),
        (batch, batch),
        extent=float(ls["extent"]),
        resolution=int(ls["resolution"]),
        seed=int(cfg["seed"]),
    )
    lines = [",".join(repr(v) for v in row) for row in grid.losses]
    _write_csv(lines, out / "landscape_grid.csv", chash)
    _write_json(
        {
            "config_hash": chash,
            "model_hash": model.content_hash(),
            "extent": grid.extent,
            "resolution": int(ls["resolution"]),
            "coords": grid.coords.tolist(),
            "d1": grid.d1.tolist(),
            "d2": grid.d2.tolist(),
        },
        out / "landscape_meta.json",
    )
    return 0


def cmd_cka(args) -> int:
    cfg, chash, out = _prepare(args)
    m1 = _load_model(args.model)
    m2 = _load_model(args.model2)
    data = _dataset(cfg, args, seed_offset=1)
    lat1 = nn.forward(m1.spec, m1.decode_params(), data.samples, mode="fake-quant")[
        m1.spec.encoder_len
    ]
    lat2 = nn.forward(m2.spec, m2.decode_params(), data.samples, mode="fake-quant")[
        m2.spec.encoder_len
    ]
    res = metrics.linear_cka(lat1, lat2)
    _write_json(
        {
            "config_hash": chash,
            "model_hash": m1.content_hash(),
            "model2_hash": m2.content_hash(),
            "cka": res.value,
            "n": res.n,
        },
        out / "cka.json",
    )
    return 0


def _campaign_csv_lines(report: fault.CampaignReport) -> list[str]:
    lines = ["layer,index,bit,baseline,faulty,degradation"]
    for t in report.trials:
        lines.append(
            f"{t.addr.layer},{t.addr.index},{t.addr.bit},"
            f"{t.baseline!r},{t.faulty!r},{t.degradation!r}"
        )
    return lines


def cmd_fault_scan(args) -> int:
    cfg, chash, out = _prepare(args)
    model = _load_model(args.model)
    data = _dataset(cfg, args, seed_offset=1)
    n_eval = int(cfg["landscape"]["batch"])
    eval_set = Dataset(samples=data.samples[:n_eval], geometry=data.geometry)
    fc = cfg["fault"]
    report = fault.exhaustive_scan(
        model,
        eval_set,
        metric=str(fc["metric"]),
        tau=float(fc["tau"]),
        layers=None if fc["layers"] is None else tuple(fc["layers"]),
    )
    _write_csv(_campaign_csv_lines(report), out / "campaign.csv", chash)
    _write_json(
        {
            "config_hash": chash,
            "model_hash": model.content_hash(),
            "metric": report.metric,
            "tau": report.tau,
            "baseline": report.baseline,
            "n_trials": report.n_trials,
            "sensitive_fraction": report.sensitive_fraction,
            "bit_stats": {str(k): v for k, v in report.bit_stats.items()},
        },
        out / "campaign_summary.json",
    )
    return 0


def cmd_rank_bits(args) -> int:
    cfg, chash, out = _prepare(args)
    model = _load_model(args.model)
    data = _dataset(cfg, args, seed_offset=1)
    batch = data.samples[: int(cfg["landscape"]["batch"])]
    fc = cfg["fault"]
    ranking = fault.hessian_bit_rank(
        model,
        (batch, batch),
        k=int(fc["rank_k"]),
        layers=None if fc["layers"] is None else tuple(fc["layers"]),
        seed=int(cfg["seed"]),
        max_iters=int(cfg["landscape"]["max_iters"]),
        tol=float(cfg["landscape"]["tol"]),
    )
    lines = ["layer,index,bit,score"]
    for addr, score in ranking.entries:
        lines.append(f"{addr.layer},{addr.index},{addr.bit},{score!r}")
    _write_csv(lines, out / "ranking.csv", chash)
    return 0


def _read_ranking_csv(path: str) -> fault.SensitivityRanking:
    entries = []
    for ln in Path(path).read_text().splitlines():
        if ln.startswith("#") or ln.startswith("layer,"):
            continue
        l, i, b, s = ln.split(",")
        entries.append((fault.BitAddress(int(l), int(i), int(b)), float(s)))
    return fault.SensitivityRanking(entries=tuple(entries), k_eigenpairs=0)


def _read_campaign_csv(path: str, tau: float, metric: str) -> fault.CampaignReport:
    trials = []
    for ln in Path(path).read_text().splitlines():
        if ln.startswith("#") or ln.startswith("layer,"):
            continue
        l, i, b, m0, m1, d = ln.split(",")
        trials.append(
            fault.FaultTrial(
                addr=fault.BitAddress(int(l), int(i), int(b)),
                baseline=float(m0),
                faulty=float(m1),
                degradation=float(d),
            )
        )
    base = trials[0].baseline if trials else 0.0
    return fault.summarize_campaign(tuple(trials), base, metric, tau)


def cmd_protect(args) -> int:
    cfg, chash, out = _prepare(args)
    ranking = _read_ranking_csv(args.ranking)
    campaign = None
    if args.campaign:
        campaign = _read_campaign_csv(
            args.campaign, float(cfg["fault"]["tau"]), str(cfg["fault"]["metric"])
        )
    plan = fault.select_protection(ranking, float(cfg["fault"]["budget"]), campaign)
    _write_json(
        {
            "config_hash": chash,
            "budget": cfg["fault"]["budget"],
            "total_bits": plan.total_bits,
            "n_protected": len(plan.protected),
            "overhead_bits": plan.overhead_bits,
            "overhead_fraction": plan.overhead_fraction,
            "residual_risk": plan.residual_risk,
            "protected": [[a.layer, a.index, a.bit] for a in plan.protected],
        },
        out / "protection.json",
    )
    return 0


def cmd_robustness_curve(args) -> int:
    cfg, chash, out = _prepare(args)
    spec = cfgmod.model_spec_from(cfg)
    data = _dataset(cfg, args)
    tc = cfgmod.train_config_from(cfg)
    jc = cfgmod.jacreg_config_from(cfg, 0.0)
    lambdas = [float(x) for x in cfg["jacreg"]["lambdas"]]
    seeds = [int(s) for s in cfg["jacreg"]["seeds"]]
    curve = jacreg.noise_robustness_curve(
        spec, data, tc, jc, lambdas, seeds, cfgmod.noise_spec_from(cfg)
    )
    lines = ["lambda,clean,noisy_mean,noisy_std"]
    for p in curve.points:
        lines.append(f"{p.lambda_jr!r},{p.clean_emd!r},{p.noisy_emd_mean!r},{p.noisy_emd_std!r}")
    _write_csv(lines, out / "robustness.csv", chash)
    _write_json(
        {
            "config_hash": chash,
            "noise_level": curve.noise_level,
            "seeds": list(curve.seeds),
            "points": [
                {
                    "lambda": p.lambda_jr,
                    "clean": p.clean_emd,
                    "noisy_mean": p.noisy_emd_mean,
                    "noisy_std": p.noisy_emd_std,
                    "clean_per_seed": list(p.clean_per_seed),
                    "noisy_per_seed": list(p.noisy_per_seed),
                }
                for p in curve.points
            ],
        },
        out / "robustness.json",
    )
    return 0


def cmd_codegen(args) -> int:
    cfg, chash, out = _prepare(args)
    model = _load_model(args.model)
    cc = cfg["codegen"]
    n_vectors = int(args.n_vectors) if args.n_vectors else int(cc["n_vectors"])
    part = args.part or str(cc["part"])
    emitted = cg.emit(model, n_vectors=n_vectors, seed=int(cfg["seed"]), part=part)
    (out / "model.c").write_text(emitted.inference)
    (out / "harness.c").write_text(emitted.harness)
    _write_json({"config_hash": chash, **emitted.manifest}, out / "manifest.json")
    return 0


def compile_and_run_harness(
    inference: str, harness: str, cc_cmd: str | None = None
) -> tuple[int, str]:
    """Compile the two emitted files alone in a scratch directory and run the
    harness. Returns (exit status, harness stdout)."""
    cmd = shlex.split(cc_cmd or os.environ.get("FXNN_CC") or STRICT_CC)
    with tempfile.TemporaryDirectory() as tmp:
        tdir = Path(tmp)
        (tdir / "model.c").write_text(inference)
        (tdir / "harness.c").write_text(harness)
        exe = tdir / "harness"
        build = subprocess.run(
            cmd + ["model.c", "harness.c", "-o", str(exe)],
            cwd=tdir,
            capture_output=True,
            text=True,
        )
        if build.returncode != 0:
            return build.returncode, build.stdout + build.stderr
        run = subprocess.run([str(exe)], capture_output=True, text=True)
        return run.returncode, run.stdout


def cmd_verify_codegen(args) -> int:
    cfg, chash, out = _prepare(args)
    model = _load_model(args.model)
    cc = cfg["codegen"]
    n_vectors = int(args.n_vectors) if args.n_vectors else int(cc["n_vectors"])
    part = args.part or str(cc["part"])
    emitted = cg.emit(model, n_vectors=n_vectors, seed=int(cfg["seed"]), part=part)
    status, output = compile_and_run_harness(emitted.inference, emitted.harness)
    _write_json(
        {
            "config_hash": chash,
            "model_hash": model.content_hash(),
            "n_vectors": n_vectors,
            "part": part,
            "status": status,
            "output": output,
        },
        out / "verify.json",
    )
    if status != 0:
        print(f"verify-codegen failed (status {status}):\n{output}", file=sys.stderr)
    return 0 if status == 0 else 1


def _study_cell(cfg: dict, width: int, hidden: int, seed: int) -> dict:
    sub = json.loads(json.dumps(cfg))
    sub["model"]["weight_bits"] = width
    sub["model"]["hidden"] = hidden
    spec = cfgmod.model_spec_from(sub)
    data = gen_synthetic(
        int(cfg["data"]["n"]), int(cfg["seed"]), cfgmod.geometry_from(cfg),
        cfgmod.blob_config_from(cfg),
    )
    tc = cfgmod.train_config_from(cfg, seed=seed)
    result = nn.train(spec, (data.samples, data.samples), tc)
    _, va_idx = nn.split_train_val(data.n, tc.val_fraction, tc.seed)
    eval_set = Dataset(samples=data.samples[va_idx], geometry=data.geometry)
    noisy = jacreg.model_emd(
        spec, result.theta, eval_set, noise=cfgmod.noise_spec_from(cfg, seed=seed)
    )
    ls = cfg["landscape"]
    batch = eval_set.samples[: int(ls["batch"])]
    summ = landscape.hessian_summary(
        spec,
        result.theta,
        (batch, batch),
        k=1,
        tol=float(ls["tol"]),
        max_iters=int(ls["max_iters"]),
        n_probes=int(ls["n_probes"]),
        seed=seed,
    )
    return {
        "seed": seed,
        "noisy_emd": float(noisy.mean()),
        "top_eigenvalue": float(summ.top_eigenvalues[0]),
        "hessian_trace": float(summ.trace_estimate),
    }


def cmd_study(args) -> int:
    cfg, chash, out = _prepare(args)
    widths = [int(w) for w in cfg["study"]["widths"]]
    hiddens = [int(h) for h in cfg["study"]["hiddens"]]
    seeds = [int(s) for s in cfg["study"]["seeds"]]
    jobs = [(w, h, s) for w in widths for h in hiddens for s in seeds]
    threads = max(1, int(args.threads or 1))
    results: dict[tuple[int, int, int], dict] = {}
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {job: pool.submit(_study_cell, cfg, *job) for job in jobs}
            results = {job: f.result() for job, f in futures.items()}
    else:
        results = {job: _study_cell(cfg, *job) for job in jobs}

    tables: dict[str, list[list[float]]] = {
        name: [] for name in ("noisy_emd", "top_eigenvalue", "hessian_trace")
    }
    cell_runs: dict[str, tuple[dict, ...]] = {}
    for w in widths:
        rows = {name: [] for name in tables}
        for h in hiddens:
            runs = tuple(results[(w, h, s)] for s in seeds)
            cell_runs[f"w{w}_h{h}"] = runs
            for name in tables:
                rows[name].append(float(np.median([r[name] for r in runs])))
        for name in tables:
            tables[name].append(rows[name])
    report = StudyReport(
        widths=tuple(widths),
        hiddens=tuple(hiddens),
        seeds=tuple(seeds),
        tables={k: tuple(tuple(r) for r in v) for k, v in tables.items()},
        cell_runs=cell_runs,
        config_hash=chash,
    )
    write_report(report, out / "study")
    return 0


# --- argument parsing --------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, model: bool = False) -> None:
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--threads", type=int, help="worker threads")
    p.add_argument("--data", help="input data CSV (C columns, no header)")
    p.add_argument("--geometry", help="geometry CSV (x,y per cell)")
    if model:
        p.add_argument("--model", required=True, help="model JSON file")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="fxnn",
        description="fixed-point NN reliability toolkit",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic data + geometry CSVs")
    _add_common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="quantization-aware training")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("jacreg-train", help="training with Jacobian regularization")
    _add_common(p)
    p.add_argument("--lambda", dest="lambda_jr", type=float, default=1e-2)
    p.set_defaults(fn=cmd_jacreg_train)

    p = sub.add_parser("eval", help="per-sample reconstruction EMD")
    _add_common(p, model=True)
    p.add_argument("--noise-level", type=float)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("hessian", help="top eigenvalues and trace of the loss curvature")
    _add_common(p, model=True)
    p.set_defaults(fn=cmd_hessian)

    p = sub.add_parser("landscape", help="2-D loss-surface slice grid")
    _add_common(p, model=True)
    p.set_defaults(fn=cmd_landscape)

    p = sub.add_parser("cka", help="latent-representation similarity of two models")
    _add_common(p, model=True)
    p.add_argument("--model2", required=True)
    p.set_defaults(fn=cmd_cka)

    p = sub.add_parser("fault-scan", help="exhaustive single-bit fault campaign")
    _add_common(p, model=True)
    p.add_argument("--tau", type=float, help="sensitivity threshold on relative degradation")
    p.set_defaults(fn=cmd_fault_scan)

    p = sub.add_parser("rank-bits", help="curvature-guided bit sensitivity ranking")
    _add_common(p, model=True)
    p.set_defaults(fn=cmd_rank_bits)

    p = sub.add_parser("protect", help="select a protection set under a bit budget")
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--ranking", required=True, help="ranking CSV from rank-bits")
    p.add_argument("--campaign", help="campaign CSV for residual-risk accounting")
    p.add_argument("--budget", type=float, help="fraction of bits to protect")
    p.add_argument("--tau", type=float)
    p.set_defaults(fn=cmd_protect)

    p = sub.add_parser("robustness-curve", help="noisy-EMD vs regularization strength")
    _add_common(p)
    p.add_argument("--noise-level", type=float)
    p.set_defaults(fn=cmd_robustness_curve)

    p = sub.add_parser("codegen", help="emit bit-accurate C and a golden harness")
    _add_common(p, model=True)
    p.add_argument("--n-vectors", type=int)
    p.add_argument("--part", choices=["encoder", "full"])
    p.set_defaults(fn=cmd_codegen)

    p = sub.add_parser("verify-codegen", help="compile emitted C and run the harness")
    _add_common(p, model=True)
    p.add_argument("--n-vectors", type=int)
    p.add_argument("--part", choices=["encoder", "full"])
    p.set_defaults(fn=cmd_verify_codegen)

    p = sub.add_parser("study", help="bit-width x model-size sweep with heatmaps")
    _add_common(p)
    p.add_argument("--widths", help="comma-separated weight bit widths")
    p.set_defaults(fn=cmd_study)

    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, cfgmod.ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
