"""Study report: heatmap tables over (bit width x model size) plus per-cell
provenance, with deterministic CSV/JSON writers and a reloading reader."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

REPORT_SCHEMA = "fxnn-study/1"
TABLE_NAMES = ("noisy_emd", "top_eigenvalue", "hessian_trace")


@dataclass(frozen=True)
class StudyReport:
    widths: tuple[int, ...]
    hiddens: tuple[int, ...]
    seeds: tuple[int, ...]
    tables: dict[str, tuple[tuple[float, ...], ...]]  # name -> rows (widths) x cols (hiddens)
    cell_runs: dict[str, tuple[dict, ...]]  # "w{width}_h{hidden}" -> per-seed records
    config_hash: str

    def cell_key(self, width: int, hidden: int) -> str:
        return f"w{width}_h{hidden}"


def _csv_lines(report: StudyReport, name: str) -> list[str]:
    lines = [f"# config_hash={report.config_hash}"]
    lines.append("width," + ",".join(f"hidden_{h}" for h in report.hiddens))
    for w, row in zip(report.widths, report.tables[name]):
        lines.append(f"{w}," + ",".join(repr(v) for v in row))
    return lines


def write_report(report: StudyReport, out_dir: str | Path) -> list[Path]:
    """One CSV per heatmap plus a JSON carrying everything. Byte-identical
    output for identical reports."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in TABLE_NAMES:
        if name not in report.tables:
            continue
        path = out / f"heatmap_{name}.csv"
        path.write_text("\n".join(_csv_lines(report, name)) + "\n")
        written.append(path)
    payload = {
        "schema": REPORT_SCHEMA,
        "config_hash": report.config_hash,
        "widths": list(report.widths),
        "hiddens": list(report.hiddens),
        "seeds": list(report.seeds),
        "tables": {k: [list(r) for r in v] for k, v in report.tables.items()},
        "cell_runs": {k: list(v) for k, v in report.cell_runs.items()},
    }
    path = out / "study.json"
    path.write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n")
    written.append(path)
    return written


def read_report(out_dir: str | Path) -> StudyReport:
    payload = json.loads((Path(out_dir) / "study.json").read_text())
    if payload.get("schema") != REPORT_SCHEMA:
        raise ValueError(f"unsupported study schema {payload.get('schema')!r}")
    return StudyReport(
        widths=tuple(payload["widths"]),
        hiddens=tuple(payload["hiddens"]),
        seeds=tuple(payload["seeds"]),
        tables={k: tuple(tuple(r) for r in v) for k, v in payload["tables"].items()},
        cell_runs={k: tuple(v) for k, v in payload["cell_runs"].items()},
        config_hash=payload["config_hash"],
    )
