"""Report files: per (trojan, metric) summary tables, analysis JSON and plot-data series.

Every file starts with a provenance line carrying the config hash, master
seed and format version (``# trojanfilter ...`` for CSV, a ``provenance``
object for JSON).
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, is_dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping, Optional

from .filters import CONTROLS
from .harness import ControlCoordinate, ExperimentCoordinate, FullCoordinate, Stats
from .hooks import HookPoint, Location
from .metrics import METRIC_NAMES

REPORT_FORMAT_VERSION = "1"
TABLE_COLUMNS = ["Hook Point", "Layer", "LORA Rank", "Control", "Min", "Mean", "Max", "Stdev"]
SUMMARY_COLUMNS = ["Model", "Training", "Trojan", "Metric"] + TABLE_COLUMNS
METRIC_TITLES = {"exact": "exact_match", "prefix": "prefix_match", "edit": "edit_distance"}
HOOK_BY_LABEL = {h.label: h for h in HookPoint}
CONTROL_BY_LABEL = {c.label: c for c in CONTROLS}


def provenance(config_hash: str, master_seed: int) -> dict:
    return {"config_hash": config_hash, "master_seed": master_seed, "format_version": REPORT_FORMAT_VERSION}


def _comment(prov: dict) -> str:
    return "# trojanfilter " + " ".join(f"{k}={v}" for k, v in prov.items()) + "\n"


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def _table_order(full: FullCoordinate):
    e = full.exp
    return (e.location.layer, e.location.sort_key()[1], e.rank, e.model_id, e.training_id,
            CONTROLS.index(full.ctl.control))


def _row(full: FullCoordinate, s: Stats) -> list[str]:
    e = full.exp
    return [e.location.hook.label, str(e.location.layer), str(e.rank), full.ctl.control.label,
            _fmt(s.min), _fmt(s.mean), _fmt(s.max), _fmt(s.stdev)]


def summary_csv(summaries: Mapping, prov: dict) -> str:
    """Long-format table of every (full coordinate, metric) summary."""
    buf = io.StringIO()
    buf.write(_comment(prov))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    fulls = sorted(summaries, key=lambda f: (f.ctl.trojan, _table_order(f)))
    for metric in METRIC_NAMES:
        for full in fulls:
            e = full.exp
            w.writerow([e.model_id, e.training_id, full.ctl.trojan, metric] + _row(full, summaries[full][metric]))
    return buf.getvalue()


def parse_summary_csv(text: str) -> dict:
    """Inverse of :func:`summary_csv` (values at the 4 decimals written)."""
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    out: dict = {}
    for rec in csv.DictReader(lines):
        exp = ExperimentCoordinate(
            rec["Model"], Location(int(rec["Layer"]), HOOK_BY_LABEL[rec["Hook Point"]]), int(rec["LORA Rank"]),
            rec["Training"],
        )
        full = FullCoordinate(exp, ControlCoordinate(rec["Trojan"], CONTROL_BY_LABEL[rec["Control"]]))
        out.setdefault(full, {})[rec["Metric"]] = Stats(
            float(rec["Min"]), float(rec["Mean"]), float(rec["Max"]), float(rec["Stdev"])
        )
    return out


def trojan_metric_table(summaries: Mapping, trojan: str, metric: str, prov: dict) -> str:
    """One results table: sorted by layer, then hook point, then rank, then control."""
    buf = io.StringIO()
    buf.write(_comment(prov))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for full in sorted((f for f in summaries if f.ctl.trojan == trojan), key=_table_order):
        w.writerow(_row(full, summaries[full][metric]))
    return buf.getvalue()


def _jsonable(obj):
    if is_dataclass(obj):
        return _jsonable(asdict(obj))
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, dict):
        return {str(_jsonable(k)) if not isinstance(k, str) else k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def dumps_json(obj, prov: dict) -> str:
    return json.dumps({"provenance": prov, **_jsonable(obj)}, indent=2, sort_keys=True) + "\n"


def decision_boundary_csv(fractions: Mapping, prov: dict) -> str:
    buf = io.StringIO()
    buf.write(_comment(prov))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "hook_point", "fraction"])
    for t in sorted(fractions):
        bucket = fractions[t]
        if bucket is None:
            w.writerow([_fmt(t), "", ""])
            continue
        for hook in HookPoint:
            if hook in bucket:
                w.writerow([_fmt(t), hook.value, f"{bucket[hook]:.6f}"])
    return buf.getvalue()


def per_layer_csv(per_layer: Mapping[float, float], prov: dict) -> str:
    buf = io.StringIO()
    buf.write(_comment(prov))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer_fraction", "mean"])
    for k in sorted(per_layer):
        w.writerow([f"{k:.6f}", f"{per_layer[k]:.6f}"])
    return buf.getvalue()


def _write(files: Mapping[Path, str]) -> list[Path]:
    for path, text in files.items():
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    return sorted(files)


def write_tables(summaries: Mapping, out_dir: str | Path, prov: dict) -> list[Path]:
    out_dir = Path(out_dir)
    files = {}
    for trojan in sorted({f.ctl.trojan for f in summaries}):
        for metric in METRIC_NAMES:
            files[out_dir / "tables" / f"{trojan}_{METRIC_TITLES[metric]}.csv"] = trojan_metric_table(
                summaries, trojan, metric, prov
            )
    return _write(files)


def write_analysis(analyses: Mapping, out_dir: str | Path, prov: dict) -> list[Path]:
    """``analysis.json`` plus the decision-boundary and per-layer plot series when present."""
    out_dir = Path(out_dir)
    plain = {k: v for k, v in analyses.items() if k not in ("decision_boundary", "per_layer")}
    files = {out_dir / "analysis.json": dumps_json(plain, prov)}
    if analyses.get("decision_boundary") is not None:
        files[out_dir / "plots" / "decision_boundary.csv"] = decision_boundary_csv(analyses["decision_boundary"], prov)
    if analyses.get("per_layer") is not None:
        files[out_dir / "plots" / "per_layer.csv"] = per_layer_csv(analyses["per_layer"], prov)
    return _write(files)


def emit_report(summaries: Mapping, analyses: Optional[Mapping], out_dir: str | Path,
                config_hash: str, master_seed: int) -> list[Path]:
    """Write the summary and per-(trojan, metric) tables, plus analysis and plot files if given.

    Returns the written paths, sorted.
    """
    if not summaries:
        raise ValueError("no summaries to report")
    out_dir = Path(out_dir)
    prov = provenance(config_hash, master_seed)
    paths = _write({out_dir / "summary.csv": summary_csv(summaries, prov)})
    paths += write_tables(summaries, out_dir, prov)
    if analyses:
        paths += write_analysis(analyses, out_dir, prov)
    return sorted(paths)
