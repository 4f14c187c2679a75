"""Run directories, report tables and interval charts."""

from __future__ import annotations

import csv
import io
import json
import platform
from pathlib import Path
from typing import Any

import numpy as np
import scipy

from . import __version__
from . import conjoint as cj
from . import pipeline as pl
from . import regional as rg
from . import storage
from .config import RunConfig

REGIONWISE_COLUMNS = (("ID-human", "id_human"), ("OOD-human", "ood_human"), ("integrated", "integrated"),
                      ("mixture", "mixture"), ("national", "national"))
TIMEWISE_COLUMNS = (("human-observed", "human_observed"), ("full-experiment", "injected"), ("agent", "agent"),
                    ("integrated", "integrated"), ("mixture", "mixture"))
ROWS = (("effect_bps", "beta3_bps"), ("se_bps", "se_bps"), ("ci_low_bps", "ci_low_bps"),
        ("ci_high_bps", "ci_high_bps"), ("p_value", "p"))


def run_dir_for(cfg: RunConfig, out: str | Path | None = None) -> Path:
    return Path(out or cfg.output_dir) / f"{cfg.scenario}-{cfg.config_hash()}"


def dump_json(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n", encoding="utf-8")


def manifest(cfg: RunConfig) -> dict[str, Any]:
    return {
        "config_hash": cfg.config_hash(), "seed": cfg.seed, "scenario": cfg.scenario,
        "versions": {"aem": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__},
    }


def _fmt(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}" if abs(v) < 1e-3 and v != 0 else f"{v:.4f}"
    return str(v)


def _table(header: list[str], rows: list[list[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def effect_table(report: dict[str, Any]) -> str:
    """Estimates in basis points, one column per method (blank when a method was not run)."""
    cols = REGIONWISE_COLUMNS if report["scenario"] == "regional-regionwise" else TIMEWISE_COLUMNS
    eff = report["effects"]
    rows = [[label] + [eff.get(key, {}).get(field) for _, key in cols] for label, field in ROWS]
    return _table(["statistic"] + [c for c, _ in cols], rows)


def mape_table(report: dict[str, Any]) -> str:
    rows = [[m, report["mape"][m], report["bias_reduction"].get(m)] for m in sorted(report["mape"])]
    return _table(["method", "mape", "bias_reduction"], rows)


def bootstrap_table(record: dict[str, Any]) -> str:
    e = record["estimate"]
    rows = [[i, v] for i, v in enumerate(record["replicas_bps"])]
    rows.append(["mean", e["beta3_bps"]])
    rows.append(["ci_low", e["ci_low_bps"]])
    rows.append(["ci_high", e["ci_high_bps"]])
    return _table(["replica", "effect_bps"], rows)


def interval_svg(items: list[tuple[str, float, float | None, float | None]], title: str = "") -> str:
    """Horizontal point-and-interval chart, one row per (label, estimate, low, high)."""
    width, row_h, left, right, top = 560, 28, 130, 30, 36
    height = top + row_h * len(items) + 30
    vals = [v for _, e, lo, hi in items for v in (e, lo, hi) if v is not None] + [0.0]
    lo_v, hi_v = min(vals), max(vals)
    pad = 0.05 * (hi_v - lo_v or 1.0)
    lo_v, hi_v = lo_v - pad, hi_v + pad

    def x(v: float) -> float:
        return left + (v - lo_v) / (hi_v - lo_v) * (width - left - right)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle">{title}</text>',
           f'<line x1="{x(0):.1f}" y1="{top - 8}" x2="{x(0):.1f}" y2="{height - 26}" stroke="#999" stroke-dasharray="3,3"/>']
    for i, (label, est, low, high) in enumerate(items):
        y = top + row_h * i + row_h / 2
        out.append(f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end">{label}</text>')
        if low is not None and high is not None:
            out.append(f'<line x1="{x(low):.1f}" y1="{y:.1f}" x2="{x(high):.1f}" y2="{y:.1f}" stroke="#333" stroke-width="2"/>')
        out.append(f'<circle cx="{x(est):.1f}" cy="{y:.1f}" r="4" fill="#1f5fa8"/>')
    for v in np.linspace(lo_v, hi_v, 5):
        out.append(f'<text x="{x(v):.1f}" y="{height - 8}" text-anchor="middle">{v:.0f}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_tables(run_dir: Path, report: dict[str, Any], svg: bool = True) -> list[Path]:
    """Render CSV tables (and SVG charts) for a report into ``run_dir/tables``."""
    tdir = run_dir / "tables"
    tdir.mkdir(parents=True, exist_ok=True)
    written = []
    if report["scenario"] == "conjoint":
        p = tdir / "mape.csv"
        p.write_text(mape_table(report), encoding="utf-8")
        written.append(p)
        items = [(m, 100 * v, None, None) for m, v in sorted(report["bias_reduction"].items())]
        title = "bias reduction vs primary-only (percentage points)"
    else:
        name = "region_wise_results.csv" if report["scenario"] == "regional-regionwise" else "treatment_effects.csv"
        p = tdir / name
        p.write_text(effect_table(report), encoding="utf-8")
        written.append(p)
        cols = REGIONWISE_COLUMNS if report["scenario"] == "regional-regionwise" else TIMEWISE_COLUMNS
        eff = report["effects"]
        items = [(label, eff[k]["beta3_bps"], eff[k]["ci_low_bps"], eff[k]["ci_high_bps"]) for label, k in cols if k in eff]
        title = "DiD effect (bps)"
    if "bootstrap" in report:
        p = tdir / "bootstrap.csv"
        p.write_text(bootstrap_table(report["bootstrap"]), encoding="utf-8")
        written.append(p)
        e = report["bootstrap"]["estimate"]
        items.append(("bootstrap", e["beta3_bps"], e["ci_low_bps"], e["ci_high_bps"]))
    if svg and items:
        p = tdir / "effects.svg"
        p.write_text(interval_svg(items, title), encoding="utf-8")
        written.append(p)
    return written


def write_run(run_dir: Path, cfg: RunConfig, report: dict[str, Any], artifacts: dict[str, Any]) -> Path:
    """Persist config echo, manifest, report, tables and the artifacts needed to redo inference."""
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.canonical_json() + "\n", encoding="utf-8")
    dump_json(run_dir / "manifest.json", manifest(cfg))
    if cfg.scenario == "conjoint":
        storage.write_conjoint(run_dir / "data" / "conjoint.csv", artifacts["dataset"])
        (run_dir / "models").mkdir(exist_ok=True)
        (run_dir / "models" / "logistic.json").write_text(artifacts["model"].to_json() + "\n", encoding="utf-8")
    elif "shares" in artifacts:
        for name, table in artifacts["shares"].items():
            storage.write_shares(run_dir / "data" / f"{name.replace(':', '_')}_shares.csv", table, artifacts["arms"], label=name)
        dump_json(run_dir / "data" / "targets.json", {"targets": artifacts["targets"], "split": artifacts["split_summary"],
                                                      "share_tables": sorted(artifacts["shares"])})
        dump_json(run_dir / "data" / "correction.json", artifacts["training"])
        (run_dir / "models").mkdir(exist_ok=True)
        for kind, fit in artifacts["fits"].items():
            text = rg.model_to_json(kind, fit.result.params, fit.encoder,
                                    {"best_epoch": fit.result.best_epoch, "epochs_run": len(fit.result.train_curve)})
            (run_dir / "models" / f"{kind}.json").write_text(text + "\n", encoding="utf-8")
    dump_json(run_dir / "report.json", report)
    write_tables(run_dir, report)
    return run_dir


def load_run_config(run_dir: Path) -> RunConfig:
    return RunConfig.model_validate_json((run_dir / "config.json").read_text(encoding="utf-8"))


def load_report(run_dir: Path) -> dict[str, Any]:
    return json.loads((run_dir / "report.json").read_text(encoding="utf-8"))


def reinfer_run(run_dir: Path) -> dict[str, Any]:
    """Rebuild a run's report from its persisted data and correction outputs only."""
    cfg = load_run_config(run_dir)
    if cfg.scenario == "conjoint":
        data = storage.read_conjoint(run_dir / "data" / "conjoint.csv")
        model = cj.CorrectionModel.from_json((run_dir / "models" / "logistic.json").read_text(encoding="utf-8"))
        return pl.conjoint_report(cfg, data, model)[0]
    meta = json.loads((run_dir / "data" / "targets.json").read_text(encoding="utf-8"))
    training = json.loads((run_dir / "data" / "correction.json").read_text(encoding="utf-8"))
    shares = {}
    arms: dict[str, str] = {}
    for name in meta["share_tables"]:
        table, a = storage.read_shares(run_dir / "data" / f"{name.replace(':', '_')}_shares.csv")
        shares[name] = table
        arms.update(a)
    return pl.regional_report(cfg, shares, arms, meta["targets"], meta["split"], training)
