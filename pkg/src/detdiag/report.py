"""JSON / CSV / SVG report rendering and staged writes."""
from __future__ import annotations

import csv
import io
import json
import os
import re
import shutil
import tempfile
from pathlib import Path
from typing import Dict, List, Mapping, Optional

from detdiag import __version__
from detdiag.diagnosis import ERROR_TYPES, ORACLES, SUB_ORACLES, DiagnosisEntry, DiagnosisReport
from detdiag.metrics import TP_METRICS, EvalReport, PRCurve
from detdiag.plotting import render_error_chart, render_pr

SCHEMA_VERSION = 1
TOOL = "detdiag"
REDUCED_TP_NOTE = "TP metrics: translation, scale, orientation only"


def _curve_dict(curve: Optional[PRCurve]) -> Optional[dict]:
    if curve is None:
        return None
    return {
        "n_gt": curve.n_gt,
        "confidence": [p.confidence for p in curve.points],
        "precision": [p.precision for p in curve.points],
        "recall": [p.recall for p in curve.points],
    }


def _profile_dict(profile) -> dict:
    return {
        "name": profile.name,
        "metric_family": profile.metric_family,
        "thresholds": list(profile.thresholds),
        "tiers": list(profile.tiers),
        "ap_style": profile.ap_style,
        "tf": profile.tf,
        "tp_threshold": profile.tp_threshold,
    }


def _notes(nds_metrics) -> List[str]:
    if nds_metrics and set(nds_metrics) == {"ATE", "ASE", "AOE"}:
        return [REDUCED_TP_NOTE]
    return []


def eval_to_dict(report: EvalReport) -> dict:
    out = {
        "kind": "eval",
        "profile": _profile_dict(report.profile),
        "classes": list(report.classes),
        "tiers": list(report.tiers),
        "ap": [{"class": e.class_name, "threshold": e.threshold, "tier": e.tier, "ap": e.ap,
                "n_gt": e.n_gt, "n_det": e.n_det} for e in report.ap],
        "map": [{"threshold": m.threshold, "tier": m.tier, "value": m.value} for m in report.mean_ap],
        "headline_map": report.headline_map,
    }
    if report.profile.tp_threshold is not None:
        out["tp_metrics"] = {
            "threshold": report.profile.tp_threshold,
            "available": {k: report.tp_available.get(k, False) for k in TP_METRICS},
            "mean": {k: report.mtp.get(k) for k in TP_METRICS},
            "per_class": {c: {k: report.tp_per_class[c].get(k) for k in TP_METRICS}
                          for c in report.classes},
        }
        out["nds"] = report.nds
        out["nds_metrics"] = list(report.nds_metrics)
        out["notes"] = _notes(report.nds_metrics)
    return out


def _entry_dict(e: DiagnosisEntry, with_curves: bool = True) -> dict:
    d = {
        "class": e.class_name,
        "threshold": e.threshold,
        "tier": e.tier,
        "baseline_ap": e.baseline_ap,
        "delta_ap": {o: e.delta_ap[o] for o in ORACLES},
        "sub_delta_ap": {s: e.sub_delta_ap[s] for s in SUB_ORACLES},
        "counts": {t: e.counts[t] for t in ERROR_TYPES},
    }
    if with_curves and e.pr_before is not None:
        d["ranking_pr"] = {"before": _curve_dict(e.pr_before), "after": _curve_dict(e.pr_after)}
    return d


def diagnosis_to_dict(report: DiagnosisReport) -> dict:
    out = {
        "kind": "diagnosis",
        "profile": report.profile,
        "metric_family": report.metric_family,
        "ap_style": report.ap_style,
        "tf": report.t_f,
        "classes": list(report.classes),
        "tiers": list(report.tiers),
        "thresholds": list(report.thresholds),
        "entries": [_entry_dict(e) for e in report.entries],
    }
    if report.aggregate is not None:
        out["aggregate"] = _entry_dict(report.aggregate, with_curves=False)
        out["baseline_nds"] = report.baseline_nds
        out["delta_nds"] = None if report.delta_nds is None else {o: report.delta_nds[o] for o in ORACLES}
        out["nds_metrics"] = list(report.nds_metrics)
        out["notes"] = _notes(report.nds_metrics)
    return out


def envelope(command: str, config: Mapping, body: dict) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "tool": {"name": TOOL, "version": __version__},
        "command": command,
        "config": dict(config),
        "result": body,
    }


def dumps(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=False, allow_nan=False) + "\n"


# --------------------------------------------------------------------------
# CSV

CSV_HEADER = ("class", "threshold", "tier", "metric", "value")


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def eval_rows(report: EvalReport) -> List[tuple]:
    rows = [(e.class_name, e.threshold, e.tier, "ap", e.ap) for e in report.ap]
    rows += [("all", m.threshold, m.tier, "map", m.value) for m in report.mean_ap]
    if report.profile.tp_threshold is not None:
        t = report.profile.tp_threshold
        for c in report.classes:
            for k in TP_METRICS:
                rows.append((c, t, "all", k, report.tp_per_class[c].get(k)))
        for k in TP_METRICS:
            rows.append(("all", t, "all", k, report.mtp.get(k)))
        rows.append(("all", None, "all", "nds", report.nds))
    return rows


def _entry_rows(e: DiagnosisEntry) -> List[tuple]:
    rows = [(e.class_name, e.threshold, e.tier, "baseline_ap", e.baseline_ap)]
    rows += [(e.class_name, e.threshold, e.tier, f"delta_ap:{o}", e.delta_ap[o]) for o in ORACLES]
    rows += [(e.class_name, e.threshold, e.tier, f"sub_delta_ap:{s}", e.sub_delta_ap[s]) for s in SUB_ORACLES]
    rows += [(e.class_name, e.threshold, e.tier, f"count:{t}", e.counts[t]) for t in ERROR_TYPES]
    return rows


def diagnosis_rows(report: DiagnosisReport) -> List[tuple]:
    rows = [r for e in report.entries for r in _entry_rows(e)]
    if report.aggregate is not None:
        rows += _entry_rows(report.aggregate)
        a = report.aggregate
        rows.append(("all", None, a.tier, "baseline_nds", report.baseline_nds))
        if report.delta_nds is not None:
            rows += [("all", None, a.tier, f"delta_nds:{o}", report.delta_nds[o]) for o in ORACLES]
    return rows


def to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


# --------------------------------------------------------------------------
# SVG

def _slug(*parts) -> str:
    text = "_".join("" if p is None else (f"{p:g}" if isinstance(p, float) else str(p)) for p in parts)
    return re.sub(r"[^A-Za-z0-9.+-]+", "-", text).strip("-")


def eval_figures(report: EvalReport) -> Dict[str, str]:
    return {f"pr_{_slug(c, t, tier)}.svg": render_pr(curve, title=f"{c} @ {t:g} ({tier})")
            for (c, t, tier), curve in report.curves.items()}


def diagnosis_figures(report: DiagnosisReport) -> Dict[str, str]:
    out = {}
    for e in report.entries:
        key = _slug(e.class_name, e.threshold, e.tier)
        out[f"errors_{key}.svg"] = render_error_chart(e)
        if e.pr_before is not None:
            out[f"ranking_pr_{key}.svg"] = render_pr(
                e.pr_before, e.pr_after, title=f"{e.class_name} @ {e.threshold:g}: ranking oracle")
    if report.aggregate is not None:
        out["errors_all.svg"] = render_error_chart(report.aggregate, title="all categories")
    return out


# --------------------------------------------------------------------------
# Writing

def write_outputs(out_dir, files: Mapping[str, str]) -> List[Path]:
    """Write every file or none: stage in a temp dir, then move into place.

    If anything fails, files already moved are removed again.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".detdiag-", dir=out_dir))
    placed: List[Path] = []
    try:
        for name, text in files.items():
            target = stage / name
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(text, encoding="utf-8")
        for name in files:
            final = out_dir / name
            final.parent.mkdir(parents=True, exist_ok=True)
            os.replace(stage / name, final)
            placed.append(final)
    except BaseException:
        for p in placed:
            p.unlink(missing_ok=True)
        raise
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    return placed
