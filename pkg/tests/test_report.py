import csv
import io
import json

import pytest

from detdiag.diagnosis import ORACLES, DiagnosisEntry, diagnose
from detdiag.metrics import evaluate, make_profile, pr_curve_from_flags
from detdiag.plotting import render_error_chart, render_pr
from detdiag.report import (
    CSV_HEADER, diagnosis_rows, diagnosis_to_dict, dumps, eval_rows, eval_to_dict, to_csv,
    write_outputs,
)

NO_SUBS = {"location": 0.0, "dimension": 0.0, "orientation": 0.0}


def entry(deltas, subs=NO_SUBS):
    full = {o: 0.0 for o in ORACLES}
    full.update(deltas)
    return DiagnosisEntry("Car", 0.7, "all", 0.5, full, dict(subs), {})


def test_all_zero_chart_has_placeholder():
    svg = render_error_chart(entry({}))
    assert "no errors" in svg
    assert "wedge-" not in svg


def test_single_sector_pie():
    svg = render_error_chart(entry({"bkg": 0.25}))
    assert svg.count('id="wedge-') == 1 and 'id="wedge-bkg"' in svg
    assert "25.00" in svg


def test_sub_error_bars_in_order():
    svg = render_error_chart(entry({"loc": 0.2}, {"location": 0.065, "dimension": 0.016, "orientation": 0.017}))
    positions = [svg.index(f'id="bar-{s}"') for s in ("location", "dimension", "orientation")]
    assert positions == sorted(positions)
    for label in ("6.50", "1.60", "1.70"):
        assert label in svg


def test_charts_are_deterministic(hand_scene):
    report = diagnose(hand_scene, make_profile("kitti", thresholds=[0.7]))
    e = report.entries[0]
    assert render_error_chart(e) == render_error_chart(e)
    assert render_pr(e.pr_before, e.pr_after) == render_pr(e.pr_before, e.pr_after)


def test_render_pr_variants(hand_scene):
    empty = pr_curve_from_flags([], [], 0)
    svg = render_pr(empty)
    assert svg.startswith("<?xml") and "<svg" in svg
    curve = pr_curve_from_flags([0.9, 0.8], [True, False], 2)
    assert "before" in render_pr(curve, curve)


def test_eval_json_and_csv(hand_scene):
    report = evaluate(hand_scene, make_profile("nuscenes"))
    doc = json.loads(dumps(eval_to_dict(report)))
    assert doc["tp_metrics"]["available"]["AVE"] is False
    assert doc["nds_metrics"] == ["ATE", "ASE", "AOE"]
    assert doc["notes"] == ["TP metrics: translation, scale, orientation only"]
    rows = list(csv.reader(io.StringIO(to_csv(eval_rows(report)))))
    assert tuple(rows[0]) == CSV_HEADER
    assert all(len(r) == 5 for r in rows)
    assert any(r[3] == "nds" for r in rows)


def test_diagnosis_json_labels_every_number(hand_scene):
    report = diagnose(hand_scene, make_profile("kitti"))
    doc = diagnosis_to_dict(report)
    for e in doc["entries"]:
        assert {"class", "threshold", "tier"} <= set(e)
        assert list(e["delta_ap"]) == list(ORACLES)
    rows = diagnosis_rows(report)
    assert {r[3] for r in rows} >= {"baseline_ap", "delta_ap:bkg", "count:miss", "sub_delta_ap:location"}


def test_write_outputs_is_all_or_nothing(tmp_path, monkeypatch):
    out = tmp_path / "out"
    write_outputs(out, {"a.txt": "1", "sub/b.txt": "2"})
    assert (out / "a.txt").read_text() == "1" and (out / "sub" / "b.txt").read_text() == "2"

    import detdiag.report as report_mod

    real = report_mod.os.replace
    calls = []

    def flaky(src, dst):
        calls.append(dst)
        if len(calls) == 2:
            raise OSError("disk full")
        real(src, dst)

    monkeypatch.setattr(report_mod.os, "replace", flaky)
    with pytest.raises(OSError):
        write_outputs(tmp_path / "fail", {"x.txt": "1", "y.txt": "2"})
    assert sorted(p.name for p in (tmp_path / "fail").iterdir()) == []
