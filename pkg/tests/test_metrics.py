import math

import numpy as np
import pytest

from conftest import car
from detdiag.boxgeom import Box3D
from detdiag.dataset_io import Detection, Frame, FrameSet, GroundTruth
from detdiag.metrics import (
    CENTER_DISTANCE, IOU3D, EvaluationError, MatcherConfig, ap40, ap_distance,
    evaluate, make_profile, match_frame, match_frameset, nds, pr_curve, pr_curve_from_flags,
    tp_errors, tp_metric_summary,
)


def test_single_tp():
    gt = GroundTruth(car(0), "Car")
    det = Detection(car(0.3), "Car", 0.9)
    r = match_frame([det], [gt], MatcherConfig(IOU3D, 0.7, "Car"))
    assert (r.n_tp, r.n_fp, r.n_fn) == (1, 0, 0)


def test_duplicate_is_fp():
    gt = GroundTruth(car(0), "Car")
    dets = [Detection(car(0.1), "Car", 0.8), Detection(car(0), "Car", 0.9)]
    r = match_frame(dets, [gt], MatcherConfig(IOU3D, 0.7, "Car"))
    tp = {m.det_index: m.tp for m in r.matches}
    assert tp == {1: True, 0: False}


def test_no_detections():
    r = match_frame([], [GroundTruth(car(0), "Car"), GroundTruth(car(10), "Car")],
                    MatcherConfig(IOU3D, 0.7, "Car"))
    assert (r.n_tp, r.n_fp, r.n_fn) == (0, 0, 2)


def test_ignored_gt_absorbs_detection():
    gts = [GroundTruth(car(0), "Car", ignore=True)]
    r = match_frame([Detection(car(0), "Car", 0.9)], gts, MatcherConfig(IOU3D, 0.7, "Car"))
    assert r.n_tp == 0 and r.n_fp == 0 and r.n_gt == 0


def test_class_filter():
    r = match_frame([Detection(car(0), "Cyclist", 0.9)], [GroundTruth(car(0), "Car")],
                    MatcherConfig(IOU3D, 0.7, "Car"))
    assert r.n_fp == 0 and r.n_fn == 1


def test_center_distance_matching():
    gt = GroundTruth(car(0), "Car")
    near = Detection(car(0.9), "Car", 0.5)
    far = Detection(car(1.1), "Car", 0.9)
    r = match_frame([far, near], [gt], MatcherConfig(CENTER_DISTANCE, 1.0, "Car"))
    assert {m.det_index: m.tp for m in r.matches} == {0: False, 1: True}


def test_hand_pr_curve(hand_scene):
    curve = pr_curve(match_frameset(hand_scene, MatcherConfig(IOU3D, 0.7, "Car")))
    assert list(curve.precisions) == pytest.approx([1.0, 0.5, 2 / 3])
    assert list(curve.recalls) == pytest.approx([0.5, 0.5, 1.0])
    assert ap40(curve) == pytest.approx(5 / 6, abs=1e-12)


def test_all_tp_curve():
    curve = pr_curve_from_flags([0.9, 0.8, 0.7], [True] * 3, 3)
    assert set(curve.precisions) == {1.0}
    assert ap40(curve) == 1.0
    assert ap_distance(curve) == pytest.approx(1.0)


def test_empty_curve():
    curve = pr_curve_from_flags([], [], 2)
    assert len(curve) == 0
    assert ap40(curve) == 0.0 and ap_distance(curve) == 0.0


def test_distance_ap_single_tp_of_two():
    # p = 1 up to recall 0.5; area above the floors is 0.4 * 0.9, normalized by 0.9 * 0.9.
    assert ap_distance(pr_curve_from_flags([0.9], [True], 2)) == pytest.approx(4 / 9, abs=1e-12)


def test_distance_ap_at_precision_floor():
    # One TP among ten detections reaching full recall: precision 0.1 everywhere it matters.
    flags = [False] * 9 + [True]
    assert ap_distance(pr_curve_from_flags(list(np.linspace(1, 0.1, 10)), flags, 1)) == 0.0


def test_ap40_grid_uses_counts():
    # 3 GTs: recall 1/3 and 2/3 never land on a grid point, 3/3 does.
    curve = pr_curve_from_flags([0.9, 0.8, 0.7, 0.6], [True, False, True, True], 3)
    expected = (13 * 1.0 + 27 * 0.75) / 40
    assert ap40(curve) == pytest.approx(expected, abs=1e-12)


def test_nds_examples():
    zeros = dict.fromkeys(("ATE", "ASE", "AOE", "AVE", "AAE"), 0.0)
    assert nds(1.0, zeros) == 1.0
    assert nds(0.4, dict.fromkeys(zeros, 0.5)) == pytest.approx(0.45)
    assert nds(0.0, dict(zeros, ATE=3.0)) == pytest.approx(0.5 * 4 / 5)
    with pytest.raises(EvaluationError):
        nds(1.0, {"AHE": 0.0})
    with pytest.raises(EvaluationError):
        nds(1.2, zeros)


def test_tp_errors():
    a = Detection(Box3D(0, 0, 0, 4, 2, 1.5, 0.0), "Car", 1.0, (1, 1), "moving")
    g = GroundTruth(Box3D(0, 0, 0, 4, 2, 1.5, 0.0), "Car", velocity=(1, 1), attribute="moving")
    s = tp_errors([(a, g)])
    assert all(v == [0.0] for v in s.samples.values())
    flipped = Detection(Box3D(0, 0, 0, 4, 2, 1.5, math.pi), "Car", 1.0)
    s = tp_errors([(flipped, g)])
    assert s.samples["AOE"] == [pytest.approx(math.pi)]
    assert not s.available["AVE"] and not s.available["AAE"]


def test_tp_summary_no_matches_scores_one():
    fs = FrameSet((Frame("a", (Detection(car(50), "Car", 0.5),), (GroundTruth(car(0), "Car"),)),))
    per_class, mean, available = tp_metric_summary(fs, ["Car"], 2.0)
    assert mean["ATE"] == 1.0 and mean["AVE"] is None and not available["AVE"]


def test_perfect_evaluation_both_profiles():
    gts = tuple(GroundTruth(car(20 * k), "Car", velocity=(1, 0), attribute="moving") for k in range(3))
    dets = tuple(Detection(g.box, g.class_name, 1.0, g.velocity, g.attribute) for g in gts)
    fs = FrameSet((Frame("a", dets, gts),))
    k = evaluate(fs, make_profile("kitti"))
    assert {e.ap for e in k.ap} == {1.0}
    assert k.tiers == ("all",)
    n = evaluate(fs, make_profile("nuscenes"))
    assert n.headline_map == 1.0 and n.nds == 1.0
    assert n.nds_metrics == ("ATE", "ASE", "AOE", "AVE", "AAE")


def test_nuscenes_map_is_mean_over_thresholds(monkeypatch):
    # Four distance thresholds with per-threshold APs 0.2 .. 0.8 average to 0.5.
    import detdiag.metrics as m

    values = iter([0.2, 0.4, 0.6, 0.8])
    monkeypatch.setattr(m, "average_precision", lambda curve, style: next(values))
    fs = FrameSet((Frame("a", (), (GroundTruth(car(0), "Car"),)),))
    report = m.evaluate(fs, m.make_profile("nuscenes"))
    assert report.headline_map == pytest.approx(0.5)


def test_empty_class_set():
    with pytest.raises(EvaluationError):
        evaluate(FrameSet((Frame("a"),)), make_profile("kitti"))


def test_bad_thresholds():
    with pytest.raises(EvaluationError):
        make_profile("kitti", thresholds=[1.5])
    with pytest.raises(EvaluationError):
        make_profile("nuscenes", thresholds=[-1.0])
    with pytest.raises(EvaluationError):
        make_profile("waymo")


def test_ap40_half_recall():
    assert ap40(pr_curve_from_flags([0.9], [True], 2)) == pytest.approx(0.5)
