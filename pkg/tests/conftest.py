import math

import numpy as np
import pytest

from detdiag.boxgeom import Box3D
from detdiag.dataset_io import Detection, Frame, FrameSet, GroundTruth


def car(x, y=0.0, yaw=0.0):
    return Box3D(x, y, 0.75, 4.0, 2.0, 1.5, yaw)


@pytest.fixture
def hand_scene():
    """Two Car GTs; detections TP(0.9), background FP(0.8), TP(0.7)."""
    gts = (GroundTruth(car(0.0), "Car"), GroundTruth(car(20.0), "Car"))
    dets = (
        Detection(car(0.0), "Car", 0.9),
        Detection(car(-30.0, 10.0), "Car", 0.8),
        Detection(car(20.0), "Car", 0.7),
    )
    return FrameSet((Frame("000000", dets, gts),))


def kitti_line(rng, with_score=False):
    """One devkit-formatted label line with two-decimal fields."""
    def f2(lo, hi):
        return f"{rng.integers(int(lo * 100), int(hi * 100) + 1) / 100:.2f}"

    if rng.random() < 0.1:
        x1, y1 = rng.integers(0, 1100), rng.integers(0, 300)
        line = (f"DontCare -1 -1 -10 {x1:.2f} {y1:.2f} {x1 + rng.integers(5, 100):.2f} "
                f"{y1 + rng.integers(5, 60):.2f} -1 -1 -1 -1000 -1000 -1000 -10")
        return None if with_score else line
    kind = ("Car", "Pedestrian", "Cyclist", "Van")[int(rng.integers(4))]
    x1, y1 = rng.integers(0, 1100), rng.integers(100, 300)
    fields = [
        kind, f2(0, 1) if not with_score else "-1.00", str(int(rng.integers(0, 4))) if not with_score else "-1",
        f2(-3.14, 3.14),
        f"{x1:.2f}", f"{y1:.2f}", f"{x1 + rng.integers(10, 200):.2f}", f"{y1 + rng.integers(10, 120):.2f}",
        f2(1.2, 2.2), f2(0.5, 2.0), f2(0.5, 5.0),
        f2(-20, 20), f2(0.5, 2.5), f2(2, 70),
        f2(-3.14, 3.14),
    ]
    if with_score:
        fields.append(f"{rng.integers(1, 100) / 100:.2f}")
    return " ".join(fields)


def kitti_corpus(n_files=100, seed=0):
    """{stem: (label_text, result_text)} with a few empty files."""
    rng = np.random.default_rng(seed)
    out = {}
    for k in range(n_files):
        n = int(rng.integers(0, 9))
        labels = [kitti_line(rng) for _ in range(n)]
        preds = [p for p in (kitti_line(rng, True) for _ in range(int(rng.integers(0, 9)))) if p]
        out[f"{k:06d}"] = ("".join(l + "\n" for l in labels), "".join(p + "\n" for p in preds))
    return out


@pytest.fixture
def corpus_dirs(tmp_path):
    corpus = kitti_corpus()
    gt_dir, pred_dir = tmp_path / "label_2", tmp_path / "pred"
    gt_dir.mkdir()
    pred_dir.mkdir()
    for stem, (labels, preds) in corpus.items():
        (gt_dir / f"{stem}.txt").write_text(labels)
        (pred_dir / f"{stem}.txt").write_text(preds)
    return gt_dir, pred_dir, corpus


HALF_PI = 0.5 * math.pi


# Acceptance summary: one PASS/FAIL line per numbered criterion.
_ACCEPTANCE = {}



def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    number, title = marker
    # Skips count as failures: an unrun criterion is not a met one.
    ok = report.outcome == "passed"
    prev = _ACCEPTANCE.get(number, (title, True))
    _ACCEPTANCE[number] = (title, prev[1] and ok)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        report.criterion = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, ok = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}")
