import json
import math

import pytest

from detdiag.boxgeom import Box3D
from detdiag.dataset_io import (
    CANONICAL, EASY, IGNORED, MODERATE, DatasetError, Detection, Frame, FrameSet, GroundTruth,
    KittiObject, ParseError, SchemaError, SerializationError, assign_difficulty, camera_to_canonical,
    canonical_to_camera, from_canonical, frameset_to_dict, load_canonical_json, load_kitti_dirs,
    parse_kitti_labels, qualifies, save_canonical_json, serialize_kitti, to_canonical,
)

CAR_LINE = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59"
DONTCARE_LINE = "DontCare -1 -1 -10 100 100 200 200 -1 -1 -1 -1000 -1000 -1000 -10"


def test_parse_car_line():
    (obj,) = parse_kitti_labels(CAR_LINE)
    assert obj.type == "Car"
    assert obj.truncated == 0.0 and obj.occluded == 0
    assert obj.dimensions == (1.65, 1.67, 3.64)
    assert obj.location == (-0.65, 1.71, 46.70)
    assert obj.rotation_y == -1.59
    assert obj.score is None


def test_parse_empty():
    assert parse_kitti_labels("") == []
    assert serialize_kitti([]) == ""


def test_dontcare_becomes_ignored_region():
    (obj,) = parse_kitti_labels(DONTCARE_LINE)
    gt = to_canonical(obj)
    assert gt.ignore and gt.box is None
    assert gt.bbox2d == (100.0, 100.0, 200.0, 200.0)


def test_parse_errors_carry_line_numbers():
    with pytest.raises(ParseError) as info:
        parse_kitti_labels(CAR_LINE + "\nCar 0 0 1 2 3\n", source="x.txt")
    assert info.value.line == 2
    with pytest.raises(ParseError):
        parse_kitti_labels(CAR_LINE.replace("46.70", "abc"))
    with pytest.raises(ParseError):
        parse_kitti_labels(CAR_LINE.replace("46.70", "nan"))
    with pytest.raises(ParseError):
        parse_kitti_labels(CAR_LINE, has_score=True)


def test_serialize_round_trip():
    assert serialize_kitti(parse_kitti_labels(CAR_LINE)) == CAR_LINE + "\n"
    scored = CAR_LINE + " 0.87"
    assert serialize_kitti(parse_kitti_labels(scored, has_score=True)) == scored + "\n"


def test_serialize_needs_bbox():
    gt = GroundTruth(Box3D(10, 0, 0.8, 4, 2, 1.6), "Car")
    with pytest.raises(SerializationError):
        from_canonical(gt)
    with pytest.raises(SerializationError):
        serialize_kitti([KittiObject("Car", 0, 0, 0, None, (1, 1, 1), (0, 0, 0), 0)])


def test_camera_mapping():
    center, yaw = camera_to_canonical((0.0, 1.65, 10.0), 1.65, 0.0)
    assert center == pytest.approx((10.0, 0.0, -0.825))
    assert yaw == pytest.approx(-math.pi / 2)
    loc, ry = canonical_to_camera(center, 1.65, yaw)
    assert loc == pytest.approx((0.0, 1.65, 10.0))
    assert ry == pytest.approx(0.0)


def test_canonical_passthrough():
    gt = GroundTruth(Box3D(1, 2, 3, 4, 2, 1), "Car")
    assert to_canonical(gt, CANONICAL) is gt


def test_to_from_canonical_identity():
    (obj,) = parse_kitti_labels(CAR_LINE)
    assert from_canonical(to_canonical(obj)) == obj


def _gt(height, occ, trunc):
    return GroundTruth(Box3D(0, 0, 0, 1, 1, 1), "Car", truncation=trunc, occlusion=occ,
                       bbox2d=(0.0, 100.0, 50.0, 100.0 + height))


def test_difficulty_tiers():
    assert assign_difficulty(_gt(50, 0, 0.0)) == EASY
    assert assign_difficulty(_gt(30, 1, 0.2)) == MODERATE
    assert assign_difficulty(_gt(20, 2, 0.4)) == IGNORED
    easy = _gt(50, 0, 0.0)
    assert qualifies(easy, "moderate") and qualifies(easy, "hard")
    assert not qualifies(GroundTruth(Box3D(0, 0, 0, 1, 1, 1), "Car"), EASY)


def test_record_validation():
    with pytest.raises(DatasetError):
        Detection(Box3D(0, 0, 0, 1, 1, 1), "Car", 1.2)
    with pytest.raises(DatasetError):
        GroundTruth(None, "Car")
    with pytest.raises(DatasetError):
        FrameSet((Frame("a"), Frame("a")))


MINIMAL = {"frames": [{"id": "0", "gts": [
    {"class": "Car", "box": {"cx": 1, "cy": 2, "cz": 0.5, "l": 4, "w": 2, "h": 1, "yaw": 0}}],
    "dets": []}]}


def test_minimal_document():
    fs = load_canonical_json(json.dumps(MINIMAL))
    assert len(fs.frames) == 1
    assert len(fs.frames[0].gts) == 1 and not fs.frames[0].detections


def test_schema_errors_report_path():
    doc = json.loads(json.dumps(MINIMAL))
    box = dict(MINIMAL["frames"][0]["gts"][0]["box"])
    doc["frames"][0]["dets"] = [{"class": "Car", "box": box, "score": 1.2}]
    with pytest.raises(SchemaError) as info:
        load_canonical_json(json.dumps(doc))
    assert "dets" in info.value.path
    with pytest.raises(SchemaError):
        load_canonical_json("{not json")
    doc["frames"][0]["dets"] = []
    doc["frames"][0]["gts"][0]["box"]["l"] = 0
    with pytest.raises(SchemaError):
        load_canonical_json(json.dumps(doc))


def test_json_round_trip_values():
    fs = FrameSet((Frame("a", (Detection(Box3D(1, 2, 3, 4, 2, 1, 0.3), "Car", 0.5, velocity=(1, 2),
                                         attribute="moving"),),
                         (GroundTruth(Box3D(1, 2, 3, 4, 2, 1, 0.3), "Car", 0.1, 1, (0, 0, 5, 5)),
                          GroundTruth(None, "DontCare", bbox2d=(0, 0, 1, 1), ignore=True))),))
    again = load_canonical_json(save_canonical_json(fs))
    assert again == fs
    assert frameset_to_dict(again) == frameset_to_dict(fs)


def test_kitti_dirs_round_trip(corpus_dirs):
    gt_dir, pred_dir, corpus = corpus_dirs
    fs = load_kitti_dirs(gt_dir, pred_dir)
    assert [f.frame_id for f in fs.frames] == sorted(corpus)
    with pytest.raises(DatasetError):
        load_kitti_dirs(gt_dir / "missing")
