"""Ground-truth / detection records, KITTI label files and the canonical JSON schema.

Everything past ingestion lives in the canonical frame: z up, the ground plane
is xy, and a box is located by its geometric center. KITTI camera-frame labels
(x right, y down, z forward, location at the bottom-face center) are converted
on the way in and back on the way out.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import jsonschema

from detdiag.boxgeom import Box3D, InvalidBoxError, normalize_angle

KITTI_CAMERA = "kitti_camera"
CANONICAL = "canonical"
CONVENTIONS = (KITTI_CAMERA, CANONICAL)

EASY, MODERATE, HARD, IGNORED = "easy", "moderate", "hard", "ignored"
TIERS = (EASY, MODERATE, HARD)
ALL_TIER = "all"

# KITTI devkit tier limits: (min 2D box height px, max occlusion, max truncation).
DIFFICULTY_LIMITS = {
    EASY: (40.0, 0, 0.15),
    MODERATE: (25.0, 1, 0.30),
    HARD: (25.0, 2, 0.50),
}

DONTCARE = "DontCare"

BBox2D = Tuple[float, float, float, float]
Velocity = Tuple[float, float]


class DatasetError(ValueError):
    pass


class ParseError(DatasetError):
    def __init__(self, message: str, line: Optional[int] = None, source: Optional[str] = None):
        self.line = line
        self.source = source
        where = ""
        if source:
            where += f"{source}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class SchemaError(DatasetError):
    def __init__(self, message: str, path: str = "$"):
        self.path = path
        super().__init__(f"{path}: {message}")


class SerializationError(DatasetError):
    pass


def _check_bbox2d(bbox2d):
    if bbox2d is None:
        return None
    left, top, right, bottom = (float(v) for v in bbox2d)
    if not (left < right and top < bottom):
        raise DatasetError(f"bbox2d must satisfy left < right and top < bottom, got {bbox2d}")
    return (left, top, right, bottom)


@dataclass(frozen=True)
class GroundTruth:
    box: Optional[Box3D]
    class_name: str
    truncation: Optional[float] = None
    occlusion: Optional[int] = None
    bbox2d: Optional[BBox2D] = None
    velocity: Optional[Velocity] = None
    attribute: Optional[str] = None
    ignore: bool = False
    # KITTI observation angle, carried only so label files round-trip.
    alpha: Optional[float] = None

    def __post_init__(self):
        if self.box is None and not self.ignore:
            raise DatasetError("a ground truth without a 3D box must be flagged ignore")
        if self.truncation is not None and not 0.0 <= self.truncation <= 1.0:
            raise DatasetError(f"truncation must lie in [0, 1], got {self.truncation}")
        if self.occlusion is not None and self.occlusion not in (0, 1, 2, 3):
            raise DatasetError(f"occlusion must be one of 0..3, got {self.occlusion}")
        object.__setattr__(self, "bbox2d", _check_bbox2d(self.bbox2d))
        if self.velocity is not None:
            object.__setattr__(self, "velocity", tuple(float(v) for v in self.velocity))


@dataclass(frozen=True)
class Detection:
    box: Box3D
    class_name: str
    score: float
    velocity: Optional[Velocity] = None
    attribute: Optional[str] = None
    bbox2d: Optional[BBox2D] = None
    alpha: Optional[float] = None

    def __post_init__(self):
        if not (isinstance(self.score, (int, float)) and math.isfinite(self.score)
                and 0.0 <= self.score <= 1.0):
            raise DatasetError(f"score must be a finite number in [0, 1], got {self.score!r}")
        object.__setattr__(self, "score", float(self.score))
        object.__setattr__(self, "bbox2d", _check_bbox2d(self.bbox2d))
        if self.velocity is not None:
            object.__setattr__(self, "velocity", tuple(float(v) for v in self.velocity))


@dataclass(frozen=True)
class Frame:
    frame_id: str
    detections: Tuple[Detection, ...] = ()
    gts: Tuple[GroundTruth, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))
        object.__setattr__(self, "gts", tuple(self.gts))


@dataclass(frozen=True)
class FrameSet:
    frames: Tuple[Frame, ...] = ()
    source_convention: str = CANONICAL

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if self.source_convention not in CONVENTIONS:
            raise DatasetError(f"unknown convention {self.source_convention!r}")
        seen = set()
        for frame in self.frames:
            if frame.frame_id in seen:
                raise DatasetError(f"duplicate frame id {frame.frame_id!r}")
            seen.add(frame.frame_id)

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def classes(self) -> List[str]:
        """Sorted class names of the non-ignored ground truths."""
        return sorted({g.class_name for f in self.frames for g in f.gts
                       if not g.ignore and g.box is not None})

    def with_frames(self, frames: Iterable[Frame]) -> "FrameSet":
        return FrameSet(tuple(frames), self.source_convention)


# --------------------------------------------------------------------------
# KITTI devkit label files

@dataclass(frozen=True)
class KittiObject:
    """One line of a KITTI label file, in the devkit's own camera frame."""
    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox: BBox2D
    dimensions: Tuple[float, float, float]  # h, w, l
    location: Tuple[float, float, float]  # x, y, z of the bottom-face center
    rotation_y: float
    score: Optional[float] = None

    @property
    def is_dontcare(self) -> bool:
        return self.type == DONTCARE


def _parse_number(token: str, lineno: int, column: str, source=None) -> float:
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"cannot parse {column} from {token!r}", lineno, source) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite {column} {token!r}", lineno, source)
    return value


def parse_kitti_labels(text: str, has_score: bool = False, source: Optional[str] = None) -> List[KittiObject]:
    """Parse the contents of one KITTI label (or result) file."""
    expected = 16 if has_score else 15
    objects = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != expected:
            raise ParseError(f"expected {expected} fields, found {len(tokens)}", lineno, source)
        nums = [_parse_number(t, lineno, f"column {i + 2}", source) for i, t in enumerate(tokens[1:])]
        occluded = nums[1]
        if occluded != int(occluded):
            raise ParseError(f"occlusion must be an integer, got {tokens[2]!r}", lineno, source)
        objects.append(KittiObject(
            type=tokens[0],
            truncated=nums[0],
            occluded=int(occluded),
            alpha=nums[2],
            bbox=(nums[3], nums[4], nums[5], nums[6]),
            dimensions=(nums[7], nums[8], nums[9]),
            location=(nums[10], nums[11], nums[12]),
            rotation_y=nums[13],
            score=nums[14] if has_score else None,
        ))
    return objects


def _f2(value: float) -> str:
    return f"{value:.2f}"


def _format_score(score: float) -> str:
    for digits in range(2, 7):
        text = f"{score:.{digits}f}"
        if float(text) == score:
            return text
    return repr(score)


def serialize_kitti(objects: Sequence[KittiObject]) -> str:
    """Devkit text for ``objects``: two decimals, DontCare rows with the devkit sentinels."""
    lines = []
    for obj in objects:
        if not isinstance(obj, KittiObject):
            raise SerializationError(f"expected a KittiObject, got {type(obj).__name__}")
        if obj.bbox is None:
            raise SerializationError(f"{obj.type}: bbox2d is required in KITTI label files")
        bbox = " ".join(_f2(v) for v in obj.bbox)
        if obj.is_dontcare:
            fields = [obj.type, "-1", "-1", "-10", bbox, "-1 -1 -1", "-1000 -1000 -1000", "-10"]
        else:
            fields = [
                obj.type, _f2(obj.truncated), str(obj.occluded), _f2(obj.alpha), bbox,
                " ".join(_f2(v) for v in obj.dimensions),
                " ".join(_f2(v) for v in obj.location),
                _f2(obj.rotation_y),
            ]
        if obj.score is not None:
            fields.append(_format_score(obj.score))
        lines.append(" ".join(fields))
    return "".join(line + "\n" for line in lines)


def camera_to_canonical(location, height: float, rotation_y: float) -> Tuple[Tuple[float, float, float], float]:
    x, y, z = location
    center = (z, -x, -y + 0.5 * height)
    return center, normalize_angle(-rotation_y - 0.5 * math.pi)


def canonical_to_camera(center, height: float, yaw: float) -> Tuple[Tuple[float, float, float], float]:
    cx, cy, cz = center
    location = (-cy, 0.5 * height - cz, cx)
    return location, normalize_angle(-yaw - 0.5 * math.pi)


def to_canonical(record, source_convention: str = KITTI_CAMERA):
    """Map a record into the canonical frame.

    KITTI objects become :class:`GroundTruth` (no score) or :class:`Detection`.
    Canonical records pass through untouched.
    """
    if source_convention == CANONICAL:
        if isinstance(record, KittiObject):
            raise DatasetError("KITTI objects are in the kitti_camera convention")
        return record
    if source_convention != KITTI_CAMERA:
        raise DatasetError(f"unknown convention {source_convention!r}")
    if not isinstance(record, KittiObject):
        raise DatasetError(f"kitti_camera conversion expects a KittiObject, got {type(record).__name__}")

    if record.is_dontcare:
        if record.score is not None:
            raise DatasetError("DontCare regions cannot be detections")
        return GroundTruth(box=None, class_name=record.type, bbox2d=record.bbox, ignore=True)

    h, w, l = record.dimensions
    center, yaw = camera_to_canonical(record.location, h, record.rotation_y)
    try:
        box = Box3D(*center, length=l, width=w, height=h, yaw=yaw)
    except InvalidBoxError as exc:
        raise DatasetError(f"{record.type}: {exc}") from None
    if record.score is not None:
        return Detection(box=box, class_name=record.type, score=record.score,
                         bbox2d=record.bbox, alpha=record.alpha)
    truncation = record.truncated if record.truncated >= 0 else None
    occlusion = record.occluded if record.occluded >= 0 else None
    return GroundTruth(box=box, class_name=record.type, truncation=truncation,
                       occlusion=occlusion, bbox2d=record.bbox, alpha=record.alpha)


def from_canonical(record: Union[GroundTruth, Detection]) -> KittiObject:
    """Inverse of :func:`to_canonical` for the kitti_camera convention."""
    if isinstance(record, GroundTruth) and record.box is None:
        if record.bbox2d is None:
            raise SerializationError(f"{record.class_name}: bbox2d is required in KITTI label files")
        return KittiObject(DONTCARE, -1.0, -1, -10.0, record.bbox2d, (-1.0, -1.0, -1.0),
                           (-1000.0, -1000.0, -1000.0), -10.0)
    if record.bbox2d is None:
        raise SerializationError(f"{record.class_name}: bbox2d is required in KITTI label files")
    box = record.box
    location, rotation_y = canonical_to_camera(box.center, box.height, box.yaw)
    alpha = record.alpha if record.alpha is not None else -10.0
    if isinstance(record, Detection):
        return KittiObject(record.class_name, -1.0, -1, alpha, record.bbox2d,
                           (box.height, box.width, box.length), location, rotation_y, record.score)
    truncation = record.truncation if record.truncation is not None else -1.0
    occlusion = record.occlusion if record.occlusion is not None else -1
    return KittiObject(record.class_name, truncation, occlusion, alpha, record.bbox2d,
                       (box.height, box.width, box.length), location, rotation_y)


def assign_difficulty(gt: GroundTruth) -> str:
    """Strictest KITTI tier a ground truth qualifies for, or ``"ignored"``."""
    if gt.bbox2d is None or gt.truncation is None or gt.occlusion is None:
        return IGNORED
    for tier in TIERS:
        if qualifies(gt, tier):
            return tier
    return IGNORED


def qualifies(gt: GroundTruth, tier: str) -> bool:
    """Whether ``gt`` counts toward N_GT when evaluating ``tier``."""
    if gt.ignore or gt.box is None:
        return False
    if tier == ALL_TIER:
        return True
    if gt.bbox2d is None or gt.truncation is None or gt.occlusion is None:
        return False
    min_height, max_occ, max_trunc = DIFFICULTY_LIMITS[tier]
    height = gt.bbox2d[3] - gt.bbox2d[1]
    return height >= min_height and gt.occlusion <= max_occ and gt.truncation <= max_trunc


def has_difficulty_attributes(fs: FrameSet) -> bool:
    return any(g.bbox2d is not None and g.truncation is not None and g.occlusion is not None
               for f in fs.frames for g in f.gts if not g.ignore)


def load_kitti_dirs(gt_dir, pred_dir=None) -> FrameSet:
    """Read a KITTI label directory (and optionally a result directory) into a FrameSet.

    Frame ids are the file stems; a frame without a result file has no detections.
    """
    gt_dir = Path(gt_dir)
    if not gt_dir.is_dir():
        raise DatasetError(f"not a directory: {gt_dir}")
    pred_dir = Path(pred_dir) if pred_dir is not None else None
    if pred_dir is not None and not pred_dir.is_dir():
        raise DatasetError(f"not a directory: {pred_dir}")
    frames = []
    for path in sorted(gt_dir.glob("*.txt")):
        gts = [to_canonical(o) for o in parse_kitti_labels(path.read_text(), source=str(path))]
        dets = []
        if pred_dir is not None:
            pred_path = pred_dir / path.name
            if pred_path.exists():
                dets = [to_canonical(o) for o in
                        parse_kitti_labels(pred_path.read_text(), has_score=True, source=str(pred_path))]
        frames.append(Frame(path.stem, tuple(dets), tuple(gts)))
    return FrameSet(tuple(frames), KITTI_CAMERA)


def write_kitti_dirs(fs: FrameSet, gt_dir, pred_dir=None) -> None:
    gt_dir = Path(gt_dir)
    gt_dir.mkdir(parents=True, exist_ok=True)
    if pred_dir is not None:
        pred_dir = Path(pred_dir)
        pred_dir.mkdir(parents=True, exist_ok=True)
    for frame in fs.frames:
        name = f"{frame.frame_id}.txt"
        (gt_dir / name).write_text(serialize_kitti([from_canonical(g) for g in frame.gts]))
        if pred_dir is not None:
            (pred_dir / name).write_text(serialize_kitti([from_canonical(d) for d in frame.detections]))


# --------------------------------------------------------------------------
# Canonical JSON

_NUMBER = {"type": "number"}
_BOX_SCHEMA = {
    "type": "object",
    "required": ["cx", "cy", "cz", "l", "w", "h", "yaw"],
    "properties": {
        **{k: _NUMBER for k in ("cx", "cy", "cz", "yaw")},
        **{k: {"type": "number", "exclusiveMinimum": 0} for k in ("l", "w", "h")},
    },
    "additionalProperties": False,
}
_PAIR = {"type": "array", "items": _NUMBER, "minItems": 2, "maxItems": 2}
_QUAD = {"type": "array", "items": _NUMBER, "minItems": 4, "maxItems": 4}

CANONICAL_SCHEMA = {
    "type": "object",
    "required": ["frames"],
    "properties": {
        "source_convention": {"enum": list(CONVENTIONS)},
        "frames": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "gts", "dets"],
                "properties": {
                    "id": {"type": "string"},
                    "gts": {"type": "array", "items": {
                        "type": "object",
                        "required": ["class"],
                        "properties": {
                            "class": {"type": "string"},
                            "box": _BOX_SCHEMA,
                            "truncation": {"type": "number", "minimum": 0, "maximum": 1},
                            "occlusion": {"enum": [0, 1, 2, 3]},
                            "bbox2d": _QUAD,
                            "velocity": _PAIR,
                            "attribute": {"type": "string"},
                            "ignore": {"type": "boolean"},
                            "alpha": _NUMBER,
                        },
                        "additionalProperties": False,
                    }},
                    "dets": {"type": "array", "items": {
                        "type": "object",
                        "required": ["class", "box", "score"],
                        "properties": {
                            "class": {"type": "string"},
                            "box": _BOX_SCHEMA,
                            "score": {"type": "number", "minimum": 0, "maximum": 1},
                            "velocity": _PAIR,
                            "attribute": {"type": "string"},
                            "bbox2d": _QUAD,
                            "alpha": _NUMBER,
                        },
                        "additionalProperties": False,
                    }},
                },
                "additionalProperties": False,
            },
        },
    },
    "additionalProperties": False,
}

_VALIDATOR = jsonschema.Draft7Validator(CANONICAL_SCHEMA)


def _box_from_json(obj) -> Box3D:
    return Box3D(obj["cx"], obj["cy"], obj["cz"], obj["l"], obj["w"], obj["h"], obj["yaw"])


def _box_to_json(box: Box3D) -> dict:
    return {"cx": box.cx, "cy": box.cy, "cz": box.cz, "l": box.length, "w": box.width,
            "h": box.height, "yaw": box.yaw}


def _opt_tuple(value):
    return tuple(value) if value is not None else None


def frameset_from_dict(doc) -> FrameSet:
    errors = sorted(_VALIDATOR.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise SchemaError(err.message, err.json_path)
    frames = []
    for fi, fobj in enumerate(doc["frames"]):
        gts = []
        for gi, g in enumerate(fobj["gts"]):
            path = f"$.frames[{fi}].gts[{gi}]"
            try:
                box = _box_from_json(g["box"]) if "box" in g else None
                gts.append(GroundTruth(
                    box=box, class_name=g["class"], truncation=g.get("truncation"),
                    occlusion=g.get("occlusion"), bbox2d=_opt_tuple(g.get("bbox2d")),
                    velocity=_opt_tuple(g.get("velocity")), attribute=g.get("attribute"),
                    ignore=g.get("ignore", False), alpha=g.get("alpha"),
                ))
            except (DatasetError, InvalidBoxError) as exc:
                raise SchemaError(str(exc), path) from None
        dets = []
        for di, d in enumerate(fobj["dets"]):
            path = f"$.frames[{fi}].dets[{di}]"
            try:
                dets.append(Detection(
                    box=_box_from_json(d["box"]), class_name=d["class"], score=d["score"],
                    velocity=_opt_tuple(d.get("velocity")), attribute=d.get("attribute"),
                    bbox2d=_opt_tuple(d.get("bbox2d")), alpha=d.get("alpha"),
                ))
            except (DatasetError, InvalidBoxError) as exc:
                raise SchemaError(str(exc), path) from None
        frames.append(Frame(fobj["id"], tuple(dets), tuple(gts)))
    try:
        return FrameSet(tuple(frames), doc.get("source_convention", CANONICAL))
    except DatasetError as exc:
        raise SchemaError(str(exc), "$.frames") from None


def load_canonical_json(text: str) -> FrameSet:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON ({exc.msg}, line {exc.lineno})") from None
    return frameset_from_dict(doc)


def frameset_to_dict(fs: FrameSet) -> dict:
    frames = []
    for frame in fs.frames:
        gts = []
        for g in frame.gts:
            obj = {"class": g.class_name}
            if g.box is not None:
                obj["box"] = _box_to_json(g.box)
            for key, value in (("truncation", g.truncation), ("occlusion", g.occlusion),
                               ("bbox2d", g.bbox2d), ("velocity", g.velocity),
                               ("attribute", g.attribute), ("alpha", g.alpha)):
                if value is not None:
                    obj[key] = list(value) if isinstance(value, tuple) else value
            if g.ignore:
                obj["ignore"] = True
            gts.append(obj)
        dets = []
        for d in frame.detections:
            obj = {"class": d.class_name, "box": _box_to_json(d.box), "score": d.score}
            for key, value in (("velocity", d.velocity), ("attribute", d.attribute),
                               ("bbox2d", d.bbox2d), ("alpha", d.alpha)):
                if value is not None:
                    obj[key] = list(value) if isinstance(value, tuple) else value
            dets.append(obj)
        frames.append({"id": frame.frame_id, "gts": gts, "dets": dets})
    return {"source_convention": fs.source_convention, "frames": frames}


def save_canonical_json(fs: FrameSet) -> str:
    return json.dumps(frameset_to_dict(fs), indent=1) + "\n"


def load_frameset(path) -> FrameSet:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc.strerror}") from None
    return load_canonical_json(text)
