"""Synthetic scenes with known error ledgers, plus independent reference oracles.

Nothing in here reuses the evaluation code paths it is meant to check:
``mc_iou`` samples points instead of clipping polygons, and
``brute_force_ap`` recounts every prefix from scratch with exact fractions and
shapely footprints.

Randomness comes from numpy's PCG64 generator (``numpy.random.default_rng``),
so a seed reproduces a scene bit for bit on any platform.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from shapely.geometry import Polygon

from detdiag.boxgeom import Box3D, iou3d
from detdiag.dataset_io import Detection, Frame, FrameSet, GroundTruth, qualifies

IOU3D = "iou3d"
CENTER_DISTANCE = "center_distance"

CENTER_JITTER = "center_jitter"
DIM_SCALE = "dim_scale"
YAW_OFFSET = "yaw_offset"
DROP_GT_DETECTION = "drop_gt_detection"
ADD_BACKGROUND_FP = "add_background_fp"
CLASS_SWAP = "class_swap"
CLASS_SWAP_JITTER = "class_swap_jitter"
DUPLICATE = "duplicate"
CONFIDENCE_SHUFFLE = "confidence_shuffle"
INJECTION_KINDS = (CENTER_JITTER, DIM_SCALE, YAW_OFFSET, DROP_GT_DETECTION, ADD_BACKGROUND_FP,
                   CLASS_SWAP, CLASS_SWAP_JITTER, DUPLICATE, CONFIDENCE_SHUFFLE)
# Kinds that take over one ground truth's detection slot.
_PER_GT = (CENTER_JITTER, DIM_SCALE, YAW_OFFSET, DROP_GT_DETECTION, CLASS_SWAP,
           CLASS_SWAP_JITTER, DUPLICATE)

DEFAULT_CLASS_DIMS = {
    "Car": ((3.6, 4.6), (1.6, 1.9), (1.4, 1.7)),
    "Cyclist": ((1.6, 1.9), (0.55, 0.75), (1.6, 1.8)),
}
ATTRIBUTES = ("moving", "parked")
BAND_MARGIN = 0.05
MAX_BRUTE_FORCE_DETS = 32


class InfeasibleRecipe(ValueError):
    pass


@dataclass(frozen=True)
class Injection:
    kind: str
    count: int = 1
    # Target quality for localization-style kinds (IoU, or meters for the
    # distance family); None draws one inside the unambiguous band.
    magnitude: Optional[float] = None

    def __post_init__(self):
        if self.kind not in INJECTION_KINDS:
            raise InfeasibleRecipe(f"unknown injection kind {self.kind!r}")
        if self.count < 0:
            raise InfeasibleRecipe("injection count must be >= 0")
        if self.magnitude is not None and not math.isfinite(self.magnitude):
            raise InfeasibleRecipe("injection magnitude must be finite")


@dataclass(frozen=True)
class SceneRecipe:
    seed: int = 0
    n_frames: int = 1
    gts_per_frame: int = 4
    extent: float = 60.0
    class_dims: Mapping[str, Tuple[Tuple[float, float], ...]] = field(
        default_factory=lambda: dict(DEFAULT_CLASS_DIMS))
    injections: Tuple[Injection, ...] = ()
    metric_family: str = IOU3D
    t_p: float = 0.7
    t_f: float = 0.1
    # "below": every error detection scores under every true positive;
    # "interleaved": all scores drawn from one range.
    score_mode: str = "below"
    cell: float = 12.0
    with_velocity_attribute: bool = False

    def __post_init__(self):
        object.__setattr__(self, "injections", tuple(
            i if isinstance(i, Injection) else Injection(**i) for i in self.injections))
        if self.n_frames < 0 or self.gts_per_frame < 0:
            raise InfeasibleRecipe("frame and ground-truth counts must be >= 0")
        if self.score_mode not in ("below", "interleaved"):
            raise InfeasibleRecipe(f"unknown score_mode {self.score_mode!r}")
        if self.metric_family not in (IOU3D, CENTER_DISTANCE):
            raise InfeasibleRecipe(f"unknown metric family {self.metric_family!r}")
        if not self.class_dims:
            raise InfeasibleRecipe("at least one class is required")

    @classmethod
    def from_dict(cls, doc: Mapping) -> "SceneRecipe":
        doc = dict(doc)
        if "class_dims" in doc:
            doc["class_dims"] = {k: tuple(tuple(r) for r in v) for k, v in doc["class_dims"].items()}
        if "injections" in doc:
            doc["injections"] = tuple(Injection(**i) for i in doc["injections"])
        try:
            return cls(**doc)
        except TypeError as exc:
            raise InfeasibleRecipe(str(exc)) from None


@dataclass(frozen=True)
class ExpectedLedger:
    counts: Dict[str, int]
    clean_ap: float = 1.0

    def to_dict(self) -> dict:
        return {"counts": dict(self.counts), "clean_ap": self.clean_ap}


def _bisect(f, lo: float, hi: float, target: float, iters: int = 80) -> float:
    """x in [lo, hi] with f(x) = target for f decreasing."""
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if f(mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class _Builder:
    def __init__(self, recipe: SceneRecipe):
        self.r = recipe
        self.rng = np.random.default_rng(recipe.seed)
        self.classes = sorted(recipe.class_dims)

    # -- quality bands ----------------------------------------------------
    def loc_target(self, magnitude: Optional[float]) -> float:
        r = self.r
        if r.metric_family == IOU3D:
            lo, hi = r.t_f + BAND_MARGIN, r.t_p - BAND_MARGIN
        else:
            lo, hi = r.t_p + 5 * BAND_MARGIN, r.t_f - 5 * BAND_MARGIN
        if hi <= lo:
            raise InfeasibleRecipe(f"no unambiguous band between t_f={r.t_f} and t_p={r.t_p}")
        if magnitude is None:
            return float(self.rng.uniform(lo, hi))
        if not lo <= magnitude <= hi:
            raise InfeasibleRecipe(f"magnitude {magnitude} outside the band [{lo}, {hi}]")
        return magnitude

    def dup_target(self) -> float:
        r = self.r
        if r.metric_family == IOU3D:
            return 0.5 * (r.t_p + 1.0)
        return 0.5 * r.t_p

    def shifted(self, box: Box3D, target: float) -> Box3D:
        """Move ``box`` in the ground plane until its quality against itself hits ``target``."""
        theta = float(self.rng.uniform(-math.pi, math.pi))
        ux, uy = math.cos(theta), math.sin(theta)
        if self.r.metric_family == CENTER_DISTANCE:
            return box.translated(target * ux, target * uy)
        reach = box.length + box.width
        d = _bisect(lambda t: iou3d(box, box.translated(t * ux, t * uy)), 0.0, reach, target)
        return box.translated(d * ux, d * uy)

    def scaled(self, box: Box3D, target: Optional[float]) -> Box3D:
        if self.r.metric_family == CENTER_DISTANCE:
            s = 1.25 if target is None else target
            if s <= 0:
                raise InfeasibleRecipe("dim_scale factor must be positive")
        else:
            s = self.loc_target(target) ** (-1.0 / 3.0)
        return box.replace(length=box.length * s, width=box.width * s, height=box.height * s)

    def rotated(self, box: Box3D, target: Optional[float]) -> Box3D:
        if self.r.metric_family == CENTER_DISTANCE:
            offset = math.pi / 4 if target is None else target
            return box.replace(yaw=box.yaw + offset)
        f = lambda a: iou3d(box, box.replace(yaw=box.yaw + a))
        grid = np.linspace(0.0, 0.5 * math.pi, 181)
        vals = [f(a) for a in grid]
        k = int(np.argmin(vals))
        lo = max(self.r.t_f + BAND_MARGIN, vals[k] + 1e-3)
        hi = self.r.t_p - BAND_MARGIN
        if lo > hi:
            raise InfeasibleRecipe(
                f"yaw_offset cannot push a {box.length:.2f}x{box.width:.2f} box below IoU {hi:.2f}")
        if target is None:
            target = float(self.rng.uniform(lo, hi))
        elif not lo <= target <= hi:
            raise InfeasibleRecipe(f"yaw_offset target {target} outside [{lo}, {hi}]")
        a = _bisect(f, 0.0, float(grid[k]), target)
        sign = 1.0 if self.rng.random() < 0.5 else -1.0
        return box.replace(yaw=box.yaw + sign * a)

    # -- scores -----------------------------------------------------------
    def tp_score(self) -> float:
        if self.r.score_mode == "below":
            return 1.0
        return float(self.rng.uniform(0.05, 1.0))

    def error_score(self, ceiling: Optional[float] = None) -> float:
        if self.r.score_mode == "below":
            return float(self.rng.uniform(0.05, 0.95))
        top = 1.0 if ceiling is None else ceiling
        return float(self.rng.uniform(0.05, top)) if top > 0.05 else 0.5 * top

    def other_class(self, name: str) -> str:
        others = [c for c in self.classes if c != name]
        if not others:
            raise InfeasibleRecipe("class swaps need at least two classes")
        return others[int(self.rng.integers(len(others)))]

    def extras(self):
        if not self.r.with_velocity_attribute:
            return {}
        v = self.rng.normal(0.0, 3.0, 2)
        return {"velocity": (float(v[0]), float(v[1])),
                "attribute": ATTRIBUTES[int(self.rng.integers(len(ATTRIBUTES)))]}

    # -- layout -----------------------------------------------------------
    def place_gts(self) -> List[List[GroundTruth]]:
        r = self.r
        n_side = int(r.extent // r.cell)
        if n_side * n_side < r.gts_per_frame:
            raise InfeasibleRecipe(
                f"{r.gts_per_frame} objects do not fit a {n_side}x{n_side} grid of {r.cell} m cells")
        max_diag = max(math.hypot(d[0][1], d[1][1]) for d in r.class_dims.values())
        jitter = 0.5
        if max_diag + 2 * jitter >= r.cell:
            raise InfeasibleRecipe("cell too small for the largest footprint")
        frames = []
        for _ in range(r.n_frames):
            cells = self.rng.permutation(n_side * n_side)[:r.gts_per_frame]
            gts = []
            for c in cells:
                name = self.classes[int(self.rng.integers(len(self.classes)))]
                (l0, l1), (w0, w1), (h0, h1) = r.class_dims[name]
                l, w, h = (float(self.rng.uniform(a, b)) for a, b in ((l0, l1), (w0, w1), (h0, h1)))
                ix, iy = divmod(int(c), n_side)
                cx = (ix + 0.5) * r.cell + float(self.rng.uniform(-jitter, jitter))
                cy = (iy + 0.5) * r.cell + float(self.rng.uniform(-jitter, jitter))
                yaw = float(self.rng.uniform(-math.pi, math.pi))
                gts.append(GroundTruth(Box3D(cx, cy, 0.5 * h, l, w, h, yaw), name, **self.extras()))
            frames.append(gts)
        return frames


def generate(recipe: SceneRecipe) -> Tuple[FrameSet, ExpectedLedger]:
    """Deterministic scene for ``recipe`` and the error counts it was built to contain."""
    b = _Builder(recipe)
    gt_frames = b.place_gts()
    counts = {"cls": 0, "loc": 0, "both": 0, "dup": 0, "bkg": 0, "miss": 0}

    slots = [(k, j) for k, gts in enumerate(gt_frames) for j in range(len(gts))]
    order = [slots[i] for i in b.rng.permutation(len(slots))] if slots else []
    needed = sum(i.count for i in recipe.injections if i.kind in _PER_GT)
    if needed > len(order):
        raise InfeasibleRecipe(f"recipe needs {needed} ground truths, scene has {len(order)}")

    assigned: Dict[Tuple[int, int], Injection] = {}
    pos = 0
    for inj in recipe.injections:
        if inj.kind in _PER_GT:
            for _ in range(inj.count):
                assigned[order[pos]] = inj
                pos += 1

    dets: List[List[Detection]] = [[] for _ in gt_frames]
    iou_family = recipe.metric_family == IOU3D
    for k, gts in enumerate(gt_frames):
        for j, gt in enumerate(gts):
            inj = assigned.get((k, j))
            kind = inj.kind if inj else None
            extra = {"velocity": gt.velocity, "attribute": gt.attribute}
            if kind is None:
                dets[k].append(Detection(gt.box, gt.class_name, b.tp_score(), **extra))
            elif kind == DROP_GT_DETECTION:
                counts["miss"] += 1
            elif kind == CENTER_JITTER:
                box = b.shifted(gt.box, b.loc_target(inj.magnitude))
                dets[k].append(Detection(box, gt.class_name, b.error_score(), **extra))
                counts["loc"] += 1
            elif kind == DIM_SCALE:
                box = b.scaled(gt.box, inj.magnitude)
                score = b.error_score() if iou_family else b.tp_score()
                dets[k].append(Detection(box, gt.class_name, score, **extra))
                counts["loc"] += iou_family
            elif kind == YAW_OFFSET:
                box = b.rotated(gt.box, inj.magnitude)
                score = b.error_score() if iou_family else b.tp_score()
                dets[k].append(Detection(box, gt.class_name, score, **extra))
                counts["loc"] += iou_family
            elif kind == CLASS_SWAP:
                dets[k].append(Detection(gt.box, b.other_class(gt.class_name), b.error_score(), **extra))
                counts["cls"] += 1
            elif kind == CLASS_SWAP_JITTER:
                tp = b.tp_score()
                dets[k].append(Detection(gt.box, gt.class_name, tp, **extra))
                box = b.shifted(gt.box, b.loc_target(inj.magnitude))
                dets[k].append(Detection(box, b.other_class(gt.class_name), b.error_score(), **extra))
                counts["both"] += 1
            elif kind == DUPLICATE:
                tp = b.tp_score()
                dets[k].append(Detection(gt.box, gt.class_name, tp, **extra))
                box = b.shifted(gt.box, b.dup_target())
                dets[k].append(Detection(box, gt.class_name, b.error_score(ceiling=tp), **extra))
                counts["dup"] += 1

    n_frames = len(gt_frames)
    for inj in recipe.injections:
        if inj.kind != ADD_BACKGROUND_FP:
            continue
        if n_frames == 0 and inj.count:
            raise InfeasibleRecipe("background detections need at least one frame")
        for i in range(inj.count):
            k = int(b.rng.integers(n_frames))
            name = b.classes[int(b.rng.integers(len(b.classes)))]
            (l0, l1), (w0, w1), (h0, h1) = recipe.class_dims[name]
            l, w, h = (float(b.rng.uniform(a, c)) for a, c in ((l0, l1), (w0, w1), (h0, h1)))
            # Outside the ground-truth grid, one cell apart from each other.
            cx = recipe.extent + 2 * recipe.cell + recipe.cell * len(dets[k])
            cy = float(b.rng.uniform(0.0, recipe.extent))
            yaw = float(b.rng.uniform(-math.pi, math.pi))
            dets[k].append(Detection(Box3D(cx, cy, 0.5 * h, l, w, h, yaw), name, b.error_score(), **b.extras()))
            counts["bkg"] += 1

    for inj in recipe.injections:
        if inj.kind != CONFIDENCE_SHUFFLE:
            continue
        flat = [(k, i) for k in range(n_frames) for i in range(len(dets[k]))]
        for _ in range(inj.count):
            if len(flat) < 2:
                break
            a, c = b.rng.choice(len(flat), size=2, replace=False)
            (ka, ia), (kc, ic) = flat[int(a)], flat[int(c)]
            da, dc = dets[ka][ia], dets[kc][ic]
            dets[ka][ia] = Detection(da.box, da.class_name, dc.score, da.velocity, da.attribute)
            dets[kc][ic] = Detection(dc.box, dc.class_name, da.score, dc.velocity, dc.attribute)

    frames = tuple(Frame(f"{k:06d}", tuple(dets[k]), tuple(gt_frames[k])) for k in range(n_frames))
    return FrameSet(frames), ExpectedLedger(counts)


# --------------------------------------------------------------------------
# Monte-Carlo IoU

def _corners(box: Box3D) -> np.ndarray:
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=float) * [0.5 * box.length, 0.5 * box.width]
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + [box.cx, box.cy]


def _inside(pts: np.ndarray, box: Box3D) -> np.ndarray:
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx = pts[:, 0] - box.cx
    dy = pts[:, 1] - box.cy
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    return ((np.abs(lx) <= 0.5 * box.length) & (np.abs(ly) <= 0.5 * box.width)
            & (np.abs(pts[:, 2] - box.cz) <= 0.5 * box.height))


def mc_iou(a: Box3D, b: Box3D, n: int = 1_000_000, seed: int = 0,
           chunk: int = 500_000) -> Tuple[float, float]:
    """Hit-counting IoU estimate and its standard error.

    Points are drawn uniformly from the axis-aligned bounding region of both
    boxes; the estimate is (#in both) / (#in either).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    xy = np.vstack([_corners(a), _corners(b)])
    lo = np.array([xy[:, 0].min(), xy[:, 1].min(), min(a.z_range[0], b.z_range[0])])
    hi = np.array([xy[:, 0].max(), xy[:, 1].max(), max(a.z_range[1], b.z_range[1])])
    inter = union = 0
    remaining = n
    while remaining > 0:
        m = min(chunk, remaining)
        pts = lo + rng.random((m, 3)) * (hi - lo)
        ia = _inside(pts, a)
        ib = _inside(pts, b)
        inter += int(np.count_nonzero(ia & ib))
        union += int(np.count_nonzero(ia | ib))
        remaining -= m
    if union == 0:
        return 0.0, 0.0
    p = inter / union
    return p, math.sqrt(p * (1.0 - p) / union)


# --------------------------------------------------------------------------
# Brute-force AP

def _footprint(box: Box3D) -> Polygon:
    return Polygon(_corners(box))


def _reference_quality(det: Box3D, gt: Box3D, family: str) -> float:
    if family == CENTER_DISTANCE:
        return -math.sqrt((det.cx - gt.cx) ** 2 + (det.cy - gt.cy) ** 2)
    dz = min(det.z_range[1], gt.z_range[1]) - max(det.z_range[0], gt.z_range[0])
    if dz <= 0:
        return 0.0
    inter = _footprint(det).intersection(_footprint(gt)).area * dz
    return inter / (det.volume + gt.volume - inter)


def brute_force_ap(dets: Sequence[Detection], gts: Sequence[GroundTruth], cfg, style: str) -> float:
    """Single-class AP of one frame, recounting matches for every prefix.

    ``cfg`` needs ``metric_family``, ``threshold``, ``class_name`` and
    ``difficulty`` attributes. ``style`` is ``"ap40"`` or ``"ap_distance"``.
    """
    family = cfg.metric_family
    need = cfg.threshold if family == IOU3D else -cfg.threshold
    dets = [d for d in dets if cfg.class_name is None or d.class_name == cfg.class_name]
    if len(dets) > MAX_BRUTE_FORCE_DETS:
        raise ValueError(f"brute force is limited to {MAX_BRUTE_FORCE_DETS} detections")
    pool = [(j, g) for j, g in enumerate(gts) if g.box is not None
            and (cfg.class_name is None or g.class_name == cfg.class_name)]
    counted = [j for j, g in pool if qualifies(g, cfg.difficulty)]
    absorbing = [j for j, g in pool if j not in counted]
    n_gt = len(counted)
    if n_gt == 0:
        return 0.0

    ranking = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    q = {(i, j): _reference_quality(dets[i].box, gts[j].box, family)
         for i in range(len(dets)) for j, _ in pool}

    points = []  # (precision, recall) as fractions, one per counted prefix
    for k in range(1, len(ranking) + 1):
        taken = set()
        tp = fp = 0
        for i in ranking[:k]:
            options = [j for j in counted if j not in taken and q[i, j] >= need]
            if options:
                best = max(options, key=lambda j: (q[i, j], -j))
                taken.add(best)
                tp += 1
            elif any(q[i, j] >= need for j in absorbing):
                continue
            else:
                fp += 1
        if tp + fp:
            points.append((Fraction(tp, tp + fp), Fraction(tp, n_gt)))
    # Prefixes that end on an absorbed detection repeat the previous point; drop repeats.
    dedup = []
    for p in points:
        if not dedup or dedup[-1] != p:
            dedup.append(p)
    points = dedup

    def envelope(r: Fraction) -> Fraction:
        return max((p for p, rec in points if rec >= r), default=Fraction(0))

    if style == "ap40":
        total = sum(envelope(Fraction(k, 40)) for k in range(1, 41))
        return float(total / 40)
    if style == "ap_distance":
        floor_r, floor_p = Fraction(1, 10), Fraction(1, 10)
        recalls = sorted({rec for _, rec in points})
        area = Fraction(0)
        prev = Fraction(0)
        for rec in recalls:
            a, b = max(prev, floor_r), min(rec, Fraction(1))
            if b > a:
                area += (b - a) * max(Fraction(0), envelope(rec) - floor_p)
            prev = rec
        return float(area / ((1 - floor_r) * (1 - floor_p)))
    raise ValueError(f"unknown AP style {style!r}")


def clutter_frame(seed: int, max_gts: int = 5, max_dets: int = 8, spread: float = 6.0,
                  classes: Sequence[str] = ("Car",), ignore_rate: float = 0.15) -> Frame:
    """Dense random frame with overlapping boxes, repeated scores and ignored objects.

    Detections are GT boxes perturbed by random amounts (or pure clutter), so
    every matching branch gets exercised. Scores are drawn from a coarse grid to
    force ties.
    """
    rng = np.random.default_rng(seed)
    n_gt = int(rng.integers(0, max_gts + 1))
    n_det = int(rng.integers(0, max_dets + 1))

    def rand_box(near: Optional[Box3D] = None) -> Box3D:
        if near is None:
            l, w, h = rng.uniform(1.0, 4.5), rng.uniform(0.6, 2.0), rng.uniform(1.0, 2.0)
            return Box3D(float(rng.uniform(-spread, spread)), float(rng.uniform(-spread, spread)),
                         float(0.5 * h + rng.normal(0, 0.1)), float(l), float(w), float(h),
                         float(rng.uniform(-math.pi, math.pi)))
        s = rng.uniform(0.0, 1.0)
        return Box3D(near.cx + float(rng.normal(0, s)), near.cy + float(rng.normal(0, s)),
                     near.cz + float(rng.normal(0, 0.2 * s)),
                     near.length * float(math.exp(rng.normal(0, 0.2 * s))),
                     near.width * float(math.exp(rng.normal(0, 0.2 * s))),
                     near.height * float(math.exp(rng.normal(0, 0.2 * s))),
                     near.yaw + float(rng.normal(0, s)))

    gts = tuple(GroundTruth(rand_box(), classes[int(rng.integers(len(classes)))],
                            ignore=bool(rng.random() < ignore_rate)) for _ in range(n_gt))
    dets = []
    for _ in range(n_det):
        if gts and rng.random() < 0.75:
            g = gts[int(rng.integers(len(gts)))]
            box, name = rand_box(g.box), g.class_name
            if rng.random() < 0.1:
                name = classes[int(rng.integers(len(classes)))]
        else:
            box, name = rand_box(), classes[int(rng.integers(len(classes)))]
        score = float(rng.integers(1, 11)) / 10.0
        dets.append(Detection(box, name, score))
    return Frame(f"{seed:06d}", tuple(dets), gts)
