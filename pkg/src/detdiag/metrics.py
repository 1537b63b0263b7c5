"""Matching, precision/recall curves, AP, TP metrics and NDS."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from detdiag import boxgeom
from detdiag.dataset_io import (
    ALL_TIER, TIERS, Detection, Frame, FrameSet, GroundTruth, has_difficulty_attributes, qualifies,
)

IOU3D = "iou3d"
CENTER_DISTANCE = "center_distance"
FAMILIES = (IOU3D, CENTER_DISTANCE)

AP40 = "ap40"
AP_DISTANCE = "ap_distance"

TP_METRICS = ("ATE", "ASE", "AOE", "AVE", "AAE", "AHE")
NDS_METRICS = ("ATE", "ASE", "AOE", "AVE", "AAE")
TP_METRIC_NAMES = {
    "ATE": "translation", "ASE": "scale", "AOE": "orientation",
    "AVE": "velocity", "AAE": "attribute", "AHE": "height",
}

N_RECALL_POINTS = 40


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class MatcherConfig:
    metric_family: str
    threshold: float
    class_name: Optional[str] = None
    difficulty: str = ALL_TIER

    def __post_init__(self):
        if self.metric_family not in FAMILIES:
            raise EvaluationError(f"unknown metric family {self.metric_family!r}")
        if not (math.isfinite(self.threshold) and self.threshold > 0):
            raise EvaluationError(f"threshold must be positive, got {self.threshold}")
        if self.metric_family == IOU3D and self.threshold > 1:
            raise EvaluationError(f"IoU threshold must be <= 1, got {self.threshold}")
        if self.difficulty not in TIERS + (ALL_TIER,):
            raise EvaluationError(f"unknown difficulty {self.difficulty!r}")

    @property
    def min_quality(self) -> float:
        """Threshold expressed on the quality scale (higher is better)."""
        return quality_threshold(self.metric_family, self.threshold)


def quality_threshold(family: str, threshold: float) -> float:
    return threshold if family == IOU3D else -threshold


def match_quality(det_box: boxgeom.Box3D, gt_box: boxgeom.Box3D, family: str) -> float:
    """IoU, or negated ground-plane center distance, so that larger is always better."""
    if family == IOU3D:
        return boxgeom.iou3d(det_box, gt_box)
    return -boxgeom.center_distance_ground(det_box, gt_box)


def quality_matrix(frame: Frame, family: str) -> np.ndarray:
    """det x gt quality; ground truths without a box get -inf."""
    q = np.full((len(frame.detections), len(frame.gts)), -np.inf)
    for j, gt in enumerate(frame.gts):
        if gt.box is None:
            continue
        for i, det in enumerate(frame.detections):
            q[i, j] = match_quality(det.box, gt.box, family)
    return q


class QualityCache:
    """Per-frame quality matrices, keyed on frame identity.

    Oracle-modified frame sets reuse untouched ``Frame`` objects, so only the
    frames an oracle actually changed are recomputed.
    """

    def __init__(self, family: str):
        self.family = family
        self._store: Dict[int, Tuple[Frame, np.ndarray]] = {}

    def get(self, frame: Frame) -> np.ndarray:
        hit = self._store.get(id(frame))
        if hit is not None and hit[0] is frame:
            return hit[1]
        q = quality_matrix(frame, self.family)
        self._store[id(frame)] = (frame, q)
        return q

    def for_frameset(self, fs: FrameSet) -> List[np.ndarray]:
        return [self.get(f) for f in fs.frames]


def detection_order(dets: Sequence[Detection]) -> List[int]:
    """Indices by descending score; ties keep input order."""
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


@dataclass(frozen=True)
class DetMatch:
    det_index: int
    score: float
    gt_index: Optional[int]
    quality: float
    tp: bool
    ignored: bool = False


@dataclass(frozen=True)
class MatchResult:
    frame_id: str
    frame_index: int
    matches: Tuple[DetMatch, ...]
    unmatched_gts: Tuple[int, ...]
    n_gt: int

    @property
    def n_tp(self) -> int:
        return sum(m.tp for m in self.matches)

    @property
    def n_fp(self) -> int:
        return sum(1 for m in self.matches if not m.tp and not m.ignored)

    @property
    def n_fn(self) -> int:
        return len(self.unmatched_gts)

    def false_positives(self) -> List[DetMatch]:
        return [m for m in self.matches if not m.tp and not m.ignored]


def match_frame(dets: Sequence[Detection], gts: Sequence[GroundTruth], cfg: MatcherConfig,
                frame_id: str = "", frame_index: int = 0,
                quality: Optional[np.ndarray] = None,
                order: Optional[Sequence[int]] = None) -> MatchResult:
    """Greedy matching of one frame.

    Detections are visited by descending score (or ``order``); each claims the
    best-quality unclaimed ground truth of its class meeting the threshold.
    Detections that only reach an ignored ground truth are dropped from the
    curve (neither TP nor FP).
    """
    if quality is None:
        quality = quality_matrix(Frame(frame_id, tuple(dets), tuple(gts)), cfg.metric_family)
    min_q = cfg.min_quality
    det_ids = [i for i in range(len(dets))
               if cfg.class_name is None or dets[i].class_name == cfg.class_name]
    same_class = [j for j in range(len(gts))
                  if gts[j].box is not None
                  and (cfg.class_name is None or gts[j].class_name == cfg.class_name)]
    valid = [j for j in same_class if qualifies(gts[j], cfg.difficulty)]
    valid_set = set(valid)
    ignored = [j for j in same_class if j not in valid_set]
    if order is None:
        order = sorted(det_ids, key=lambda i: -dets[i].score)
    else:
        wanted = set(det_ids)
        order = [i for i in order if i in wanted]

    claimed = set()
    matches = []
    for i in order:
        best_j, best_q = None, -math.inf
        for j in valid:
            if j in claimed:
                continue
            q = quality[i, j]
            if q >= min_q and q > best_q:
                best_j, best_q = j, q
        if best_j is not None:
            claimed.add(best_j)
            matches.append(DetMatch(i, dets[i].score, best_j, float(best_q), True))
            continue
        if any(quality[i, j] >= min_q for j in ignored):
            matches.append(DetMatch(i, dets[i].score, None, math.nan, False, ignored=True))
            continue
        matches.append(DetMatch(i, dets[i].score, None, math.nan, False))
    unmatched = tuple(j for j in valid if j not in claimed)
    return MatchResult(frame_id, frame_index, tuple(matches), unmatched, len(valid))


def match_frameset(fs: FrameSet, cfg: MatcherConfig,
                   qualities: Optional[Sequence[np.ndarray]] = None) -> List[MatchResult]:
    results = []
    for k, frame in enumerate(fs.frames):
        q = qualities[k] if qualities is not None else None
        results.append(match_frame(frame.detections, frame.gts, cfg, frame.frame_id, k, quality=q))
    return results


# --------------------------------------------------------------------------
# Precision / recall

@dataclass(frozen=True)
class PRPoint:
    confidence: float
    n_tp: int
    n_fp: int
    precision: float
    recall: float


@dataclass(frozen=True)
class PRCurve:
    points: Tuple[PRPoint, ...]
    n_gt: int

    def __len__(self):
        return len(self.points)

    @property
    def precisions(self) -> np.ndarray:
        return np.array([p.precision for p in self.points], dtype=float)

    @property
    def recalls(self) -> np.ndarray:
        return np.array([p.recall for p in self.points], dtype=float)

    def interpolated_precision(self, recall: float) -> float:
        """max precision over points whose recall reaches ``recall`` (0 if none)."""
        best = 0.0
        for p in self.points:
            if p.recall >= recall and p.precision > best:
                best = p.precision
        return best

    def recall_grid_precision(self, n_points: int = N_RECALL_POINTS) -> np.ndarray:
        """Interpolated precision at recall k/n for k = 1..n.

        Recall comparisons are done on integer counts so grid points that
        coincide with an achieved recall are never lost to rounding.
        """
        out = np.zeros(n_points)
        if self.n_gt == 0 or not self.points:
            return out
        # Suffix max of precision along the curve; recall is non-decreasing.
        suffix = [0.0] * (len(self.points) + 1)
        for idx in range(len(self.points) - 1, -1, -1):
            suffix[idx] = max(suffix[idx + 1], self.points[idx].precision)
        tps = [p.n_tp for p in self.points]
        pos = 0
        for k in range(1, n_points + 1):
            # first point with n_tp * n_points >= k * n_gt
            while pos < len(tps) and tps[pos] * n_points < k * self.n_gt:
                pos += 1
            if pos == len(tps):
                break
            out[k - 1] = suffix[pos]
        return out


def pr_curve_from_flags(scores: Sequence[float], tp_flags: Sequence[bool], n_gt: int) -> PRCurve:
    """Curve for detections already in ranking order."""
    if n_gt < 0:
        raise EvaluationError("n_gt must be non-negative")
    if n_gt == 0:
        return PRCurve((), 0)
    points = []
    n_tp = n_fp = 0
    for score, tp in zip(scores, tp_flags):
        if tp:
            n_tp += 1
        else:
            n_fp += 1
        points.append(PRPoint(float(score), n_tp, n_fp, n_tp / (n_tp + n_fp), n_tp / n_gt))
    return PRCurve(tuple(points), n_gt)


def ranked_matches(results: Iterable[MatchResult]) -> List[Tuple[MatchResult, DetMatch]]:
    """All non-ignored detections sorted by descending confidence.

    Ties are broken by frame position, then by the detection's input order.
    """
    entries = [(r, m) for r in results for m in r.matches if not m.ignored]
    entries.sort(key=lambda e: (-e[1].score, e[0].frame_index, e[1].det_index))
    return entries


def pr_curve(results: Iterable[MatchResult], n_gt: Optional[int] = None) -> PRCurve:
    results = list(results)
    if n_gt is None:
        n_gt = sum(r.n_gt for r in results)
    entries = ranked_matches(results)
    return pr_curve_from_flags([m.score for _, m in entries], [m.tp for _, m in entries], n_gt)


def ap40(pr: PRCurve) -> float:
    """Mean interpolated precision over the recall points 1/40 .. 40/40."""
    return float(pr.recall_grid_precision(N_RECALL_POINTS).sum() / N_RECALL_POINTS)


def ap_distance(pr: PRCurve, min_recall: float = 0.1, min_precision: float = 0.1) -> float:
    """Normalized area under the interpolated PR curve above the recall and precision floors."""
    if pr.n_gt == 0 or not pr.points:
        return 0.0
    # Collapse to (recall, max precision at recall >= r) steps.
    recalls = []
    envelope = []
    best = 0.0
    for p in reversed(pr.points):
        best = max(best, p.precision)
        if recalls and recalls[-1] == p.recall:
            envelope[-1] = best
        else:
            recalls.append(p.recall)
            envelope.append(best)
    recalls.reverse()
    envelope.reverse()
    # p(r) = envelope[k] on (recalls[k-1], recalls[k]], with recalls[-1] = 0.
    area = 0.0
    lo = 0.0
    for r_hi, prec in zip(recalls, envelope):
        a = max(lo, min_recall)
        b = min(r_hi, 1.0)
        if b > a:
            area += (b - a) * max(0.0, prec - min_precision)
        lo = r_hi
    # Normalized so a perfect detector scores 1.
    return float(area / ((1.0 - min_recall) * (1.0 - min_precision)))


def average_precision(pr: PRCurve, style: str) -> float:
    if style == AP40:
        return ap40(pr)
    if style == AP_DISTANCE:
        return ap_distance(pr)
    raise EvaluationError(f"unknown AP style {style!r}")


# --------------------------------------------------------------------------
# TP metrics and NDS

@dataclass
class TPMetricSamples:
    samples: Dict[str, List[float]] = field(default_factory=lambda: {k: [] for k in TP_METRICS})
    available: Dict[str, bool] = field(default_factory=lambda: {k: True for k in TP_METRICS})

    def mean(self, metric: str) -> Optional[float]:
        if not self.available[metric] or not self.samples[metric]:
            return None
        return float(np.mean(self.samples[metric]))


def tp_errors(pairs: Iterable[Tuple[Detection, GroundTruth]]) -> TPMetricSamples:
    """Per-pair TP errors for matched (detection, ground truth) pairs."""
    out = TPMetricSamples()
    for det, gt in pairs:
        out.samples["ATE"].append(boxgeom.center_distance_ground(det.box, gt.box))
        out.samples["ASE"].append(1.0 - boxgeom.aligned_iou(det.box, gt.box))
        out.samples["AOE"].append(boxgeom.yaw_delta(det.box, gt.box))
        out.samples["AHE"].append(boxgeom.height_error(det.box, gt.box))
        if det.velocity is not None and gt.velocity is not None:
            out.samples["AVE"].append(math.hypot(det.velocity[0] - gt.velocity[0],
                                                 det.velocity[1] - gt.velocity[1]))
        else:
            out.available["AVE"] = False
        if det.attribute is not None and gt.attribute is not None:
            out.samples["AAE"].append(0.0 if det.attribute == gt.attribute else 1.0)
        else:
            out.available["AAE"] = False
    for k in ("AVE", "AAE"):
        if not out.available[k]:
            out.samples[k] = []
    return out


def nds(mean_ap: float, mtp: Mapping[str, float]) -> float:
    """nuScenes detection score over whichever TP metrics ``mtp`` supplies.

    With all five metrics this is (5 mAP + sum(1 - min(1, mTP))) / 10; with
    fewer, the TP half is averaged over the supplied metrics so a perfect
    detector still scores 1.
    """
    if not 0.0 <= mean_ap <= 1.0:
        raise EvaluationError(f"mAP must lie in [0, 1], got {mean_ap}")
    for k, v in mtp.items():
        if k not in NDS_METRICS:
            raise EvaluationError(f"{k} is not an NDS metric")
        if not v >= 0:
            raise EvaluationError(f"mTP {k} must be non-negative, got {v}")
    if not mtp:
        return float(mean_ap)
    tp_score = sum(1.0 - min(1.0, v) for v in mtp.values())
    return float(0.5 * mean_ap + 0.5 * tp_score / len(mtp))


# --------------------------------------------------------------------------
# Profiles and full evaluation

@dataclass(frozen=True)
class Profile:
    name: str
    metric_family: str
    thresholds: Tuple[float, ...]
    tiers: Tuple[str, ...]
    ap_style: str
    tf: float
    tp_threshold: Optional[float] = None
    recall_filtered_tp: bool = False

    def __post_init__(self):
        if not self.thresholds:
            raise EvaluationError("a profile needs at least one threshold")
        for t in self.thresholds:
            MatcherConfig(self.metric_family, t)
        if self.tp_threshold is not None:
            MatcherConfig(CENTER_DISTANCE, self.tp_threshold)


KITTI_THRESHOLDS = (0.7, 0.5, 0.25)
NUSCENES_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
NUSCENES_TP_THRESHOLD = 2.0
KITTI_TF = 0.1
NUSCENES_TF = 5.0


def make_profile(name: str, thresholds: Optional[Sequence[float]] = None,
                 tiers: Optional[Sequence[str]] = None, tf: Optional[float] = None,
                 tp_threshold: Optional[float] = None) -> Profile:
    if name == "kitti":
        return Profile("kitti", IOU3D, tuple(thresholds or KITTI_THRESHOLDS),
                       tuple(tiers) if tiers else TIERS, AP40,
                       KITTI_TF if tf is None else tf)
    if name == "nuscenes":
        return Profile("nuscenes", CENTER_DISTANCE, tuple(thresholds or NUSCENES_THRESHOLDS),
                       tuple(tiers) if tiers else (ALL_TIER,), AP_DISTANCE,
                       NUSCENES_TF if tf is None else tf,
                       tp_threshold=NUSCENES_TP_THRESHOLD if tp_threshold is None else tp_threshold)
    raise EvaluationError(f"unknown profile {name!r}")


def effective_tiers(fs: FrameSet, profile: Profile) -> Tuple[str, ...]:
    """KITTI tiers need 2D boxes, truncation and occlusion; fall back to 'all' without them."""
    if any(t != ALL_TIER for t in profile.tiers) and not has_difficulty_attributes(fs):
        return (ALL_TIER,)
    return profile.tiers


def resolve_classes(fs: FrameSet, classes: Optional[Sequence[str]] = None) -> Tuple[str, ...]:
    names = tuple(classes) if classes else tuple(fs.classes())
    if not names:
        raise EvaluationError("empty class set: no ground-truth classes to evaluate")
    return names


@dataclass(frozen=True)
class APEntry:
    class_name: str
    threshold: float
    tier: str
    ap: float
    n_gt: int
    n_det: int


@dataclass(frozen=True)
class MAPEntry:
    threshold: Optional[float]
    tier: str
    value: float


@dataclass
class EvalReport:
    profile: Profile
    classes: Tuple[str, ...]
    tiers: Tuple[str, ...]
    ap: List[APEntry]
    mean_ap: List[MAPEntry]
    curves: Dict[Tuple[str, float, str], PRCurve] = field(default_factory=dict, repr=False)
    mtp: Dict[str, Optional[float]] = field(default_factory=dict)
    tp_per_class: Dict[str, Dict[str, Optional[float]]] = field(default_factory=dict)
    tp_available: Dict[str, bool] = field(default_factory=dict)
    nds: Optional[float] = None
    nds_metrics: Tuple[str, ...] = ()

    def ap_value(self, class_name: str, threshold: float, tier: str) -> float:
        for e in self.ap:
            if e.class_name == class_name and e.threshold == threshold and e.tier == tier:
                return e.ap
        raise KeyError((class_name, threshold, tier))

    @property
    def headline_map(self) -> float:
        """mAP over every class and threshold of the first tier."""
        tier = self.tiers[0]
        values = [e.ap for e in self.ap if e.tier == tier]
        return float(np.mean(values)) if values else 0.0


def class_curves(fs: FrameSet, family: str, threshold: float, tier: str,
                 classes: Sequence[str],
                 qualities: Optional[Sequence[np.ndarray]] = None) -> Dict[str, Tuple[PRCurve, int]]:
    """PR curve and detection count per class at one threshold and tier."""
    if qualities is None:
        qualities = [quality_matrix(f, family) for f in fs.frames]
    out = {}
    for name in classes:
        cfg = MatcherConfig(family, threshold, name, tier)
        results = match_frameset(fs, cfg, qualities)
        curve = pr_curve(results)
        n_det = sum(len(r.matches) for r in results)
        out[name] = (curve, n_det)
    return out


def _eval_task(fs: FrameSet, profile: Profile, classes, threshold, tier, qualities=None):
    curves = class_curves(fs, profile.metric_family, threshold, tier, classes, qualities)
    entries = []
    for name in classes:
        curve, n_det = curves[name]
        entries.append((APEntry(name, threshold, tier, average_precision(curve, profile.ap_style),
                                curve.n_gt, n_det), curve))
    return entries


def _recall_filtered_mean(errors: Sequence[float], n_gt: int, min_recall: float = 0.1,
                          n_points: int = 101) -> float:
    """Devkit-style TP error: running mean over confidence-ordered TPs, averaged over recall >= min_recall."""
    errors = np.asarray(errors, dtype=float)
    recall = np.arange(1, len(errors) + 1) / n_gt
    if recall[-1] < min_recall:
        return 1.0
    running = np.cumsum(errors) / np.arange(1, len(errors) + 1)
    grid = np.linspace(0.0, 1.0, n_points)
    grid = grid[(grid >= min_recall) & (grid <= recall[-1])]
    return float(np.interp(grid, recall, running).mean())


def tp_metric_summary(fs: FrameSet, classes: Sequence[str], tp_threshold: float,
                      recall_filtered: bool = False):
    """Per-class and mean TP errors at the TP matching threshold.

    Returns (per_class, mean, availability). A class with ground truth but no
    matches scores 1 on every available metric.
    """
    qualities = [quality_matrix(f, CENTER_DISTANCE) for f in fs.frames]
    available = {k: True for k in TP_METRICS}
    for frame in fs.frames:
        for rec in list(frame.detections) + [g for g in frame.gts if not g.ignore and g.box is not None]:
            if rec.class_name not in classes:
                continue
            if rec.velocity is None:
                available["AVE"] = False
            if rec.attribute is None:
                available["AAE"] = False
    per_class = {}
    for name in classes:
        cfg = MatcherConfig(CENTER_DISTANCE, tp_threshold, name, ALL_TIER)
        results = [match_frame(frame.detections, frame.gts, cfg, frame.frame_id, k, quality=qualities[k])
                   for k, frame in enumerate(fs.frames)]
        ranked = [(r, m) for r, m in ranked_matches(results) if m.tp]
        pairs = [(fs.frames[r.frame_index].detections[m.det_index], fs.frames[r.frame_index].gts[m.gt_index])
                 for r, m in ranked]
        samples = tp_errors(pairs)
        n_gt = sum(r.n_gt for r in results)
        row = {}
        for k in TP_METRICS:
            if not available[k]:
                row[k] = None
            elif not pairs:
                row[k] = 1.0
            elif recall_filtered:
                row[k] = _recall_filtered_mean(samples.samples[k], n_gt)
            else:
                row[k] = samples.mean(k)
        per_class[name] = row
    mean = {}
    for k in TP_METRICS:
        vals = [per_class[c][k] for c in classes]
        mean[k] = float(np.mean(vals)) if available[k] and vals else None
    return per_class, mean, available


def evaluate(fs: FrameSet, profile: Profile, classes: Optional[Sequence[str]] = None,
             jobs: int = 1) -> EvalReport:
    """AP per (class, threshold, tier), mAP, and for distance profiles TP metrics and NDS."""
    from detdiag.parallel import parallel_map

    classes = resolve_classes(fs, classes)
    tiers = effective_tiers(fs, profile)
    tasks = [(t, tier) for tier in tiers for t in profile.thresholds]
    results = parallel_map(_eval_task, [(fs, profile, classes, t, tier) for t, tier in tasks], jobs)

    ap_entries = []
    curves = {}
    for chunk in results:
        for entry, curve in chunk:
            ap_entries.append(entry)
            curves[(entry.class_name, entry.threshold, entry.tier)] = curve

    mean_ap = []
    for tier in tiers:
        if profile.metric_family == CENTER_DISTANCE:
            vals = [e.ap for e in ap_entries if e.tier == tier]
            mean_ap.append(MAPEntry(None, tier, float(np.mean(vals))))
        else:
            for t in profile.thresholds:
                vals = [e.ap for e in ap_entries if e.tier == tier and e.threshold == t]
                mean_ap.append(MAPEntry(t, tier, float(np.mean(vals))))

    report = EvalReport(profile, classes, tiers, ap_entries, mean_ap, curves)
    if profile.tp_threshold is not None:
        per_class, mean, available = tp_metric_summary(fs, classes, profile.tp_threshold,
                                                       profile.recall_filtered_tp)
        report.tp_per_class = per_class
        report.mtp = mean
        report.tp_available = available
        used = tuple(k for k in NDS_METRICS if available[k])
        report.nds_metrics = used
        map_value = next(m.value for m in mean_ap if m.threshold is None and m.tier == tiers[0])
        report.nds = nds(map_value, {k: mean[k] for k in used})
    return report
