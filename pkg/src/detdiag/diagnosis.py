"""Error taxonomy and oracle-based AP attribution.

Every false positive gets exactly one of five tags (classification,
localization, both, duplication, background); unmatched ground truths that no
classification or localization error points at are missed. Each error type is
weighed by the AP gained when only that type is fixed on the untouched
baseline, plus a ranking oracle that orders true positives ahead of false
positives, and three partial localization fixes (center, size, heading).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from detdiag.dataset_io import ALL_TIER, Detection, Frame, FrameSet, qualifies
from detdiag.metrics import (
    AP40, AP_DISTANCE, CENTER_DISTANCE, IOU3D, MatcherConfig, MatchResult,
    NDS_METRICS, PRCurve, Profile, QualityCache, average_precision, effective_tiers,
    match_frameset, match_quality, nds, pr_curve, pr_curve_from_flags, quality_threshold,
    ranked_matches, resolve_classes, tp_metric_summary,
)

CLS, LOC, BOTH, DUP, BKG, MISS, RANK = "cls", "loc", "both", "dup", "bkg", "miss", "rank"
FP_TAGS = (CLS, LOC, BOTH, DUP, BKG)
ERROR_TYPES = FP_TAGS + (MISS,)
ORACLES = FP_TAGS + (MISS, RANK)
LOCATION, DIMENSION, ORIENTATION = "location", "dimension", "orientation"
SUB_ORACLES = (LOCATION, DIMENSION, ORIENTATION)

ORACLE_LABELS = {
    CLS: "classification", LOC: "localization", BOTH: "cls+loc", DUP: "duplication",
    BKG: "background", MISS: "missing", RANK: "ranking",
}

# Oracles may not lower AP; anything below this is a bug, not float noise.
MONOTONE_TOL = 1e-9


class DiagnosisError(ValueError):
    pass


@dataclass(frozen=True)
class DiagnosisConfig:
    metric_family: str
    t_p: float
    t_f: float
    tier: str = ALL_TIER
    ap_style: Optional[str] = None
    classes: Tuple[str, ...] = ()

    def __post_init__(self):
        MatcherConfig(self.metric_family, self.t_p, None, self.tier)
        if self.metric_family == IOU3D and not 0 < self.t_f < self.t_p:
            raise DiagnosisError(f"IoU foreground threshold must satisfy 0 < t_f < t_p, got "
                                 f"t_f={self.t_f}, t_p={self.t_p}")
        if self.metric_family == CENTER_DISTANCE and not self.t_f > self.t_p:
            raise DiagnosisError(f"distance foreground threshold must exceed t_p, got "
                                 f"t_f={self.t_f}, t_p={self.t_p}")
        if self.ap_style is None:
            object.__setattr__(self, "ap_style", AP40 if self.metric_family == IOU3D else AP_DISTANCE)
        object.__setattr__(self, "classes", tuple(self.classes))

    @classmethod
    def for_profile(cls, profile: Profile, threshold: float, tier: str = ALL_TIER,
                    classes: Sequence[str] = (), tf: Optional[float] = None) -> "DiagnosisConfig":
        return cls(profile.metric_family, threshold, profile.tf if tf is None else tf, tier,
                   profile.ap_style, tuple(classes))

    @property
    def q_p(self) -> float:
        return quality_threshold(self.metric_family, self.t_p)

    @property
    def q_f(self) -> float:
        return quality_threshold(self.metric_family, self.t_f)

    def matcher(self, class_name: str) -> MatcherConfig:
        return MatcherConfig(self.metric_family, self.t_p, class_name, self.tier)


@dataclass(frozen=True)
class FPError:
    frame_index: int
    det_index: int
    class_name: str
    score: float
    tag: str
    target_gt: Optional[int]
    target_class: Optional[str]
    q_same: float
    q_other: float


@dataclass(frozen=True)
class MissedGT:
    frame_index: int
    gt_index: int
    class_name: str


@dataclass(frozen=True)
class ErrorLedger:
    fp_errors: Tuple[FPError, ...]
    missing: Tuple[MissedGT, ...]
    matched_gts: frozenset = frozenset()
    n_fp: int = 0

    def tagged(self, tag: str) -> List[FPError]:
        return [e for e in self.fp_errors if e.tag == tag]

    def counts(self, class_name: Optional[str] = None) -> Dict[str, int]:
        out = {t: 0 for t in ERROR_TYPES}
        for e in self.fp_errors:
            if class_name is None or e.class_name == class_name:
                out[e.tag] += 1
        for m in self.missing:
            if class_name is None or m.class_name == class_name:
                out[MISS] += 1
        return out


@dataclass
class Baseline:
    """Matches and AP per class for one (threshold, tier) setting."""
    cfg: DiagnosisConfig
    results: Dict[str, List[MatchResult]]
    curves: Dict[str, PRCurve]
    aps: Dict[str, float]


def _class_results(fs: FrameSet, cfg: DiagnosisConfig, cache: QualityCache):
    qualities = cache.for_frameset(fs)
    return {c: match_frameset(fs, cfg.matcher(c), qualities) for c in cfg.classes}


def class_aps(fs: FrameSet, cfg: DiagnosisConfig, cache: Optional[QualityCache] = None) -> Dict[str, float]:
    cache = cache or QualityCache(cfg.metric_family)
    results = _class_results(fs, cfg, cache)
    return {c: average_precision(pr_curve(r), cfg.ap_style) for c, r in results.items()}


def compute_baseline(fs: FrameSet, cfg: DiagnosisConfig, cache: Optional[QualityCache] = None) -> Baseline:
    cache = cache or QualityCache(cfg.metric_family)
    results = _class_results(fs, cfg, cache)
    curves = {c: pr_curve(r) for c, r in results.items()}
    aps = {c: average_precision(curves[c], cfg.ap_style) for c in curves}
    return Baseline(cfg, results, curves, aps)


def _best(q_row: np.ndarray, candidates: Sequence[int]) -> Tuple[float, Optional[int]]:
    best_q, best_j = -math.inf, None
    for j in candidates:
        if q_row[j] > best_q:
            best_q, best_j = float(q_row[j]), j
    return best_q, best_j


def classify_errors(fs: FrameSet, cfg: DiagnosisConfig, baseline: Optional[Baseline] = None,
                    cache: Optional[QualityCache] = None) -> ErrorLedger:
    """Tag every false positive and collect missed ground truths.

    Precedence: classification, localization, both, duplication, background.
    Qualities are taken against tier-active ground truths only.
    """
    cache = cache or QualityCache(cfg.metric_family)
    if baseline is None:
        baseline = compute_baseline(fs, cfg, cache)
    q_p, q_f = cfg.q_p, cfg.q_f

    fp_errors = []
    n_fp = 0
    matched = set()
    unmatched = []
    for class_name in cfg.classes:
        for r in baseline.results[class_name]:
            frame = fs.frames[r.frame_index]
            q = cache.get(frame)
            eligible = [j for j, g in enumerate(frame.gts) if qualifies(g, cfg.tier)]
            same = [j for j in eligible if frame.gts[j].class_name == class_name]
            other = [j for j in eligible if frame.gts[j].class_name != class_name]
            n_fp += r.n_fp
            for m in r.matches:
                if m.tp:
                    matched.add((r.frame_index, m.gt_index))
                if m.tp or m.ignored:
                    continue
                q_same, j_same = _best(q[m.det_index], same)
                q_other, j_other = _best(q[m.det_index], other)
                if q_other >= q_p:
                    tag, target = CLS, j_other
                elif q_f <= q_same < q_p:
                    tag, target = LOC, j_same
                elif q_f <= q_other < q_p and q_same < q_f:
                    tag, target = BOTH, j_other
                elif q_same >= q_p:
                    tag, target = DUP, j_same
                else:
                    tag, target = BKG, None
                fp_errors.append(FPError(
                    r.frame_index, m.det_index, class_name, m.score, tag, target,
                    frame.gts[target].class_name if target is not None else None, q_same, q_other,
                ))
            unmatched.extend((r.frame_index, j, class_name) for j in r.unmatched_gts)

    covered = {(e.frame_index, e.target_gt) for e in fp_errors if e.tag in (CLS, LOC)}
    missing = tuple(MissedGT(f, j, c) for f, j, c in unmatched if (f, j) not in covered)
    fp_errors.sort(key=lambda e: (e.frame_index, e.det_index))
    return ErrorLedger(tuple(fp_errors), missing, frozenset(matched), n_fp)


def _fixed_box(det: Detection, target, oracle: str):
    box = det.box
    if oracle == LOC:
        return target
    if oracle == LOCATION:
        return box.replace(cx=target.cx, cy=target.cy, cz=target.cz)
    if oracle == DIMENSION:
        return box.replace(length=target.length, width=target.width, height=target.height)
    if oracle == ORIENTATION:
        return box.replace(yaw=target.yaw)
    raise DiagnosisError(f"no box fix for oracle {oracle!r}")


def apply_oracle(fs: FrameSet, ledger: ErrorLedger, oracle: str,
                 cfg: Optional[DiagnosisConfig] = None) -> FrameSet:
    """Return a new FrameSet with one error type fixed; ``fs`` is never modified.

    Corrected detections whose target ground truth is already claimed (by a
    baseline true positive or a higher-scoring corrected detection) are
    deleted as duplicates.
    """
    if oracle == RANK:
        raise DiagnosisError("the ranking oracle reorders detections; use ranking_oracle()")
    frames = list(fs.frames)

    if oracle in (BOTH, DUP, BKG):
        doomed: Dict[int, set] = {}
        for e in ledger.tagged(oracle):
            doomed.setdefault(e.frame_index, set()).add(e.det_index)
        for k, drop in doomed.items():
            f = frames[k]
            frames[k] = Frame(f.frame_id, tuple(d for i, d in enumerate(f.detections) if i not in drop), f.gts)
        return fs.with_frames(frames)

    if oracle == MISS:
        doomed = {}
        for m in ledger.missing:
            doomed.setdefault(m.frame_index, set()).add(m.gt_index)
        for k, drop in doomed.items():
            f = frames[k]
            frames[k] = Frame(f.frame_id, f.detections, tuple(g for j, g in enumerate(f.gts) if j not in drop))
        return fs.with_frames(frames)

    if oracle == CLS:
        errors = ledger.tagged(CLS)
    elif oracle in (LOC,) + SUB_ORACLES:
        errors = ledger.tagged(LOC)
    else:
        raise DiagnosisError(f"unknown oracle {oracle!r}")
    if oracle in SUB_ORACLES and cfg is None:
        raise DiagnosisError("partial localization oracles need the diagnosis config")

    claimed = set(ledger.matched_gts)
    edits: Dict[int, Dict[int, Optional[Detection]]] = {}
    for e in sorted(errors, key=lambda e: (-e.score, e.frame_index, e.det_index)):
        frame = fs.frames[e.frame_index]
        det = frame.detections[e.det_index]
        target = frame.gts[e.target_gt]
        key = (e.frame_index, e.target_gt)
        if oracle == CLS:
            fixed = replace(det, class_name=target.class_name)
            reaches = True
        else:
            fixed = replace(det, box=_fixed_box(det, target.box, oracle))
            reaches = oracle == LOC or (
                match_quality(fixed.box, target.box, cfg.metric_family) >= cfg.q_p)
        if reaches and key in claimed:
            fixed = None
        elif reaches:
            claimed.add(key)
        edits.setdefault(e.frame_index, {})[e.det_index] = fixed

    for k, changes in edits.items():
        f = frames[k]
        dets = []
        for i, d in enumerate(f.detections):
            if i in changes:
                if changes[i] is not None:
                    dets.append(changes[i])
            else:
                dets.append(d)
        frames[k] = Frame(f.frame_id, tuple(dets), f.gts)
    return fs.with_frames(frames)


def _oracle_aps(fs, cfg, ledger, oracle, cache) -> Dict[str, float]:
    return class_aps(apply_oracle(fs, ledger, oracle, cfg), cfg, cache)


def delta_ap(fs: FrameSet, cfg: DiagnosisConfig, oracle: str) -> float:
    """AP gain (averaged over ``cfg.classes``) from fixing one error type."""
    cache = QualityCache(cfg.metric_family)
    baseline = compute_baseline(fs, cfg, cache)
    if oracle == RANK:
        return ranking_oracle(fs, cfg, baseline, cache)[0]
    ledger = classify_errors(fs, cfg, baseline, cache)
    after = _oracle_aps(fs, cfg, ledger, oracle, cache)
    return float(np.mean([after[c] - baseline.aps[c] for c in cfg.classes]))


def localization_suberrors(fs: FrameSet, cfg: DiagnosisConfig, ledger: Optional[ErrorLedger] = None,
                           cache: Optional[QualityCache] = None,
                           baseline: Optional[Baseline] = None) -> Dict[str, Optional[Dict[str, float]]]:
    """Per-class AP gain of the center-only, size-only and heading-only fixes.

    Under center-distance matching size and heading cannot change a match, so
    those two report ``None``.
    """
    cache = cache or QualityCache(cfg.metric_family)
    baseline = baseline or compute_baseline(fs, cfg, cache)
    ledger = ledger or classify_errors(fs, cfg, baseline, cache)
    out = {}
    for sub in SUB_ORACLES:
        if cfg.metric_family == CENTER_DISTANCE and sub != LOCATION:
            out[sub] = None
            continue
        after = _oracle_aps(fs, cfg, ledger, sub, cache)
        out[sub] = {c: after[c] - baseline.aps[c] for c in cfg.classes}
    return out


def ranking_oracle(fs: FrameSet, cfg: DiagnosisConfig, baseline: Optional[Baseline] = None,
                   cache: Optional[QualityCache] = None):
    """Re-rank by localization quality and keep the baseline assignment.

    True positives come first ordered by matched quality, then false
    positives by their best quality against any tier-active ground truth;
    ties fall back to confidence and input order. Returns the mean AP gain and
    ``{class: (before, after)}`` curves.
    """
    cache = cache or QualityCache(cfg.metric_family)
    baseline = baseline or compute_baseline(fs, cfg, cache)
    curves = {}
    deltas = []
    for c in cfg.classes:
        keyed = []
        for r, m in ranked_matches(baseline.results[c]):
            if m.tp:
                quality = m.quality
            else:
                frame = fs.frames[r.frame_index]
                q = cache.get(frame)
                eligible = [j for j, g in enumerate(frame.gts) if qualifies(g, cfg.tier)]
                quality = max((float(q[m.det_index, j]) for j in eligible), default=-math.inf)
            keyed.append(((0 if m.tp else 1, -quality, -m.score, r.frame_index, m.det_index), m))
        keyed.sort(key=lambda x: x[0])
        after = pr_curve_from_flags([m.score for _, m in keyed], [m.tp for _, m in keyed],
                                    baseline.curves[c].n_gt)
        curves[c] = (baseline.curves[c], after)
        deltas.append(average_precision(after, cfg.ap_style) - baseline.aps[c])
    return float(np.mean(deltas)) if deltas else 0.0, curves


# --------------------------------------------------------------------------
# Full diagnosis

@dataclass
class DiagnosisEntry:
    class_name: str
    threshold: Optional[float]
    tier: str
    baseline_ap: float
    delta_ap: Dict[str, float]
    sub_delta_ap: Dict[str, Optional[float]]
    counts: Dict[str, int]
    pr_before: Optional[PRCurve] = field(default=None, repr=False)
    pr_after: Optional[PRCurve] = field(default=None, repr=False)

    @property
    def oracle_ap(self) -> Dict[str, float]:
        return {o: self.baseline_ap + d for o, d in self.delta_ap.items()}


@dataclass
class DiagnosisReport:
    profile: str
    metric_family: str
    ap_style: str
    t_f: float
    classes: Tuple[str, ...]
    tiers: Tuple[str, ...]
    thresholds: Tuple[float, ...]
    entries: List[DiagnosisEntry]
    aggregate: Optional[DiagnosisEntry] = None
    baseline_nds: Optional[float] = None
    delta_nds: Optional[Dict[str, float]] = None
    nds_metrics: Tuple[str, ...] = ()

    def entry(self, class_name: str, threshold: float, tier: str) -> DiagnosisEntry:
        for e in self.entries:
            if e.class_name == class_name and e.threshold == threshold and e.tier == tier:
                return e
        raise KeyError((class_name, threshold, tier))

    def check_invariants(self) -> None:
        """Raise if any oracle lowered AP or the FP partition is inconsistent."""
        for e in self.entries + ([self.aggregate] if self.aggregate else []):
            for o, d in e.delta_ap.items():
                if d < -MONOTONE_TOL:
                    raise DiagnosisInvariantError(
                        f"oracle {o} lowered AP by {-d:.3g} for {e.class_name}/{e.threshold}/{e.tier}")


class DiagnosisInvariantError(RuntimeError):
    pass


def _diagnose_group(fs: FrameSet, cfg: DiagnosisConfig) -> Tuple[List[DiagnosisEntry], ErrorLedger]:
    cache = QualityCache(cfg.metric_family)
    baseline = compute_baseline(fs, cfg, cache)
    ledger = classify_errors(fs, cfg, baseline, cache)
    oracle_aps = {o: _oracle_aps(fs, cfg, ledger, o, cache) for o in ERROR_TYPES}
    subs = localization_suberrors(fs, cfg, ledger, cache, baseline)
    _, rank_curves = ranking_oracle(fs, cfg, baseline, cache)

    entries = []
    for c in cfg.classes:
        base = baseline.aps[c]
        deltas = {o: oracle_aps[o][c] - base for o in ERROR_TYPES}
        before, after = rank_curves[c]
        deltas[RANK] = average_precision(after, cfg.ap_style) - base
        deltas = {o: deltas[o] for o in ORACLES}
        sub = {s: (subs[s][c] if subs[s] is not None else None) for s in SUB_ORACLES}
        entries.append(DiagnosisEntry(c, cfg.t_p, cfg.tier, base, deltas, sub, ledger.counts(c),
                                      before, after))
    return entries, ledger


def _nds_deltas(fs: FrameSet, cfg: DiagnosisConfig, profile: Profile, classes, mean_ap: float,
                map_deltas: Dict[str, float]):
    """Baseline NDS and NDS gain per oracle, TP errors re-measured on the corrected set."""
    _, base_mtp, available = tp_metric_summary(fs, classes, profile.tp_threshold, profile.recall_filtered_tp)
    used = tuple(k for k in NDS_METRICS if available[k])
    base_nds = nds(mean_ap, {k: base_mtp[k] for k in used})
    cache = QualityCache(cfg.metric_family)
    baseline = compute_baseline(fs, cfg, cache)
    ledger = classify_errors(fs, cfg, baseline, cache)
    out = {}
    for o in ORACLES:
        mtp = base_mtp
        if o != RANK:
            _, mtp, _ = tp_metric_summary(apply_oracle(fs, ledger, o, cfg), classes,
                                          profile.tp_threshold, profile.recall_filtered_tp)
        map_o = min(1.0, max(0.0, mean_ap + map_deltas[o]))
        out[o] = nds(map_o, {k: mtp[k] for k in used}) - base_nds
    return base_nds, out, used


def diagnose(fs: FrameSet, profile: Profile, classes: Optional[Sequence[str]] = None,
             tf: Optional[float] = None, jobs: int = 1) -> DiagnosisReport:
    """Full error breakdown for every (class, threshold, tier) of ``profile``.

    Distance profiles additionally get an all-category aggregate (mean over
    classes and thresholds) with mAP and NDS deltas.
    """
    from detdiag.parallel import parallel_map

    classes = resolve_classes(fs, classes)
    tiers = effective_tiers(fs, profile)
    cfgs = [DiagnosisConfig.for_profile(profile, t, tier, classes, tf)
            for tier in tiers for t in profile.thresholds]
    groups = parallel_map(_diagnose_group, [(fs, cfg) for cfg in cfgs], jobs)
    entries = [e for group, _ in groups for e in group]
    report = DiagnosisReport(profile.name, profile.metric_family, profile.ap_style,
                             cfgs[0].t_f, classes, tiers, profile.thresholds, entries)

    if profile.metric_family == CENTER_DISTANCE:
        tier = tiers[0]
        rows = [e for e in entries if e.tier == tier]
        baseline_map = float(np.mean([e.baseline_ap for e in rows]))
        deltas = {o: float(np.mean([e.delta_ap[o] for e in rows])) for o in ORACLES}
        subs = {s: (float(np.mean([e.sub_delta_ap[s] for e in rows]))
                    if all(e.sub_delta_ap[s] is not None for e in rows) else None)
                for s in SUB_ORACLES}
        count_threshold = min(profile.thresholds,
                              key=lambda t: abs(t - (profile.tp_threshold or t)))
        counts = {t: 0 for t in ERROR_TYPES}
        for e in rows:
            if e.threshold == count_threshold:
                for t in ERROR_TYPES:
                    counts[t] += e.counts[t]
        report.aggregate = DiagnosisEntry("all", None, tier, baseline_map, deltas, subs, counts)
        if profile.tp_threshold is not None:
            nds_cfg = DiagnosisConfig.for_profile(profile, profile.tp_threshold, tier, classes, tf)
            base_nds, delta_nds, used = _nds_deltas(fs, nds_cfg, profile, classes, baseline_map, deltas)
            report.baseline_nds = base_nds
            report.delta_nds = delta_nds
            report.nds_metrics = used
    return report
