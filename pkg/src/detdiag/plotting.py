"""SVG charts: error-share pies with sub-error bars, and before/after PR curves.

Figures are built on the object API (no pyplot state) and rendered with a
fixed hash salt and no timestamp, so identical inputs give identical bytes.
"""
from __future__ import annotations

import io
from typing import Optional

import matplotlib
from matplotlib.backends.backend_svg import FigureCanvasSVG
from matplotlib.figure import Figure

from detdiag.diagnosis import ORACLES, ORACLE_LABELS, SUB_ORACLES, DiagnosisEntry
from detdiag.metrics import PRCurve

PALETTE = {
    "cls": "#4c72b0", "loc": "#dd8452", "both": "#55a868", "dup": "#c44e52",
    "bkg": "#8172b3", "miss": "#937860", "rank": "#da8bc3",
}
SUB_PALETTE = {"location": "#dd8452", "dimension": "#e8ab7e", "orientation": "#f3cfb1"}
BEFORE_COLOR = "#4c72b0"
AFTER_COLOR = "#c44e52"

_RC = {
    "svg.hashsalt": "detdiag",
    "svg.fonttype": "none",
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _to_svg(fig: Figure) -> str:
    buf = io.StringIO()
    FigureCanvasSVG(fig)
    with matplotlib.rc_context(_RC):
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    return buf.getvalue()


def points(delta: float) -> str:
    """ΔAP as AP points, two decimals."""
    return f"{100.0 * delta:.2f}"


def render_error_chart(entry: DiagnosisEntry, title: Optional[str] = None) -> str:
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(7.0, 3.4))
        ax_pie, ax_bar = fig.subplots(1, 2, gridspec_kw={"width_ratios": [1.3, 1.0]})

        shares = [(o, max(0.0, entry.delta_ap.get(o, 0.0))) for o in ORACLES]
        shown = [(o, v) for o, v in shares if float(points(v)) > 0.0]
        if shown:
            wedges, _ = ax_pie.pie(
                [v for _, v in shown], colors=[PALETTE[o] for o, _ in shown],
                labels=[f"{ORACLE_LABELS[o]}\n{points(v)}" for o, v in shown],
                startangle=90, counterclock=False, wedgeprops={"linewidth": 0.8, "edgecolor": "white"})
            for w, (o, _) in zip(wedges, shown):
                w.set_gid(f"wedge-{o}")
        else:
            ax_pie.text(0.5, 0.5, "no errors", ha="center", va="center", transform=ax_pie.transAxes,
                        gid="no-errors")
        ax_pie.set_aspect("equal")
        ax_pie.axis("off")

        subs = [(s, entry.sub_delta_ap.get(s)) for s in SUB_ORACLES]
        xs = range(len(subs))
        heights = [100.0 * (v or 0.0) for _, v in subs]
        bars = ax_bar.bar(xs, heights, color=[SUB_PALETTE[s] for s, _ in subs], width=0.6)
        for b, (s, v) in zip(bars, subs):
            b.set_gid(f"bar-{s}")
            label = "n/a" if v is None else points(v)
            ax_bar.annotate(label, (b.get_x() + b.get_width() / 2, b.get_height()),
                            ha="center", va="bottom", xytext=(0, 2), textcoords="offset points")
        ax_bar.set_xticks(list(xs))
        ax_bar.set_xticklabels([s for s, _ in subs])
        ax_bar.set_ylabel("ΔAP (points)")
        ax_bar.set_ylim(0.0, max(1.0, max(heights) * 1.25))

        if title is None:
            thr = "" if entry.threshold is None else f" @ {entry.threshold:g}"
            title = f"{entry.class_name}{thr} ({entry.tier}), AP {points(entry.baseline_ap)}"
        fig.suptitle(title)
        fig.subplots_adjust(left=0.04, right=0.98, bottom=0.14, top=0.86, wspace=0.25)
        return _to_svg(fig)


def _step_and_envelope(ax, curve: PRCurve, color: str, label: str):
    if not curve.points:
        return
    r = [0.0] + list(curve.recalls)
    p = [curve.points[0].precision] + list(curve.precisions)
    ax.step(r, p, where="post", color=color, linewidth=0.9, alpha=0.55, label=f"{label} raw")
    env = []
    best = 0.0
    for value in reversed(p):
        best = max(best, value)
        env.append(best)
    env.reverse()
    ax.step(r, env, where="pre", color=color, linewidth=1.6, label=f"{label} interpolated")


def render_pr(before: PRCurve, after: Optional[PRCurve] = None, title: str = "") -> str:
    """Overlaid PR curves; an empty curve leaves only the axes."""
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(4.2, 3.4))
        ax = fig.subplots()
        _step_and_envelope(ax, before, BEFORE_COLOR, "before" if after is not None else "")
        if after is not None:
            _step_and_envelope(ax, after, AFTER_COLOR, "after")
        ax.set_xlim(0.0, 1.0)
        ax.set_ylim(0.0, 1.05)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        if title:
            ax.set_title(title)
        if ax.get_legend_handles_labels()[0]:
            ax.legend(loc="lower left", frameon=False, fontsize=7)
        fig.subplots_adjust(left=0.15, right=0.97, bottom=0.14, top=0.9)
        return _to_svg(fig)
