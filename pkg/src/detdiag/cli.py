"""detdiag command line.

    detdiag eval scene.json --profile nuscenes --out results/
    detdiag diagnose --gt label_2/ --pred results/data/ --profile kitti --format json,svg
    detdiag generate --recipe recipe.json --seed 3 --out synth/
    detdiag convert --gt label_2/ --pred results/data/ --out scene/

Errors go to stderr as one JSON line: {"error": ..., "exit": ..., "message": ...}.
Exit codes: 0 ok, 1 usage, 2 bad input, 3 internal invariant violated.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from detdiag import __version__
from detdiag.dataset_io import (
    ALL_TIER, TIERS, DatasetError, from_canonical, load_frameset, load_kitti_dirs,
    save_canonical_json, serialize_kitti,
)
from detdiag.diagnosis import DiagnosisError, DiagnosisInvariantError, diagnose
from detdiag.metrics import EvaluationError, evaluate, make_profile
from detdiag.report import (
    diagnosis_figures, diagnosis_rows, diagnosis_to_dict, dumps, envelope, eval_figures, eval_rows,
    eval_to_dict, to_csv, write_outputs,
)
from detdiag.synthlab import InfeasibleRecipe, SceneRecipe, generate

OUT_ENV = "DETDIAG_OUT_DIR"
DEFAULT_OUT = "detdiag_out"
FORMATS = ("json", "csv", "svg")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text: str) -> List[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _names(text: str) -> List[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="detdiag", description="3D detection evaluation and error diagnosis.")
    p.add_argument("--version", action="version", version=f"detdiag {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def inputs(sp):
        sp.add_argument("scene", nargs="?", help="canonical JSON scene")
        sp.add_argument("--gt", help="KITTI label directory")
        sp.add_argument("--pred", help="KITTI result directory")

    def common(sp):
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./{DEFAULT_OUT})")
        sp.add_argument("--format", default="json", type=_names,
                        help="comma-separated subset of json,csv,svg")

    for name in ("eval", "diagnose"):
        sp = sub.add_parser(name)
        inputs(sp)
        common(sp)
        sp.add_argument("--profile", choices=("kitti", "nuscenes"), default="kitti")
        sp.add_argument("--iou-thresholds", type=_floats)
        sp.add_argument("--distance-thresholds", type=_floats)
        sp.add_argument("--classes", type=_names)
        sp.add_argument("--difficulty", type=_names,
                        help="comma-separated subset of easy,moderate,hard,all")
        sp.add_argument("--jobs", type=int, default=1)
        if name == "diagnose":
            sp.add_argument("--tf", type=float, help="foreground threshold override")

    sp = sub.add_parser("generate")
    common(sp)
    sp.add_argument("--recipe", help="JSON recipe file")
    sp.add_argument("--seed", type=int)

    sp = sub.add_parser("convert")
    inputs(sp)
    common(sp)
    return p


def output_dir(arg: Optional[str]) -> Path:
    return Path(arg or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def _check_formats(formats: Sequence[str]) -> List[str]:
    bad = [f for f in formats if f not in FORMATS]
    if bad or not formats:
        raise UsageError(f"--format must be a non-empty subset of {','.join(FORMATS)}")
    return [f for f in FORMATS if f in formats]


def _load_input(args):
    if args.scene and (args.gt or args.pred):
        raise UsageError("give either a scene file or --gt/--pred, not both")
    if args.scene:
        return load_frameset(args.scene)
    if args.gt:
        return load_kitti_dirs(args.gt, args.pred)
    if args.pred:
        raise UsageError("--pred needs --gt")
    raise UsageError("no input: give a scene file or --gt")


def _profile(args):
    if args.profile == "kitti":
        if args.distance_thresholds:
            raise UsageError("--distance-thresholds does not apply to the kitti profile")
        thresholds = args.iou_thresholds
    else:
        if args.iou_thresholds:
            raise UsageError("--iou-thresholds does not apply to the nuscenes profile")
        thresholds = args.distance_thresholds
    tiers = None
    if args.difficulty:
        allowed = TIERS + (ALL_TIER,) if args.profile == "kitti" else (ALL_TIER,)
        bad = [d for d in args.difficulty if d not in allowed]
        if bad:
            raise UsageError(f"unknown difficulty {bad[0]!r} for profile {args.profile}")
        tiers = args.difficulty
    tf = getattr(args, "tf", None)
    try:
        return make_profile(args.profile, thresholds, tiers, tf)
    except EvaluationError as exc:
        raise UsageError(str(exc)) from None


def _config_echo(args, profile) -> dict:
    return {
        "profile": profile.name,
        "metric_family": profile.metric_family,
        "thresholds": list(profile.thresholds),
        "tiers": list(profile.tiers),
        "classes": args.classes,
        "tf": profile.tf,
        "inputs": {"scene": args.scene, "gt": args.gt, "pred": args.pred},
    }


def cmd_eval(args) -> Dict[str, str]:
    formats = _check_formats(args.format)
    profile = _profile(args)
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    fs = _load_input(args)
    report = evaluate(fs, profile, args.classes, jobs=args.jobs)
    files = {}
    if "json" in formats:
        files["eval.json"] = dumps(envelope("eval", _config_echo(args, profile), eval_to_dict(report)))
    if "csv" in formats:
        files["eval.csv"] = to_csv(eval_rows(report))
    if "svg" in formats:
        files.update(eval_figures(report))
    return files


def cmd_diagnose(args) -> Dict[str, str]:
    formats = _check_formats(args.format)
    profile = _profile(args)
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    fs = _load_input(args)
    report = diagnose(fs, profile, args.classes, tf=args.tf, jobs=args.jobs)
    report.check_invariants()
    files = {}
    if "json" in formats:
        files["diagnosis.json"] = dumps(envelope("diagnose", _config_echo(args, profile),
                                                 diagnosis_to_dict(report)))
    if "csv" in formats:
        files["diagnosis.csv"] = to_csv(diagnosis_rows(report))
    if "svg" in formats:
        files.update(diagnosis_figures(report))
    return files


def cmd_generate(args) -> Dict[str, str]:
    doc = {}
    if args.recipe:
        try:
            doc = json.loads(Path(args.recipe).read_text())
        except OSError as exc:
            raise DatasetError(f"cannot read recipe: {exc}") from None
        except json.JSONDecodeError as exc:
            raise DatasetError(f"recipe is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise DatasetError("recipe must be a JSON object")
    if args.seed is not None:
        doc["seed"] = args.seed
    recipe = SceneRecipe.from_dict(doc)
    fs, ledger = generate(recipe)
    return {"scene.json": save_canonical_json(fs), "expected_ledger.json": dumps(ledger.to_dict())}


def cmd_convert(args) -> Dict[str, str]:
    fs = _load_input(args)
    if args.scene:
        files = {}
        has_dets = any(f.detections for f in fs.frames)
        for f in fs.frames:
            files[f"label_2/{f.frame_id}.txt"] = serialize_kitti([from_canonical(g) for g in f.gts])
            if has_dets:
                files[f"pred/{f.frame_id}.txt"] = serialize_kitti([from_canonical(d) for d in f.detections])
        return files
    return {"scene.json": save_canonical_json(fs)}


COMMANDS = {"eval": cmd_eval, "diagnose": cmd_diagnose, "generate": cmd_generate, "convert": cmd_convert}


def _fail(kind: str, code: int, message: str) -> int:
    line = json.dumps({"error": kind, "exit": code, "message": " ".join(str(message).split())})
    print(line, file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        files = COMMANDS[args.command](args)
        write_outputs(output_dir(args.out), files)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    except (DatasetError, InfeasibleRecipe, FileNotFoundError) as exc:
        return _fail(type(exc).__name__, EXIT_INPUT, exc)
    except (EvaluationError, DiagnosisError) as exc:
        return _fail(type(exc).__name__, EXIT_INPUT, exc)
    except DiagnosisInvariantError as exc:
        return _fail(type(exc).__name__, EXIT_INTERNAL, exc)
    except OSError as exc:
        return _fail(type(exc).__name__, EXIT_INPUT, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
