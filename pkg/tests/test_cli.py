import json

import pytest

from detdiag.cli import EXIT_INPUT, EXIT_INTERNAL, EXIT_OK, EXIT_USAGE, OUT_ENV, main
from detdiag.dataset_io import save_canonical_json
from detdiag.synthlab import Injection, SceneRecipe, generate


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return json.loads(err[0])


@pytest.fixture
def scene_file(tmp_path):
    fs, _ = generate(SceneRecipe(seed=5, n_frames=2, score_mode="interleaved",
                                 injections=(Injection("center_jitter"), Injection("add_background_fp"))))
    path = tmp_path / "scene.json"
    path.write_text(save_canonical_json(fs))
    return path


def test_generate_then_diagnose_perfect(tmp_path):
    assert main(["generate", "--seed", "2", "--out", str(tmp_path / "g")]) == EXIT_OK
    ledger = json.loads((tmp_path / "g" / "expected_ledger.json").read_text())
    assert set(ledger["counts"].values()) == {0}
    assert main(["diagnose", str(tmp_path / "g" / "scene.json"), "--out", str(tmp_path / "d")]) == EXIT_OK
    doc = json.loads((tmp_path / "d" / "diagnosis.json").read_text())
    assert doc["schema_version"] == 1
    for e in doc["result"]["entries"]:
        assert e["baseline_ap"] == 1.0
        assert set(e["delta_ap"].values()) == {0.0}


def test_generate_from_recipe(tmp_path):
    recipe = tmp_path / "r.json"
    recipe.write_text(json.dumps({"n_frames": 2, "injections": [{"kind": "add_background_fp", "count": 3}]}))
    assert main(["generate", "--recipe", str(recipe), "--seed", "1", "--out", str(tmp_path)]) == EXIT_OK
    assert json.loads((tmp_path / "expected_ledger.json").read_text())["counts"]["bkg"] == 3


def test_all_formats(tmp_path, scene_file):
    out = tmp_path / "o"
    code = main(["diagnose", str(scene_file), "--profile", "nuscenes", "--format", "json,csv,svg",
                 "--out", str(out)])
    assert code == EXIT_OK
    names = {p.name for p in out.iterdir()}
    assert {"diagnosis.json", "diagnosis.csv", "errors_all.svg"} <= names
    assert any(n.startswith("ranking_pr_") for n in names)
    assert main(["eval", str(scene_file), "--format", "csv,svg", "--out", str(out / "e")]) == EXIT_OK
    assert (out / "e" / "eval.csv").exists()


def test_env_out_dir(tmp_path, scene_file, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
    assert main(["eval", str(scene_file)]) == EXIT_OK
    assert (tmp_path / "env" / "eval.json").exists()


@pytest.mark.parametrize("argv", [
    [],
    ["eval"],
    ["eval", "x.json", "--profile", "waymo"],
    ["eval", "x.json", "--format", "png"],
    ["eval", "x.json", "--distance-thresholds", "1,2"],
    ["eval", "x.json", "--profile", "nuscenes", "--difficulty", "easy"],
    ["eval", "x.json", "--iou-thresholds", "1.5"],
    ["eval", "x.json", "--jobs", "0"],
])
def test_usage_errors(argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert error_line(capsys)["exit"] == EXIT_USAGE


def test_input_errors(tmp_path, capsys):
    assert main(["eval", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == EXIT_INPUT
    assert error_line(capsys)["error"] == "DatasetError"
    bad = tmp_path / "bad.json"
    bad.write_text('{"frames": [{"id": "0", "gts": [], "dets": [{"class": "Car"}]}]}')
    assert main(["eval", str(bad), "--out", str(tmp_path / "o")]) == EXIT_INPUT
    assert error_line(capsys)["error"] == "SchemaError"
    assert not (tmp_path / "o").exists() or not any((tmp_path / "o").iterdir())
    labels = tmp_path / "labels"
    labels.mkdir()
    (labels / "000000.txt").write_text("Car 0 0\n")
    assert main(["eval", "--gt", str(labels), "--out", str(tmp_path / "k")]) == EXIT_INPUT
    assert error_line(capsys)["error"] == "ParseError"


def test_invariant_violation_exit_code(tmp_path, scene_file, monkeypatch, capsys):
    import detdiag.cli as cli
    from detdiag.diagnosis import DiagnosisInvariantError

    def broken(*args, **kwargs):
        raise DiagnosisInvariantError("oracle lowered AP")

    monkeypatch.setattr(cli, "diagnose", broken)
    assert main(["diagnose", str(scene_file), "--out", str(tmp_path / "x")]) == EXIT_INTERNAL
    assert error_line(capsys)["exit"] == EXIT_INTERNAL


def test_convert_round_trip(corpus_dirs, tmp_path):
    gt_dir, pred_dir, corpus = corpus_dirs
    assert main(["convert", "--gt", str(gt_dir), "--pred", str(pred_dir), "--out", str(tmp_path / "c")]) == 0
    assert main(["convert", str(tmp_path / "c" / "scene.json"), "--out", str(tmp_path / "k")]) == 0
    for stem, (labels, preds) in corpus.items():
        assert (tmp_path / "k" / "label_2" / f"{stem}.txt").read_text() == labels
        assert (tmp_path / "k" / "pred" / f"{stem}.txt").read_text() == preds
