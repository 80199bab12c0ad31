import json
import subprocess
import sys

import pytest

from quadpose.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, main
from quadpose.synthgen import load_dataset


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ds, prior = root / "ds", root / "prior.qparch"
    assert main(["synth", "--out", str(ds), "--frames", "4", "--cameras", "2", "--cycles", "0.5",
                 "--jitter", "0", "--seed", "1"]) == EXIT_OK
    assert main(["train-prior", "--poses", str(ds / "poses.jsonl"), "--out", str(prior),
                 "--dedup", "0", "--maxiter", "100"]) == EXIT_OK
    return root


def test_synth_layout(work):
    ds = load_dataset(work / "ds")
    assert len(ds.samples) == 16                  # 4 frames x 2 cameras x mirror
    assert (work / "ds" / "heatmaps" / "cam01").is_dir()
    m = json.loads((work / "ds" / "manifest.json").read_text())
    assert m["n_frames"] == 4 and len(m["cameras"]) == 2


def test_predict_refine_eval(work, capsys):
    preds, out = work / "preds.json", work / "refined"
    assert main(["predict", "--dataset", str(work / "ds"), "--sigma-px", "2", "--sigma-depth",
                 "2", "--out", str(preds), "--heatmap-out", str(work / "hm")]) == EXIT_OK
    d = json.loads(preds.read_text())
    assert [e["frame"] for e in d["frames"]] == [0, 1, 2, 3]
    assert len(list((work / "hm").iterdir())) == 4
    assert main(["refine", "--dataset", str(work / "ds"), "--predictions", str(preds),
                 "--prior", str(work / "prior.qparch"), "--maxiter", "50",
                 "--out-dir", str(out)]) == EXIT_OK
    assert len((out / "poses.jsonl").read_text().splitlines()) == 4
    capsys.readouterr()
    assert main(["eval", "--dataset", str(work / "ds"), "--joints", str(out / "joints.json"),
                 "--out", str(work / "report.json")]) == EXIT_OK
    table = capsys.readouterr().out.splitlines()
    assert table[0].split()[0] == "group" and len(table) == 5
    rep = json.loads((work / "report.json").read_text())
    assert 0.0 <= rep["groups"]["All"]["pa_pck3d"] <= 1.0


def test_refine_with_alignment(work):
    preds = work / "preds0.json"
    assert main(["predict", "--dataset", str(work / "ds"), "--out", str(preds)]) == EXIT_OK
    assert main(["refine", "--dataset", str(work / "ds"), "--predictions", str(preds),
                 "--prior", str(work / "prior.qparch"), "--maxiter", "30", "--align",
                 "--match-policy", "mutual-repeat", "--out-dir", str(work / "al")]) == EXIT_OK


def test_pipeline_outputs(work):
    out = work / "pl"
    cfg = work / "cfg.json"
    cfg.write_text(json.dumps({"sigma_px": 1.0, "sigma_depth": 1.0, "maxiter": 50}))
    assert main(["pipeline", "--dataset", str(work / "ds"), "--config", str(cfg), "--prior",
                 str(work / "prior.qparch"), "--camera", "1", "--out-dir", str(out)]) == EXIT_OK
    for name in ("config.json", "summary.json", "report.json", "report.txt", "poses.jsonl"):
        assert (out / name).is_file()
    assert len(list((out / "overlays").glob("overlay_*.ppm"))) == 4
    saved = json.loads((out / "config.json").read_text())
    assert saved["camera_index"] == 1 and saved["sigma_px"] == 1.0


def test_fit_shape(work):
    model = work / "shape.qparch"
    assert main(["fit-shape", "--model", str(model), "--build", "6"]) == EXIT_OK
    preds = work / "preds.json"
    if not preds.exists():
        main(["predict", "--dataset", str(work / "ds"), "--out", str(preds)])
    assert main(["fit-shape", "--model", str(model), "--predictions", str(preds),
                 "--out-dir", str(work / "shape")]) == EXIT_OK
    assert any((work / "shape").iterdir())


@pytest.mark.parametrize("argv", [
    [],
    ["synth"],
    ["synth", "--out", "x", "--frames", "0"],
    ["predict", "--dataset", "/nonexistent", "--out", "p.json"],
    ["refine", "--dataset", "/nonexistent", "--predictions", "p", "--prior", "q",
     "--out-dir", "o"],
    ["train-prior", "--poses", "/nonexistent.jsonl", "--out", "p"],
])
def test_invalid_input_exit_code(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_INVALID


def test_bad_flag_values(work, tmp_path):
    ds, prior = str(work / "ds"), str(work / "prior.qparch")
    assert main(["pipeline", "--dataset", ds, "--prior", prior, "--lambda2d", "-1",
                 "--out-dir", str(tmp_path)]) == EXIT_INVALID
    assert main(["pipeline", "--dataset", ds, "--prior", prior, "--match-policy", "icp",
                 "--out-dir", str(tmp_path)]) == EXIT_INVALID
    assert main(["pipeline", "--dataset", ds, "--prior", prior, "--unknown-shape",
                 "--out-dir", str(tmp_path)]) == EXIT_INVALID
    assert main(["predict", "--dataset", ds, "--camera", "7", "--out",
                 str(tmp_path / "p.json")]) == EXIT_INVALID


def test_runtime_failure_exit_code(work, tmp_path):
    d = json.loads((work / "preds0.json").read_text()) if (work / "preds0.json").exists() else None
    if d is None:
        main(["predict", "--dataset", str(work / "ds"), "--out", str(work / "preds0.json")])
        d = json.loads((work / "preds0.json").read_text())
    for e in d["frames"]:
        p = e["prediction"]
        p["predicted"] = [False] * len(p["predicted"])
        p["confidence"] = [0.0] * len(p["confidence"])
    blind = tmp_path / "blind.json"
    blind.write_text(json.dumps(d))
    assert main(["refine", "--dataset", str(work / "ds"), "--predictions", str(blind),
                 "--prior", str(work / "prior.qparch"), "--out-dir", str(tmp_path)]) == EXIT_RUNTIME


def test_console_script_logs_key_value(work, tmp_path):
    r = subprocess.run([sys.executable, "-m", "quadpose.cli", "predict", "--dataset",
                        str(work / "ds"), "--out", str(tmp_path / "p.json")],
                       capture_output=True, text=True)
    assert r.returncode == EXIT_OK
    lines = [l for l in r.stderr.splitlines() if l]
    assert lines and all(l.startswith("level=") and "logger=" in l for l in lines)
    assert any("event=predict" in l for l in lines)
    r = subprocess.run([sys.executable, "-m", "quadpose.cli", "eval", "--dataset", "/nope",
                        "--joints", "/nope"], capture_output=True, text=True)
    assert r.returncode == EXIT_INVALID and "event=invalid_input" in r.stderr
