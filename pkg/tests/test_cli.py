import csv
import json

import pytest

from eolo.cli import main
from eolo.core import read_gmap


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, json.loads(out) if out.strip().startswith("{") else out


@pytest.fixture()
def dataset(tmp_path, capsys):
    d = tmp_path / "ds"
    code, summary = run(capsys, "synth", "--out", d, "--images", 5, "--input-size", 256, "--seed", 1,
                        "--overlap", 0.03, "--overlap-tol", 0.02)
    assert code == 0
    return d, summary


def test_synth_layout_and_summary(dataset):
    d, summary = dataset
    assert (d / "annotations.json").exists()
    assert len(list((d / "masks").glob("*.pgm"))) == summary["instances"]
    assert summary["images"] == 5 and summary["classes"] == 2
    assert summary["overlap_max_abs_error"] <= 0.02


def test_synth_overlap_target(tmp_path, capsys):
    code, summary = run(capsys, "synth", "--out", tmp_path / "o", "--images", 10, "--overlap", 0.3,
                        "--min-instances", 2, "--max-instances", 4)
    assert code == 0 and summary["overlapping_pairs"] > 0
    assert abs(summary["overlap_measured_mean"] - 0.3) <= 0.1
    assert summary["overlap_max_abs_error"] <= 0.1 + 1e-9


def test_synth_is_seeded(tmp_path, capsys):
    for name in ("a", "b"):
        run(capsys, "synth", "--out", tmp_path / name, "--images", 3, "--seed", 9)
    assert (tmp_path / "a" / "annotations.json").read_bytes() == (tmp_path / "b" / "annotations.json").read_bytes()


def test_encode_decode_eval_pipeline(dataset, tmp_path, capsys):
    d, summary = dataset
    code, enc = run(capsys, "encode", "--annotations", d, "--out", tmp_path / "enc")
    assert code == 0 and enc["centers"] == summary["instances"]
    folder = tmp_path / "enc" / "img00001"
    assert read_gmap(folder / "center.gmap").shape == (2, 32, 32)
    assert read_gmap(folder / "size.gmap").shape == (4, 32, 32)
    assert json.loads((folder / "centers.json").read_text())["image_id"] == 1

    code, dec = run(capsys, "decode", "--maps", tmp_path / "enc", "--out", tmp_path / "pred.json")
    assert code == 0 and dec["instances"] == summary["instances"]
    inst = json.loads((tmp_path / "pred.json").read_text())["images"][0]["instances"][0]
    assert list(inst) == ["class_id", "score", "box", "mask_rle"]

    code, ev = run(capsys, "eval", "--annotations", d, "--predictions", tmp_path / "pred.json")
    assert code == 0 and ev["mean_ap"] >= 0.95
    code, table = run(capsys, "eval", "--annotations", d, "--predictions", tmp_path / "pred.json", "--format", "table")
    assert table.splitlines()[0].split()[:4] == ["Method", "Backbone", "FPS", "AP"]


def test_decode_to_stdout_is_stable(dataset, tmp_path, capsys):
    d, _ = dataset
    run(capsys, "encode", "--annotations", d, "--out", tmp_path / "enc")
    first = run(capsys, "decode", "--maps", tmp_path / "enc", "--threads", 2)[1]
    second = run(capsys, "decode", "--maps", tmp_path / "enc")[1]
    assert first == second
    assert [img["image_id"] for img in first["images"]] == [1, 2, 3, 4, 5]


def test_fit_writes_traces_and_decodes(dataset, tmp_path, capsys):
    d, summary = dataset
    code, fit = run(capsys, "fit", "--annotations", d, "--out", tmp_path / "fit", "--steps", 80, "--figures")
    assert code == 0 and fit["all_decreased"]
    rows = list(csv.reader(open(tmp_path / "fit" / "trace_img00001.csv")))
    assert rows[0] == ["step", "l_center", "l_size", "l_boundary", "l_seg", "total"]
    assert len(rows) == 82
    assert (tmp_path / "fit" / "trace_img00001.png").stat().st_size > 0
    code, dec = run(capsys, "decode", "--maps", tmp_path / "fit", "--out", tmp_path / "p.json")
    assert code == 0 and dec["instances"] >= summary["instances"] - 1


def test_fit_divergence_exit_code(dataset, tmp_path, capsys):
    d, _ = dataset
    code, out = run(capsys, "fit", "--annotations", d, "--out", tmp_path / "fit", "--steps", 100, "--lr", 1e6)
    assert code == 3 and out["image_id"] == 1


def test_roundtrip_clean_and_noisy(dataset, tmp_path, capsys):
    d, _ = dataset
    code, clean = run(capsys, "roundtrip", "--annotations", d, "--report", tmp_path / "rep")
    assert code == 0 and clean["mean_ap"] >= 0.95 and clean["passed"]
    for name in ("eval.json", "table.txt", "ap_per_threshold.csv", "pr_curves.png"):
        assert (tmp_path / "rep" / name).exists()
    code, noisy = run(capsys, "roundtrip", "--annotations", d, "--noise", 0.05, "--nms", 0.5, "--min-ap", 0.99)
    assert noisy["noise"] == 0.05 and noisy["mean_ap"] <= clean["mean_ap"]
    assert code == (0 if noisy["mean_ap"] >= 0.99 else 1)


def test_roundtrip_kernel_choice(dataset, capsys):
    d, _ = dataset
    _, circle = run(capsys, "roundtrip", "--annotations", d, "--kernel", "circle")
    _, ellipse = run(capsys, "roundtrip", "--annotations", d, "--kernel", "ellipse")
    assert circle["kernel"] == "circle-gaussian" and ellipse["kernel"] == "ellipse-gaussian"


def test_bench_report(tmp_path, capsys):
    code, rep = run(capsys, "bench", "--iterations", 10, "--height", 16, "--width", 16, "--detections", 10,
                    "--report", tmp_path / "b")
    assert code == 0
    labels = [c["label"] for c in rep["cases"]]
    assert labels == ["base", "empty", "double"]
    assert rep["cases"][1]["n_detections"] == 0
    assert rep["cases"][0]["shape"] == [80, 16, 16]
    assert rep["scaling_ratio"] > 0 and (tmp_path / "b" / "bench.png").exists()


def test_input_errors_exit_2(tmp_path, capsys):
    assert main(["decode", "--maps", str(tmp_path / "missing")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    assert main(["encode", "--annotations", str(bad), "--out", str(tmp_path / "e")]) == 2
    assert main(["bench", "--iterations", "3"]) == 2


def test_env_defaults(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv("EOLO_CLASSES", "3")
    code, summary = run(capsys, "synth", "--out", tmp_path / "e", "--images", 1)
    assert code == 0 and summary["classes"] == 3
    monkeypatch.setenv("EOLO_SEED", "x")
    assert main(["synth", "--out", str(tmp_path / "f")]) == 2


def test_invalid_stride_rejected(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--out", "x", "--stride", "3"])
    assert exc.value.code == 2
