import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from fastmap.cli import main
from fastmap.container import read_array

SVG = "{http://www.w3.org/2000/svg}"


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def files(tmp_path):
    scene, preds = tmp_path / "scene.json", tmp_path / "preds.json"
    assert run("gen", "--seed", 7, "-o", scene, "--predictions", preds, "--quiet") == 0
    return tmp_path, scene, preds


def test_gen_five_instances_and_bytes(tmp_path, files):
    _, scene, _ = files
    again = tmp_path / "again.json"
    assert run("gen", "--seed", 7, "--dividers", 2, "--crossings", 1, "--boundaries", 2, "-o", again) == 0
    assert len(json.loads(scene.read_text())["instances"]) == 5
    assert scene.read_bytes() == again.read_bytes()
    manifest = json.loads((tmp_path / "scene.json.manifest.json").read_text())
    assert manifest["command"] == "gen" and manifest["seeds"] == {"scene": 7}


def test_gen_env_seed(tmp_path, monkeypatch, files):
    _, scene, _ = files
    monkeypatch.setenv("FASTMAP_SEED", "7")
    out = tmp_path / "env.json"
    assert run("gen", "-o", out) == 0
    assert out.read_bytes() == scene.read_bytes()


def test_gen_unwritable():
    assert run("gen", "--seed", 7, "-o", "/nonexistent/x") == 2


def test_bad_usage():
    assert run("gen") == 2
    assert run("bogus") == 2


def test_rasterize(files):
    tmp, scene, _ = files
    k1, k3, svg = tmp / "k1.fmhm", tmp / "k3.fmhm", tmp / "hm.svg"
    assert run("rasterize", scene, "--kernel", 1, "-o", k1) == 0
    assert run("rasterize", scene, "--kernel", 3, "--svg", svg, "-o", k3) == 0
    a, b = read_array(k1, b"FMHM"), read_array(k3, b"FMHM")
    assert b.shape == (3, 200, 100)
    assert np.count_nonzero(b) >= np.count_nonzero(a)
    assert ET.parse(svg).getroot().tag == SVG + "svg"


def test_rasterize_invalid_spec(files):
    tmp, scene, _ = files
    assert run("rasterize", scene, "--resolution", 0.7, "-o", tmp / "x.fmhm") == 2
    assert run("rasterize", scene, "--kernel", 2, "-o", tmp / "x.fmhm") == 2


def test_forward(files):
    tmp, scene, _ = files
    out, out2, pri = tmp / "f.json", tmp / "f2.json", tmp / "pri.fmsp"
    common = ["--seed", 3, "--n", 4, "--priors", 40, "--d", 8, "--heads", 2]
    assert run("forward", *common, "--dump-priors", pri, "-o", out) == 0
    assert run("forward", *common, "-o", out2) == 0
    assert out.read_bytes() == out2.read_bytes()
    assert len(json.loads(out.read_text())["instances"]) == 4
    assert read_array(pri, b"FMSP").shape[1] == 40


def test_forward_with_scene(files):
    tmp, scene, _ = files
    out = tmp / "fs.json"
    assert run("forward", "--scene", scene, "--n", 3, "--d", 8, "--heads", 2, "--priors", 30, "-o", out) == 0
    doc = json.loads(out.read_text())
    assert len(doc["instances"]) == 3 and len(doc["instances"][0]["points"]) == 20


def test_forward_bev_mismatch(tmp_path):
    from fastmap.container import write_array
    bev = tmp_path / "bev.fmhm"
    write_array(bev, np.zeros((8, 10, 10)))
    assert run("forward", "--bev", bev, "--d", 8, "--heads", 2, "-o", tmp_path / "o.json") == 2


def test_loss_identity_and_weights(files, capsys):
    tmp, scene, _ = files
    out = tmp / "loss.json"
    assert run("loss", scene, scene, "-o", out) == 0
    doc = json.loads(out.read_text())
    assert doc["stage2"]["L_pl"] == 0 and doc["stage2"]["L_pp"] == 0
    w = json.loads((tmp / "loss.json.manifest.json").read_text())["weights"]
    assert [w[k] for k in ("alpha_cls", "alpha_pl", "alpha_pp", "alpha_al", "alpha_heat")] == [2.0, 2.5, 2.5, 2.5, 0.6]


def test_loss_gradcheck(files, capsys):
    _, scene, preds = files
    assert run("loss", preds, scene, "--gradcheck") == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["gradcheck_max_rel_err"] < 1e-4


def test_loss_m_mismatch(tmp_path, files):
    _, scene, preds = files
    other = tmp_path / "m8.json"
    assert run("gen", "--seed", 7, "--m", 8, "-o", other) == 0
    assert run("loss", preds, other) == 2


def test_fit_zero_steps(files):
    tmp, scene, preds = files
    out = tmp / "fit.json"
    assert run("fit", preds, scene, "--steps", 0, "-o", out) == 0
    a = json.loads(out.read_text())["instances"]
    b = json.loads(preds.read_text())["instances"]
    assert [i["points"] for i in a] == [i["points"] for i in b]


def test_fit_trace(files):
    tmp, scene, preds = files
    out, trace = tmp / "fit.json", tmp / "trace.csv"
    assert run("fit", preds, scene, "--steps", 40, "--trace", trace, "-o", out) == 0
    rows = trace.read_text().splitlines()
    assert rows[0] == "step,loss" and len(rows) == 42
    losses = [float(r.split(",")[1]) for r in rows[1:]]
    assert sum(b <= a for a, b in zip(losses, losses[1:])) >= 0.95 * 40


def _eval_json(capsys, *argv):
    assert run("eval", *argv, "--quiet") == 0
    return json.loads(capsys.readouterr().out)


def test_eval_identity(files, capsys):
    _, scene, _ = files
    doc = _eval_json(capsys, scene, scene)
    assert [r["mAP"] for r in doc["ap"]] == [1.0, 1.0]
    assert doc["diagnostics"]["ACD"] == doc["diagnostics"]["ARD"] == doc["diagnostics"]["AJP"] == 0.0


def test_eval_empty_predictions(tmp_path, files, capsys):
    _, scene, _ = files
    empty = tmp_path / "empty.json"
    doc = json.loads(scene.read_text())
    doc["instances"] = []
    empty.write_text(json.dumps(doc))
    assert _eval_json(capsys, empty, scene)["ap"][0]["mAP"] == 0.0


def test_eval_strict_not_above_standard(files, capsys):
    _, scene, preds = files
    strict = _eval_json(capsys, preds, scene, "--set", "strict")["ap"][0]["mAP"]
    standard = _eval_json(capsys, preds, scene, "--set", "standard")["ap"][0]["mAP"]
    assert strict <= standard


def test_eval_table_and_csv(files, capsys):
    tmp, scene, preds = files
    assert run("eval", preds, scene, "--pr-csv", tmp / "pr.csv", "-o", tmp / "ap.json") == 0
    out = capsys.readouterr().out
    assert "AP_div" in out and "AP_ped" in out and "AP_bou" in out and "mAP" in out
    assert (tmp / "pr.csv").read_text().startswith("class")


def test_eval_unreadable(tmp_path):
    assert run("eval", tmp_path / "missing.json", tmp_path / "missing.json") == 2


def test_viz_paths_and_bytes(files):
    tmp, scene, preds = files
    a, b = tmp / "a.svg", tmp / "b.svg"
    assert run("viz", scene, preds, "-o", a) == 0
    assert run("viz", scene, preds, "-o", b) == 0
    assert a.read_bytes() == b.read_bytes()
    root = ET.parse(a).getroot()
    paths = root.findall(f".//{SVG}path")
    assert len(paths) == 10
    assert sum(1 for p in paths if p.get("stroke-dasharray")) == 5


def test_viz_overlays(files):
    tmp, scene, preds = files
    hm, pri, out = tmp / "hm.fmhm", tmp / "pri.fmsp", tmp / "o.svg"
    assert run("rasterize", scene, "-o", hm) == 0
    assert run("forward", "--n", 2, "--d", 8, "--heads", 2, "--priors", 12, "--dump-priors", pri, "-o", tmp / "f.json") == 0
    assert run("viz", "--gt", scene, "--heatmap", hm, "--priors", pri, "-o", out) == 0
    root = ET.parse(out).getroot()
    assert len(root.findall(f".//{SVG}circle")) == 12
    assert root.find(f".//{SVG}g[@class='heatmap']") is not None


def test_viz_empty_scene(tmp_path):
    empty = tmp_path / "empty.json"
    empty.write_text(json.dumps({"instances": []}))
    out = tmp_path / "e.svg"
    assert run("viz", empty, "-o", out) == 0
    root = ET.parse(out).getroot()
    assert root.findall(f".//{SVG}path") == []
    assert root.find(f".//{SVG}rect[@class='frame']") is not None
    assert len(root.findall(f".//{SVG}line")) > 0


def test_viz_unreadable(tmp_path):
    assert run("viz", tmp_path / "nope.json", "-o", tmp_path / "x.svg") == 2
