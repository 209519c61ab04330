import json
import math

import numpy as np
import pytest

from preimage.cli import (build_patch_domain, load_domain, main,
                          make_weight_fn, read_image, verify_result)
from preimage.engine import RunConfig, premap2
from preimage.model import Dense, Network, OutputSpec

from conftest import random_conv_net, toy_2d_net


def write_json(path, data):
    path.write_text(json.dumps(data))
    return str(path)


@pytest.fixture
def toy_files(tmp_path):
    model = write_json(tmp_path / "net.json", toy_2d_net(1).to_json())
    domain = write_json(tmp_path / "box.json",
                        {"lower": [-1.0, -1.0], "upper": [1.0, 1.0]})
    spec = write_json(tmp_path / "spec.json", {"C": [[1.0, -1.0]], "d": [0.0]})
    return model, domain, spec


# patch domains

def test_free_patch_counts():
    image = np.random.default_rng(0).random((32, 32, 3))
    lo, hi, mask = build_patch_domain(image, (0, 0, 3, 3), "free")
    free = lo < hi
    assert free.sum() == 27 and (~free).sum() == 3045
    assert np.all(lo[free] == 0) and np.all(hi[free] == 1)
    assert np.array_equal(lo[~free], image.reshape(-1)[~free])


def test_one_sided_mask_counts():
    image = np.random.default_rng(1).random((8, 8, 3)) * 0.9
    mask = np.zeros((8, 8), dtype=bool)
    mask[[0, 1, 2, 5, 7], [3, 3, 4, 0, 7]] = True
    lo, hi, _ = build_patch_domain(image, mask, "one-sided")
    raised = hi == 1.0
    assert raised.sum() == 15
    assert np.array_equal(lo, image.reshape(-1))
    assert np.array_equal(hi[~raised], image.reshape(-1)[~raised])


def test_empty_mask_is_degenerate_and_finishes():
    rng = np.random.default_rng(2)
    net = random_conv_net(rng, hw=4)
    image = rng.random((4, 4, 1))
    lo, hi, _ = build_patch_domain(image, np.zeros((4, 4), bool), "one-sided")
    assert np.array_equal(lo, hi)
    label = int(np.argmax(net.evaluate(lo[None])[0]))
    from preimage.model import class_dominance_spec
    res = premap2(net, lo, hi, class_dominance_spec(label, 3),
                  RunConfig(samples=50, bootstrap=0))
    assert res.iterations == 0 and res.box_volume == 0.0
    assert res.stop_reason == "threshold"


def test_patch_errors():
    image = np.zeros((4, 4, 1))
    with pytest.raises(ValueError):
        build_patch_domain(image, (2, 2, 3, 3))
    with pytest.raises(ValueError):
        build_patch_domain(image, np.zeros((3, 3), bool))
    with pytest.raises(ValueError):
        build_patch_domain(image, (0, 0, 1, 1), "two-sided")


# files

def test_read_plain_ppm(tmp_path):
    path = tmp_path / "img.ppm"
    path.write_text("P3\n# comment\n2 1\n255\n255 0 0  0 0 255\n")
    img = read_image(str(path))
    assert img.shape == (1, 2, 3)
    assert np.array_equal(img[0, 0], [1, 0, 0]) and np.array_equal(img[0, 1], [0, 0, 1])


def test_read_json_image_and_errors(tmp_path):
    good = write_json(tmp_path / "g.json", [[0.0, 0.5], [1.0, 0.25]])
    assert read_image(good).shape == (2, 2, 1)
    bad = write_json(tmp_path / "b.json", [[2.0]])
    with pytest.raises(ValueError):
        read_image(bad)
    trunc = tmp_path / "t.pgm"
    trunc.write_text("P2 2 2 255 1 2 3")
    with pytest.raises(ValueError):
        read_image(str(trunc))


def test_load_patch_domain_relative_image(tmp_path):
    (tmp_path / "imgs").mkdir()
    write_json(tmp_path / "imgs" / "a.json", np.full((4, 4), 0.5).tolist())
    dom = write_json(tmp_path / "imgs" / "dom.json",
                     {"type": "patch", "image": "a.json", "x": 1, "y": 1,
                      "w": 2, "h": 2})
    lo, hi, info = load_domain(dom)
    assert (lo < hi).sum() == 4 and info["mask"].sum() == 4


def test_load_box_domain_errors(tmp_path):
    with pytest.raises(ValueError):
        load_domain(write_json(tmp_path / "a.json", {"lower": [1.0], "upper": [0.0]}))
    with pytest.raises(ValueError):
        load_domain(write_json(tmp_path / "b.json", {"lower": [0.0], "upper": [1.0, 2.0]}))


def test_brightness_defaults_to_domain_image():
    image = np.full((2, 2, 1), 0.5)
    mask = np.array([[True, False], [False, False]])
    wf = make_weight_fn("brightness", [2, 2, 1], {"image": image, "mask": mask})
    x = image.reshape(1, -1).copy()
    x[0, 0] = 0.75
    assert wf(x)[0] == pytest.approx(0.5)


# runs

def test_linear_fixture_exits_zero(tmp_path):
    net = Network([Dense([[1.0, 2.0]], [0.5])], [2])
    model = write_json(tmp_path / "lin.json", net.to_json())
    domain = write_json(tmp_path / "box.json", {"lower": [-1, -1], "upper": [1, 1]})
    spec = write_json(tmp_path / "spec.json", {"C": [[1.0]], "d": [0.0]})
    out = tmp_path / "res.json"
    code = main(["--model", model, "--domain", domain, "--spec", spec,
                 "--mode", "under", "--threshold", "0.9", "--samples", "200",
                 "--bootstrap", "0", "--output", str(out)])
    assert code == 0
    assert json.loads(out.read_text())["totals"]["ratio"] == 1.0


def test_budget_exit_keeps_anytime_result(tmp_path, toy_files):
    model, domain, spec = toy_files
    out = tmp_path / "res.json"
    trace = tmp_path / "trace.jsonl"
    code = main(["--model", model, "--domain", domain, "--spec", spec,
                 "--threshold", "0.999", "--time-limit", "1e-6",
                 "--samples", "200", "--bootstrap", "0", "--output", str(out),
                 "--trace", str(trace)])
    assert code == 2
    doc = json.loads(out.read_text())
    assert doc["stop_reason"] == "time" and len(doc["leaves"]) >= 1
    lines = [json.loads(l) for l in trace.read_text().splitlines()]
    assert lines and lines[0]["iteration"] == 0


def test_error_exit(tmp_path, capsys):
    code = main(["--model", str(tmp_path / "missing.json"), "--domain", "x",
                 "--label", "0"])
    assert code == 1
    assert "error" in capsys.readouterr().err


def test_totals_recomputed_from_document(tmp_path, toy_files):
    model, domain, spec = toy_files
    out = tmp_path / "res.json"
    main(["--model", model, "--domain", domain, "--spec", spec, "--samples",
          "300", "--bootstrap", "100", "--iterations", "4", "--output", str(out)])
    doc = json.loads(out.read_text())
    box = math.prod(h - l for l, h in zip(doc["domain"]["lower"], doc["domain"]["upper"]))
    assert doc["totals"]["box_volume"] == box
    vp = math.fsum(box * math.prod(l["volume_chain"]) * l["f_P"] for l in doc["leaves"])
    vo = math.fsum(box * math.prod(l["volume_chain"]) * l["f_O"] for l in doc["leaves"])
    assert doc["totals"]["v_P"] == vp and doc["totals"]["v_O"] == vo
    r = doc["totals"]["ratio"]
    assert r == (vp / vo if vo > 0 else 1.0)
    lo, hi = doc["totals"]["ci_ratio"]
    assert lo <= hi


def test_label_flag_and_verification(tmp_path, toy_files):
    model, domain, _ = toy_files
    out = tmp_path / "res.json"
    code = main(["--model", model, "--domain", domain, "--label", "0",
                 "--samples", "300", "--bootstrap", "0", "--verify", "5000",
                 "--output", str(out)])
    doc = json.loads(out.read_text())
    assert code in (0, 2)
    assert doc["spec"] == {"C": [[1.0, -1.0]], "d": [0.0]}
    v = doc["verification"]
    assert v["points"] == 5000 and v["under_violations"] == 0 and v["unassigned"] == 0


def test_document_replays_identically(tmp_path, toy_files):
    model, domain, spec = toy_files
    args = ["--model", model, "--domain", domain, "--spec", spec, "--samples",
            "300", "--bootstrap", "100", "--iterations", "3", "--seed", "9"]
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    main(args + ["--output", str(a)])
    main(args + ["--output", str(b)])
    da, db = json.loads(a.read_text()), json.loads(b.read_text())
    da.pop("timings")
    db.pop("timings")
    assert da == db
    assert da["config"]["seed"] == 9


def test_verify_detects_unsound_plane():
    net = toy_2d_net(1)
    spec = OutputSpec([[1.0, -1.0]], [0.0])
    res = premap2(net, -np.ones(2), np.ones(2), spec,
                  RunConfig(samples=200, bootstrap=0, max_iterations=1))
    doc = res.to_document({"spec": spec.to_json()})
    assert verify_result(doc, net, 5000)["under_violations"] == 0
    for leaf in doc["leaves"]:
        leaf["plane"] = {"A": [[0.0, 0.0]], "b": [1.0]}
    assert verify_result(doc, net, 5000)["under_violations"] > 0
