import json
from pathlib import Path

import numpy as np
import pytest

import oracles as orc
from nuhyp.cli import EXIT_OK, EXIT_PRE, EXIT_USAGE, UsageError, main, read_config
from nuhyp.shadowing import PseudoOrbit

GOLDEN = Path(__file__).parent / "golden" / "cat_single_jump.json"


def load(path):
    return json.loads(Path(path).read_text())


def test_analyze_cat_full_density(tmp_path):
    assert main(["analyze", "--eps", "0.05", "--n", "1e5", "--out", str(tmp_path)]) == EXIT_OK
    res = load(tmp_path / "analyze.json")
    assert all(v["density"] == 1.0 for v in res["profile"]["levels"].values())
    assert res["config"]["system"] == "cat" and len(res["config_hash"]) == 16
    head = (tmp_path / "profile.csv").read_text().splitlines()[0]
    assert head == f"# config_hash={res['config_hash']}"


def test_bad_n_is_usage_error(tmp_path):
    assert main(["analyze", "--n", "0", "--out", str(tmp_path)]) == EXIT_USAGE


def test_unknown_command():
    assert main(["frobnicate"]) == EXIT_USAGE


def write_po(path, po):
    path.write_text(po.to_text())
    return str(path)


def test_shadow_true_orbit_file(tmp_path, cat):
    f, _ = cat
    pts = f.orbit_points(np.array([0.1234, 0.5678]), 40)[::10][:5]
    po = PseudoOrbit(pts, [10] * 5, 0.0)
    p = write_po(tmp_path / "po.txt", po)
    assert main(["shadow", "--po", p, "--n", "2e4", "--out", str(tmp_path)]) == EXIT_OK
    res = load(tmp_path / "shadow.json")
    for solver in ("constructive", "newton"):
        assert res[solver]["max_error"] <= 1e-12
    assert res["passed"]


def test_shadow_golden_file(tmp_path):
    g = load(GOLDEN)
    po = PseudoOrbit(np.array(g["points"]), [g["n_k"]] * (2 * g["K"] + 1), g["beta"])
    p = write_po(tmp_path / "po.txt", po)
    assert main(["shadow", "--po", p, "--n", "2e4", "--out", str(tmp_path)]) == EXIT_OK
    res = load(tmp_path / "shadow.json")
    for solver in ("constructive", "newton"):
        assert np.abs(orc.torus_diff(res[solver]["z"], g["z"])).max() <= g["tolerance"]


def test_malformed_po_is_precondition(tmp_path, capsys):
    p = tmp_path / "po.txt"
    p.write_text("-1 0.1 0.2 5\n0 0.1 0.2\n1 0.3 0.4 5\n")
    assert main(["shadow", "--po", str(p), "--n", "2e4", "--out", str(tmp_path)]) == EXIT_PRE
    assert "line 2" in capsys.readouterr().err


def test_empty_support_is_precondition(tmp_path):
    code = main(["horseshoe", "--n", "2e5", "--support-size", "0", "--out", str(tmp_path)])
    assert code == EXIT_PRE


def test_close_fixed_point(tmp_path):
    assert main(["close", "--x0", "0,0", "--period", "7", "--out", str(tmp_path)]) == EXIT_OK
    res = load(tmp_path / "close.json")
    cert = res["certificate"]
    assert cert["p"] == [0.0, 0.0] and cert["passed"]


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# analysis run\nsystem = cat\neps = 0.07   # overridden below\nn = 5000\nwindow = 50\n")
    out = tmp_path / "o"
    assert main(["analyze", "--config", str(cfg), "--eps", "0.06", "--out", str(out)]) == EXIT_OK
    conf = load(out / "analyze.json")["config"]
    assert conf["epsilon"] == 0.06 and conf["n"] == 5000 and conf["window"] == 50


def test_config_errors_carry_line_numbers(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("n = 100\n\nbogus = 1\n")
    with pytest.raises(UsageError, match="bad.cfg:3"):
        read_config(cfg)
    cfg.write_text("n 100\n")
    with pytest.raises(UsageError, match=":1:"):
        read_config(cfg)
    assert main(["analyze", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_USAGE


def test_hash_ignores_output_dir(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["analyze", "--n", "3000", "--out", str(d)]) == EXIT_OK
    assert load(a / "analyze.json")["config_hash"] == load(b / "analyze.json")["config_hash"]
    assert main(["analyze", "--n", "3001", "--out", str(a)]) == EXIT_OK
    assert load(a / "analyze.json")["config_hash"] != load(b / "analyze.json")["config_hash"]
