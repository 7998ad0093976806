import json

import pytest

from sdgames import cli
from sdgames.config import ConfigError, parse_config


def test_minimal_config_materialises_defaults():
    cfg = parse_config("kind=zerosum, T=1, x0=0")
    d = cfg.to_dict()
    assert d["kind"] == "zerosum" and d["T"] == 1.0 and d["n_players"] == 2
    assert d["numerics"]["n_paths"] == 100_000 and d["numerics"]["n_steps"] == 50


def test_negative_horizon_names_key():
    with pytest.raises(ConfigError) as e:
        parse_config("T=-1")
    assert e.value.key == "T" and "> 0" in str(e.value)


def test_converge_with_list():
    cfg = parse_config("kind=converge, N_list=[2,4,8]")
    assert cfg.kind == "converge" and cfg.numerics.n_list == (2, 4, 8)


@pytest.mark.parametrize(
    "text,key",
    [
        ("colour=blue", "colour"),
        ("[numerics]\nspeed=3", "numerics.speed"),
        ("numerics.n_paths=1.5", "n_paths"),
        ("kind=poker", "kind"),
        ("T=fast", "T"),
        ("damping=1.5", "damping"),
        ("kind=zerosum, k=1", "k"),
        ("N_list=[4,2]", "N_list"),
        ("n_paths=1001", "n_paths"),
    ],
)
def test_rejections(text, key):
    with pytest.raises(ConfigError) as e:
        parse_config(text)
    assert e.value.key == key


def test_section_and_prefix_forms_agree():
    a = parse_config("kind=mfg\n[numerics]\nn_paths = 2000 # comment\nlambda=0.3")
    b = parse_config("kind=mfg, numerics.n_paths=2000, numerics.damping=0.3")
    assert a == b


def _run(tmp_path, text, *extra):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(text)
    return cli.main(["solve", "--config", str(cfg), "--out", str(tmp_path / "out"), *extra])


def test_zerosum_run_and_determinism(tmp_path, capsys):
    text = "kind=zerosum, T=1, x0=0\nnumerics.n_paths=20000\n"
    assert _run(tmp_path, text) == 0
    out = tmp_path / "out"
    report = json.loads((out / "report.json").read_text())["report"]
    assert abs(report["Y0"] - 1) < 0.02
    assert (out / "plots" / "yz.svg").exists() and (out / "curves.csv").exists()
    first = (out / "report.json").read_bytes()
    svg = (out / "plots" / "yz.svg").read_bytes()
    assert _run(tmp_path, text, "--threads", "2") == 0
    assert (out / "report.json").read_bytes() == first
    assert (out / "plots" / "yz.svg").read_bytes() == svg
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok" and "report.json" in manifest["artifacts"]
    assert not (out / ".lock").exists()


def test_seed_override_changes_results(tmp_path):
    text = "kind=zerosum, T=1, x0=0\nnumerics.n_paths=4000\n"
    assert _run(tmp_path, text, "--seed", "1") == 0
    a = (tmp_path / "out" / "report.json").read_bytes()
    assert _run(tmp_path, text, "--seed", "2") == 0
    assert (tmp_path / "out" / "report.json").read_bytes() != a


def test_failure_leaves_manifest_and_error_only(tmp_path):
    ok = "kind=zerosum, T=1, x0=0\nnumerics.n_paths=4000\n"
    assert _run(tmp_path, ok) == 0
    bad = "kind=mfg, x0=1\n[numerics]\nn_paths=2000\nmfg_paths=2000\nmax_iter=1\ntol=1e-12\n"
    assert _run(tmp_path, bad) == cli.EXIT_ITERATION
    names = sorted(p.name for p in (tmp_path / "out").iterdir())
    assert names == ["error.json", "manifest.json"]
    err = json.loads((tmp_path / "out" / "error.json").read_text())
    assert err["error"] == "iteration-failure" and err["module"] == "mfg"


def test_config_error_exit_code(tmp_path, capsys):
    assert _run(tmp_path, "T=-1") == cli.EXIT_CONFIG
    assert '"key": "T"' in capsys.readouterr().err


def test_locked_directory(tmp_path):
    out = tmp_path / "out"
    out.mkdir()
    (out / ".lock").write_text("1")
    assert _run(tmp_path, "kind=zerosum\nnumerics.n_paths=2000") == cli.EXIT_LOCKED


def test_converge_run_structure(tmp_path):
    text = "x0=1\n[numerics]\nn_paths=4000\nmfg_paths=20000\nw2_samples=2000\nN_list=[2,4,8]\n"
    cfg = tmp_path / "c.cfg"
    cfg.write_text(text)
    assert cli.main(["converge", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 0
    out = tmp_path / "out"
    rows = (out / "rate_table.csv").read_text().splitlines()
    assert rows[0] == "N,value_gap_sq,value_gap_se,w2_gap,w2_gap_se,clt_baseline" and len(rows) == 4
    fits = json.loads((out / "rate_fit.json").read_text())
    assert "slope" in fits["value_gap_sq"] and fits["C_hat"] > 0
    assert (out / "plots" / "value_gap.svg").exists()


def test_validate_command(tmp_path, capsys):
    assert cli.main(["validate", "--out", str(tmp_path)]) == 0
    assert "PASS" in capsys.readouterr().out
    assert all(c["passed"] for c in json.loads((tmp_path / "validate.json").read_text()))
