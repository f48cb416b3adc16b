import hashlib
import json

import pytest

from kylegames.cli import EXIT_CAP, EXIT_FAIL, EXIT_OK, EXIT_PARSE, EXIT_UNVERIFIABLE, main


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def cert_31(tmp_path, capsys):
    path = tmp_path / "cert.json"
    code, out, _ = run(["solve", "--builtin", "example-3-1", "--out", str(path)], capsys)
    assert code == EXIT_OK
    return path


def test_solve_example_3_1_prints_exact_prices(cert_31):
    doc = json.loads(cert_31.read_text())
    prices = [r["price"] for r in doc["prices"][0]]
    assert prices == ["0", "3/7", "13/16", "3/4", "1"]
    assert doc["verification"]["passed"] is True


def test_solve_without_out_writes_certificate_to_stdout(capsys):
    code, out, _ = run(["solve", "--builtin", "example-3-1"], capsys)
    assert code == EXIT_OK
    assert '"kind": "certificate"' in out


def test_verify_round_trip(cert_31, tmp_path, capsys):
    rep = tmp_path / "rep.json"
    code, _, err = run(["verify", str(cert_31), "--out", str(rep)], capsys)
    assert code == EXIT_OK and "pass" in err
    assert json.loads(rep.read_text())["passed"] is True


def test_verify_sequential_round_trip_on_homotopy_certificate(tmp_path, capsys):
    path = tmp_path / "cert.json"
    code, out, _ = run(["solve", "--builtin", "example-2-1", "--out", str(path)], capsys)
    assert code == EXIT_OK and "alpha" in out
    code, _, _ = run(["verify", str(path), "--sequential", "--out", str(tmp_path / "r.json")],
                     capsys)
    assert code == EXIT_OK


def test_support_enumeration_certificate_has_no_trace(cert_31, tmp_path, capsys):
    code, _, err = run(["verify", str(cert_31), "--sequential"], capsys)
    assert code == EXIT_UNVERIFIABLE and "unverifiable" in err


def test_verify_tampered_price_fails(cert_31, tmp_path, capsys):
    doc = json.loads(cert_31.read_text())
    doc["prices"][0][1]["price"] = "1/2"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    code, _, err = run(["verify", str(bad), "--out", str(tmp_path / "r.json")], capsys)
    assert code == EXIT_FAIL
    assert "pricing witness flow: (-1)" in err


def test_sequential_without_trace_is_unverifiable(tmp_path, capsys):
    path = tmp_path / "cert.json"
    assert run(["solve", "--builtin", "example-2-1", "--out", str(path)], capsys)[0] == EXIT_OK
    doc = json.loads(path.read_text())
    doc["trace"] = []
    doc["beliefs"] = None
    bare = tmp_path / "bare.json"
    bare.write_text(json.dumps(doc))
    code, _, _ = run(["verify", str(bare), "--sequential", "--out", str(tmp_path / "r.json")],
                     capsys)
    assert code == EXIT_UNVERIFIABLE


def test_parse_errors_name_the_field(cert_31, tmp_path, capsys):
    garbage = tmp_path / "g.json"
    garbage.write_text("{not json")
    code, _, err = run(["verify", str(garbage)], capsys)
    assert code == EXIT_PARSE and "invalid JSON" in err

    doc = json.loads(cert_31.read_text())
    doc["game"]["prior"][0] = "1/0"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    code, _, err = run(["verify", str(bad)], capsys)
    assert code == EXIT_PARSE and "game.prior[0]" in err


def test_usage_errors(capsys):
    assert run([], capsys)[0] == EXIT_PARSE
    code, _, err = run(["reproduce", "nonsense"], capsys)
    assert code == EXIT_PARSE and "example-3-1" in err
    assert run(["solve", "--builtin", "no-such-game"], capsys)[0] == EXIT_PARSE
    assert run(["solve", "--builtin", "example-2-1", "--noise-eps", "3/4"], capsys)[0] == EXIT_PARSE


def test_support_cap_exit(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"builtin": "example-3-1", "solver": {"support_cap": 1}}))
    code, _, err = run(["solve", "--builtin", "example-3-1", "--config", str(cfg),
                        "--mode", "support_enumeration"], capsys)
    assert code == EXIT_CAP and "resource cap" in err


def test_unknown_solver_setting_is_named(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"solver": {"dampnig": 0.3}}))
    code, _, err = run(["solve", "--builtin", "example-3-1", "--config", str(cfg)], capsys)
    assert code == EXIT_PARSE and "solver.dampnig" in err


def test_reproduce_example_3_1_is_byte_stable(tmp_path, capsys):
    digests = []
    for i in range(2):
        path = tmp_path / f"t{i}.csv"
        assert run(["reproduce", "example-3-1", "--out", str(path)], capsys)[0] == EXIT_OK
        digests.append(hashlib.md5(path.read_bytes()).hexdigest())
    assert digests[0] == digests[1]
    text = (tmp_path / "t0.csv").read_text()
    assert "-1,3/7" in text and "equilibria,1" in text


def test_reproduce_curve_reports_root(tmp_path, capsys):
    path = tmp_path / "curve.csv"
    code, _, err = run(["reproduce", "example-2-1-curve", "--grid", "0.05", "--out", str(path)],
                       capsys)
    assert code == EXIT_OK
    lines = path.read_text().splitlines()
    assert lines[0] == "alpha,profit_buy,profit_wait" and len(lines) == 22
    assert "root alpha=0.77464" in err


def test_reproduce_theorem_bound(tmp_path, capsys):
    path = tmp_path / "bound.csv"
    code, _, _ = run(["reproduce", "theorem-bound", "--max-n", "2", "--out", str(path)], capsys)
    assert code == EXIT_OK
    rows = path.read_text().splitlines()
    assert rows[0].startswith("n,bound") and len(rows) == 3


def test_limit_small_range(tmp_path, capsys):
    path = tmp_path / "limit.csv"
    code, _, _ = run(["limit", "--n", "1", "2", "--out", str(path)], capsys)
    assert code == EXIT_OK
    assert len(path.read_text().splitlines()) >= 3


def test_limit_empty_range_is_usage_error(capsys):
    assert run(["limit", "--n-min", "4", "--n-max", "2"], capsys)[0] == EXIT_PARSE
