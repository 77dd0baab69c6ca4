import json

from optguard import cli


def test_gen_train_attack_report(tmp_path):
    d = tmp_path / "d.csv"
    assert cli.main(["gen", "--dim", "6", "--bins", "4", "--train-count", "8",
                     "--test-count", "4", "--seed", "1", "--out", str(d)]) == 0
    m = tmp_path / "m"
    assert cli.main(["train", "--data", str(d), "--epochs", "5", "--hidden", "8", "--m", "2",
                     "--bound", "10", "--out", str(m)]) == 0
    model = json.loads((m / "model.json").read_text())
    assert model["defense"] == {"enabled": True, "bound": 10.0}
    recs = tmp_path / "recs"
    assert cli.main(["attack", "--model", str(m / "model.json"), "--data", str(d),
                     "--method", "condition_grad", "--epochs", "5", "--bound", "2",
                     "--out", str(recs / "a.json")]) == 0
    (recs / "t.json").write_text((m / "train_record.json").read_text())
    assert cli.main(["report", "--in", str(recs), "--out", str(tmp_path / "rep")]) == 0
    assert "condition_grad,B=2,0,2,0.00" in (tmp_path / "rep" / "table1.csv").read_text()


def test_config_file_and_override(tmp_path):
    conf = tmp_path / "c.yaml"
    conf.write_text("seed: 4\ngen:\n  dim: 3\n  train-count: 5\n  test_count: 1\n")
    out = tmp_path / "x.csv"
    assert cli.main(["gen", "--config", str(conf), "--dim", "2", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "# bins=10 seed=4 train_count=5"
    assert lines[1] == "split,label,f0,f1"
    assert len(lines) == 2 + 6


def test_resolve_precedence():
    opts = cli.resolve("attack", {"lr": 0.5})
    assert opts["lr"] == 0.5 and opts["epochs"] == 5000


def test_farkas_cli(tmp_path):
    out = tmp_path / "f.json"
    assert cli.main(["farkas-attack", "--seed", "0", "--epochs", "300", "--out", str(out)]) == 0
    rec = json.loads(out.read_text())
    assert rec["kind"] == "farkas"
    if rec["attack_results"][0]["success"]:
        assert rec["extra"]["certificate"]["valid"]


def test_errors_exit_nonzero(tmp_path, capsys):
    assert cli.main(["train", "--out", str(tmp_path)]) == 2
    assert cli.main(["report", "--in", str(tmp_path / "missing.json"),
                     "--out", str(tmp_path / "r")]) == 0
    assert cli.main(["attack", "--model", str(tmp_path / "nope.json")]) == 2
    assert "nope.json" in capsys.readouterr().err


def test_report_violation_exit(tmp_path):
    bad = {"kind": "attack", "config": {"method": "max_output", "defense": 2.0},
           "attack_results": [{"success": True, "kappa_max": 1.0,
                               "kappa_trajectory": [[0, 1.0]]}]}
    (tmp_path / "r.json").write_text(json.dumps(bad))
    assert cli.main(["report", "--in", str(tmp_path), "--out", str(tmp_path / "o")]) == 1
