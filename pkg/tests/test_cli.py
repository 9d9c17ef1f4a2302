import functools
import json

import numpy as np
import pytest

from conftest import tiny_config
from uraenas import cli, verify
from uraenas import data as D
from uraenas import tensor as T
from uraenas.persistence import check_artifacts, read_json


def run(argv):
    return cli.main([str(a) for a in argv])


def test_missing_out_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["synth-data", "--n", "3"])
    assert exc.value.code == 2
    assert "usage:" in capsys.readouterr().err


def test_unknown_command_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["train"])
    assert exc.value.code == 2


def test_synth_data_default_flags_roundtrip(tmp_path):
    assert run(["synth-data", "--out", tmp_path / "d"]) == 0
    man = read_json(tmp_path / "d" / "manifest.json")
    assert check_artifacts(tmp_path / "d", man) == []
    train = D.load_dataset(tmp_path / "d" / "train" / "data.bin")
    assert len(train) == 5000 and train.shape == (3, 16, 16)
    again = D.synth_dataset(D.SynthSpec(n=5000), 0, "train")
    assert train.content_hash() == again.content_hash()


def test_synth_data_empty(tmp_path):
    assert run(["synth-data", "--n", 0, "--out", tmp_path / "e"]) == 0
    assert len(D.load_dataset(tmp_path / "e" / "train" / "data.bin")) == 0


def test_io_failure_exit_3(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run(["synth-data", "--n", 2, "--out", blocker / "sub"]) == 3
    assert run(["search", "--config", tmp_path / "missing.json", "--out", tmp_path / "s"]) == 3


def test_schema_violation_exit_2(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(tiny_config(csgld={"lambda": 1})))
    assert run(["search", "--config", p, "--out", tmp_path / "s"]) == 2
    assert "/csgld/lambda" in capsys.readouterr().err


def test_threads_env_fallback(monkeypatch):
    monkeypatch.setenv("URAENAS_THREADS", "3")
    assert cli.resolve_threads(None) == 3
    assert cli.resolve_threads(2) == 2
    monkeypatch.setenv("URAENAS_THREADS", "many")
    with pytest.raises(Exception):
        cli.resolve_threads(None)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth-data -> corrupt -> search -> eval-ensemble on a seconds-scale config."""
    root = tmp_path_factory.mktemp("pipe")
    assert cli.main(["synth-data", "--n", "96", "--n-val", "32", "--n-test", "40", "--height", "8", "--width", "8",
                     "--seed", "5", "--out", str(root / "data")]) == 0
    assert cli.main(["corrupt", "--data", str(root / "data"), "--out", str(root / "suite"), "--seed", "2"]) == 0
    doc = tiny_config(data={"source": "dir", "path": str(root / "data"), "corrupted": str(root / "suite"),
                            "evaluate_corrupted": True})
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(doc))
    assert cli.main(["search", "--config", str(cfg), "--out", str(root / "search")]) == 0
    assert cli.main(["eval-ensemble", "--config", str(cfg), "--search", str(root / "search"), "--out", str(root / "run")]) == 0
    return root


def test_pipeline_artifacts(pipeline):
    for sub in ("data", "suite", "search", "run"):
        man = read_json(pipeline / sub / "manifest.json")
        assert man["kind"] == "uraenas-manifest"
        assert check_artifacts(pipeline / sub, man) == []
    met = read_json(pipeline / "run" / "metrics.json")
    assert met["members"] == 4 and len(met["corrupted"]) == 30
    assert (pipeline / "search" / "beta.json").exists() and (pipeline / "run" / "reliability.csv").exists()


def test_rerun_from_manifest_is_bitwise(pipeline, tmp_path):
    assert cli.main(["search", "--config", str(pipeline / "search" / "manifest.json"), "--out", str(tmp_path / "s")]) == 0
    assert cli.main(["eval-ensemble", "--config", str(pipeline / "run" / "manifest.json"), "--search", str(tmp_path / "s"),
                     "--out", str(tmp_path / "r")]) == 0
    for sub, new in (("search", "s"), ("run", "r")):
        old = read_json(pipeline / sub / "manifest.json")["artifacts"]
        assert read_json(tmp_path / new / "manifest.json")["artifacts"] == old


def test_thread_count_does_not_change_metrics(pipeline, tmp_path):
    assert cli.main(["--threads", "2", "eval-ensemble", "--config", str(pipeline / "run" / "manifest.json"),
                     "--search", str(pipeline / "search"), "--out", str(tmp_path / "r2")]) == 0
    assert (tmp_path / "r2" / "metrics.json").read_bytes() == (pipeline / "run" / "metrics.json").read_bytes()


def test_report_is_byte_identical(pipeline, tmp_path, capsys):
    assert cli.main(["report", "--runs", str(pipeline / "run"), "--out", str(tmp_path / "a" / "r.json")]) == 0
    assert cli.main(["report", "--runs", str(pipeline / "run"), "--out", str(tmp_path / "b" / "r.json")]) == 0
    for ext in (".json", ".csv", ".txt"):
        assert (tmp_path / "a" / f"r{ext}").read_bytes() == (tmp_path / "b" / f"r{ext}").read_bytes()
    table = (tmp_path / "a" / "r.txt").read_text()
    assert "cAcc" in table and "UraeNAS" in table
    rows = json.loads((tmp_path / "a" / "r.json").read_text())["rows"]
    assert len(rows) == 1 and rows[0]["members"] == 4


def test_sweep_size_one_is_single_member_average(pipeline, tmp_path):
    from uraenas import metrics as M

    assert cli.main(["sweep", "--run", str(pipeline / "run"), "--sizes", "1", "--out", str(tmp_path / "s.csv")]) == 0
    lines = (tmp_path / "s.csv").read_text().splitlines()
    head = lines[0].split(",")
    row = dict(zip(head, lines[1].split(",")))
    probs = np.load(pipeline / "run" / "predictions" / "test.npy")
    labels = np.load(pipeline / "run" / "predictions" / "labels.npy")
    singles = [M.calibration_report(p, labels) for p in probs]
    assert float(row["nll"]) == pytest.approx(np.mean([r.nll for r in singles]), abs=1e-12)
    assert float(row["ece"]) == pytest.approx(np.mean([r.ece for r in singles]), abs=1e-12)
    assert len(lines) == 1 + 31


def test_sweep_bad_sizes(pipeline, tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["sweep", "--run", str(pipeline / "run"), "--sizes", "0,x", "--out", str(tmp_path / "s.csv")])
    assert exc.value.code == 2
    assert cli.main(["sweep", "--run", str(pipeline / "run"), "--sizes", "9", "--out", str(tmp_path / "s.csv")]) == 2


def test_verify_passes_on_fresh_checkout(capsys):
    assert cli.main(["verify"]) == 0
    out = capsys.readouterr().out
    lines = [l for l in out.splitlines() if l.startswith("[PASS]") or l.startswith("[FAIL]")]
    assert len(lines) >= 5 and all(l.startswith("[PASS]") for l in lines)
    assert "tol" in out


def test_verify_catches_injected_gradient_bug(monkeypatch, capsys):
    def buggy_relu(x):
        out = np.maximum(x.data, 0.0)
        return T._result(out, (x,), lambda g: (g,), "relu")  # adjoint ignores the mask

    monkeypatch.setattr(T, "relu", buggy_relu)
    small = functools.partial(verify.gradient_check, c0=2, hw=4)
    monkeypatch.setattr(verify, "SUITES", [("gradient-check", small)] + verify.SUITES[1:])
    assert cli.main(["verify", "--only", "gradient-check"]) == 1
    assert "[FAIL] gradient-check" in capsys.readouterr().out
