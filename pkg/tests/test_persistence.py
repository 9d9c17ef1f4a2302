import json

import numpy as np
import pytest

from uraenas.errors import FormatError
from uraenas.persistence import (
    canonical_json, check_artifacts, load_snapshot, make_manifest, read_json, rows_to_csv, save_snapshot,
    sha256_file, snapshot_bytes, write_json,
)


def test_snapshot_roundtrip(tmp_path):
    w = np.random.default_rng(0).standard_normal(37)
    digest = save_snapshot(tmp_path / "s.bin", w, {"epoch": 3})
    back, header = load_snapshot(tmp_path / "s.bin")
    assert np.array_equal(back, w) and header == {"epoch": 3, "count": 37}
    assert digest == sha256_file(tmp_path / "s.bin")
    assert not back.flags.writeable


def test_snapshot_rejects_damage(tmp_path):
    raw = snapshot_bytes(np.ones(4), {})
    (tmp_path / "a.bin").write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        load_snapshot(tmp_path / "a.bin")
    (tmp_path / "b.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_snapshot(tmp_path / "b.bin")


def test_canonical_json_is_stable():
    a = canonical_json({"b": np.float64(1.5), "a": [np.int64(2), float("nan")]})
    assert a == canonical_json({"a": [2, None], "b": 1.5})
    assert json.loads(a) == {"a": [2, None], "b": 1.5}


def test_read_json_errors(tmp_path):
    (tmp_path / "x.json").write_text("{oops")
    with pytest.raises(FormatError):
        read_json(tmp_path / "x.json")


def test_manifest_and_artifact_check(tmp_path):
    digest = write_json(tmp_path / "out.json", {"k": 1})
    man = make_manifest("cmd", {"seed": 1}, 1, {"in": "abc"}, {"out.json": digest}, {"seconds": 0.1}, 2)
    assert man["kind"] == "uraenas-manifest" and man["threads"] == 2
    assert check_artifacts(tmp_path, man) == []
    (tmp_path / "out.json").write_text("{}")
    assert check_artifacts(tmp_path, man) == ["out.json"]


def test_rows_to_csv_formats_floats_exactly():
    text = rows_to_csv([{"a": 0.1, "b": None, "c": float("nan")}])
    assert text == "a,b,c\n0.1,,nan\n"


def test_published_config_schema_is_current():
    from pathlib import Path

    from uraenas.trainer import RunConfig

    path = Path(__file__).resolve().parent.parent / "docs" / "config.schema.json"
    expected = json.dumps(RunConfig.model_json_schema(), indent=2, sort_keys=True) + "\n"
    assert path.read_text() == expected
