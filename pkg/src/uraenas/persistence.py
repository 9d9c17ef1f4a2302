"""On-disk formats: canonical JSON, manifests, weight snapshots, loss CSVs."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import platform
import struct
from pathlib import Path

import numpy as np

from . import __version__
from .errors import FormatError

SNAP_MAGIC = b"URWS"
MANIFEST_KIND = "uraenas-manifest"


def _clean(obj):
    """Recursively convert numpy scalars/arrays and non-finite floats for JSON."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> str:
    text = canonical_json(obj)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return sha256_bytes(text.encode())


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None


def sha256_bytes(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


# ---- weight snapshots ----------------------------------------------------------
# file = SNAP_MAGIC | u32 LE header length | JSON header | little-endian float64 weights

def snapshot_bytes(weights: np.ndarray, header: dict) -> bytes:
    hb = canonical_json(dict(header, count=int(weights.size))).encode()
    return SNAP_MAGIC + struct.pack("<I", len(hb)) + hb + np.asarray(weights, dtype="<f8").tobytes()


def save_snapshot(path, weights: np.ndarray, header: dict) -> str:
    raw = snapshot_bytes(weights, header)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(raw)
    return sha256_bytes(raw)


def load_snapshot(path) -> tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != SNAP_MAGIC or len(raw) < 8:
        raise FormatError(f"{path}: not a weight snapshot")
    (hl,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8 : 8 + hl])
    except ValueError:
        raise FormatError(f"{path}: corrupt snapshot header") from None
    body = raw[8 + hl :]
    if len(body) != 8 * header.get("count", -1):
        raise FormatError(f"{path}: snapshot payload has {len(body)} bytes, header says {header.get('count')} weights")
    w = np.frombuffer(body, dtype="<f8").astype(np.float64)
    w.setflags(write=False)
    return w, header


# ---- tables -----------------------------------------------------------------------

def rows_to_csv(rows: list[dict], columns: list[str] | None = None) -> str:
    if not rows:
        return ""
    columns = columns or list(rows[0])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "nan" if not math.isfinite(float(v)) else repr(float(v))
    return "" if v is None else str(v)


LOSS_COLUMNS = ["stage", "branch", "epoch", "alpha", "phase", "train_loss", "train_acc", "val_loss"]


def write_losses(path, rows: list[dict]) -> str:
    text = rows_to_csv(rows, LOSS_COLUMNS) or ",".join(LOSS_COLUMNS) + "\n"
    Path(path).write_text(text)
    return sha256_bytes(text.encode())


# ---- manifests -----------------------------------------------------------------------

def make_manifest(command: str, config: dict | None, seed: int | None, inputs: dict[str, str],
                  artifacts: dict[str, str], timing: dict[str, float], threads: int, extra: dict | None = None) -> dict:
    """Everything needed to re-run ``command``; ``artifacts`` maps relative path -> sha256."""
    return {
        "kind": MANIFEST_KIND,
        "command": command,
        "tool_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": config,
        "seed": seed,
        "threads": threads,
        "inputs": dict(sorted(inputs.items())),
        "artifacts": dict(sorted(artifacts.items())),
        "timing": timing,
        **(extra or {}),
    }


def is_manifest(doc: dict) -> bool:
    return isinstance(doc, dict) and doc.get("kind") == MANIFEST_KIND


def check_artifacts(root, manifest: dict) -> list[str]:
    """Relative paths whose current hash differs from the manifest (or are missing)."""
    bad = []
    for rel, digest in manifest.get("artifacts", {}).items():
        p = Path(root) / rel
        if not p.exists() or sha256_file(p) != digest:
            bad.append(rel)
    return bad
