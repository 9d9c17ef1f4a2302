"""Artifact-producing steps behind the command-line interface."""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import data as D
from . import metrics as M
from .arch_dist import ConcentrationParams
from .errors import ConfigError, FormatError
from .persistence import (
    canonical_json, is_manifest, load_snapshot, make_manifest, read_json, rows_to_csv, save_snapshot,
    sha256_file, write_json, write_losses,
)
from .rng import stream
from .trainer import RunConfig, SearchResult, build_net, eval_phase, load_data, parse_config, predict, search_phase


def load_config_file(path) -> RunConfig:
    """A RunConfig JSON file, or a manifest whose embedded config is re-used."""
    try:
        doc = read_json(path)
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc}") from None
    if is_manifest(doc):
        doc = doc.get("config")
        if doc is None:
            raise ConfigError("/config: manifest carries no run configuration")
    if not isinstance(doc, dict):
        raise ConfigError("/: config must be a JSON object")
    return parse_config(doc)


def _data_hashes(data: dict[str, D.ImageDataset]) -> dict[str, str]:
    return {f"data/{s}": d.content_hash() for s, d in data.items()}


def _param_layout(cfg: RunConfig, shape) -> tuple[list[str], list[list[int]]]:
    net = build_net(cfg, shape, np.random.default_rng(0))
    named = net.named_parameters()
    return [n for n, _ in named], [list(p.shape) for _, p in named]


# ---- synth-data / corrupt ------------------------------------------------------------

def synth_data(out, classes: int, n: int, seed: int, n_val: int | None = None, n_test: int | None = None,
               height: int = 16, width: int = 16) -> dict:
    t0 = time.perf_counter()
    out = Path(out)
    sizes = {"train": n, "val": n // 5 if n_val is None else n_val, "test": n // 5 if n_test is None else n_test}
    arts = {}
    for split, size in sizes.items():
        ds = D.synth_dataset(D.SynthSpec(classes=classes, n=size, height=height, width=width), seed, split)
        arts[f"{split}/data.bin"] = D.save_dataset(ds, out / split / "data.bin")
    params = {"classes": classes, "n": n, "n_val": sizes["val"], "n_test": sizes["test"], "height": height, "width": width}
    man = make_manifest("synth-data", None, seed, {}, arts, {"seconds": time.perf_counter() - t0}, 1, {"params": params})
    write_json(out / "manifest.json", man)
    return man


def _find_test(path: Path) -> Path:
    for cand in (path / "test" / "data.bin", path / "data.bin", path):
        if cand.is_file():
            return cand
    raise FormatError(f"{path}: no test split found")


def corrupt_data(data_dir, out, seed: int) -> dict:
    t0 = time.perf_counter()
    src = _find_test(Path(data_dir))
    test = D.load_dataset(src)
    if test.split != "test":
        raise ConfigError(f"corruptions are built from the test split, {src} holds {test.split!r}")
    suite = D.build_corrupted_suite(test, seed)
    arts = D.save_suite(suite, out)
    man = make_manifest("corrupt", None, seed, {"test": sha256_file(src)}, {f"{k}/data.bin": v for k, v in arts.items()},
                        {"seconds": time.perf_counter() - t0}, 1, {"table_version": D.TABLE_VERSION})
    write_json(Path(out) / "manifest.json", man)
    return man


# ---- search ---------------------------------------------------------------------------

def run_search(cfg: RunConfig, out, workers: int = 1) -> dict:
    t0 = time.perf_counter()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    data = load_data(cfg.data)
    with threadpool_limits(1):
        res = search_phase(cfg, data)
    names, shapes = _param_layout(cfg, data["train"].shape)
    arts = {}
    (out / "beta.json").write_text(res.params.to_json() + "\n")
    arts["beta.json"] = sha256_file(out / "beta.json")
    arts["search_weights.bin"] = save_snapshot(out / "search_weights.bin", res.weights,
                                               {"names": names, "shapes": shapes, "epoch": cfg.csgld.K, "seed": cfg.seed, "stream": "search"})
    arts["search_losses.csv"] = write_losses(out / "search_losses.csv", res.losses)
    man = make_manifest("search", cfg.to_json_dict(), cfg.seed, _data_hashes(data), arts,
                        {"search_seconds": res.wall_clock, "total_seconds": time.perf_counter() - t0}, workers)
    write_json(out / "manifest.json", man)
    return man


def load_search(search_dir) -> SearchResult:
    root = Path(search_dir)
    try:
        params = ConcentrationParams.from_json((root / "beta.json").read_text())
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"{root}: unreadable beta checkpoint ({exc})") from None
    weights, header = load_snapshot(root / "search_weights.bin")
    return SearchResult(params, [], 0.0, int(header.get("seed", 0)), np.array(weights))


# ---- evaluation ------------------------------------------------------------------------

def _corrupted_suite(cfg: RunConfig, test: D.ImageDataset) -> dict[tuple[str, int], D.ImageDataset]:
    if not cfg.data.evaluate_corrupted:
        return {}
    if cfg.data.corrupted:
        suite = D.load_suite(cfg.data.corrupted)
    else:
        suite = D.build_corrupted_suite(test, cfg.data.corruption_seed)
    return {k: v.with_stats(test.stats) for k, v in suite.items()}


def _short(r: M.CalibrationReport) -> dict:
    return {"accuracy": r.accuracy, "ece": r.ece, "nll": r.nll}


def run_eval(cfg: RunConfig, search_dir, out, workers: int = 1) -> dict:
    t0 = time.perf_counter()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    data = load_data(cfg.data)
    search = load_search(search_dir)
    names, shapes = _param_layout(cfg, data["train"].shape)
    if search.weights is not None and search.weights.size != sum(int(np.prod(s)) for s in shapes):
        raise ConfigError("/model: search checkpoint does not match the configured network")
    ev = eval_phase(cfg, search, data, workers)
    t_train = time.perf_counter() - t0
    arts = {}
    for m in ev.members:
        rel = f"snapshots/m{m.m2}_{m.m1}.bin"
        hdr = {"names": names, "shapes": shapes, "seed": cfg.seed, **m.describe()}
        arts[rel] = save_snapshot(out / rel, m.weights, hdr)
    arts["members.json"] = write_json(out / "members.json", [m.describe() for m in ev.members])
    arts["eval_losses.csv"] = write_losses(out / "eval_losses.csv", ev.losses)

    (out / "predictions").mkdir(exist_ok=True)
    test = data["test"]
    ps = predict(cfg, ev.members, test, workers)
    np.save(out / "predictions" / "test.npy", ps.probs)
    np.save(out / "predictions" / "labels.npy", ps.labels)
    arts["predictions/test.npy"] = sha256_file(out / "predictions" / "test.npy")
    arts["predictions/labels.npy"] = sha256_file(out / "predictions" / "labels.npy")
    clean = M.calibration_report(M.ensemble_average(ps), ps.labels, [f"{m.m2}/{m.m1}" for m in ev.members])
    corrupted = {}
    for (kind, sev), ds in sorted(_corrupted_suite(cfg, test).items()):
        pc = predict(cfg, ev.members, ds, workers)
        rel = f"predictions/{kind}_{sev}.npy"
        np.save(out / rel, pc.probs)
        arts[rel] = sha256_file(out / rel)
        corrupted[f"{kind}/{sev}"] = _short(M.calibration_report(M.ensemble_average(pc), pc.labels))
    cmean = {k: float(np.mean([c[k] for c in corrupted.values()])) for k in ("accuracy", "ece", "nll")} if corrupted else None
    metrics = {
        "variant": cfg.variant.value,
        "seed": cfg.seed,
        "members": len(ev.members),
        "factorization": {
            "M_theta": cfg.effective_M_theta, "M_w": cfg.M_w if cfg.uses_snapshots else None, "C": cfg.csgld.C,
            "snapshots_per_cycle": cfg.snapshots_per_cycle, "cap": cfg.member_cap,
        },
        "clean": _short(clean),
        "corrupted": corrupted,
        "corrupted_mean": cmean,
    }
    arts["metrics.json"] = write_json(out / "metrics.json", metrics)
    (out / "reliability.csv").write_text(M.reliability_csv(clean, "clean"))
    arts["reliability.csv"] = sha256_file(out / "reliability.csv")
    inputs = _data_hashes(data)
    inputs["search/beta.json"] = sha256_file(Path(search_dir) / "beta.json")
    inputs["search/search_weights.bin"] = sha256_file(Path(search_dir) / "search_weights.bin")
    man = make_manifest("eval-ensemble", cfg.to_json_dict(), cfg.seed, inputs, arts,
                        {"train_seconds": t_train, "total_seconds": time.perf_counter() - t0}, workers,
                        {"search_dir": str(search_dir)})
    write_json(out / "manifest.json", man)
    return man


# ---- report / sweep ------------------------------------------------------------------------

REPORT_COLUMNS = ["run", "variant", "seed", "members", "acc", "ece", "nll", "cacc", "cece", "cnll"]


def build_report(run_dirs) -> tuple[str, str, str]:
    """(JSON table, long-form CSV, plain-text table); a pure function of the run files."""
    rows, long_rows = [], []
    for d in run_dirs:
        d = Path(d)
        met = read_json(d / "metrics.json")
        cm = met.get("corrupted_mean") or {}
        rows.append({
            "run": d.name, "variant": met["variant"], "seed": met["seed"], "members": met["members"],
            "acc": met["clean"]["accuracy"], "ece": met["clean"]["ece"], "nll": met["clean"]["nll"],
            "cacc": cm.get("accuracy"), "cece": cm.get("ece"), "cnll": cm.get("nll"),
        })
        long_rows.append({"run": d.name, "variant": met["variant"], "dataset": "test", "corruption": "", "severity": "",
                          "size": met["members"], **met["clean"]})
        for key, r in sorted(met.get("corrupted", {}).items()):
            kind, sev = key.split("/")
            long_rows.append({"run": d.name, "variant": met["variant"], "dataset": "test-corrupted", "corruption": kind,
                              "severity": sev, "size": met["members"], **r})
    js = canonical_json({"columns": REPORT_COLUMNS, "rows": rows})
    csv_text = rows_to_csv(long_rows, ["run", "variant", "dataset", "corruption", "severity", "size", "accuracy", "ece", "nll"])
    return js, csv_text, format_table(rows)


def format_table(rows: list[dict]) -> str:
    head = f"{'variant':<12}{'run':<18}{'ens':>4}{'Acc':>9}{'ECE':>9}{'NLL':>9}{'cAcc':>9}{'cECE':>9}{'cNLL':>9}"
    lines = [head, "-" * len(head)]

    def f(v):
        return f"{v:9.4f}" if v is not None else f"{'-':>9}"

    for r in rows:
        lines.append(f"{r['variant']:<12}{r['run'][:17]:<18}{r['members']:>4}{f(r['acc'])}{f(r['ece'])}{f(r['nll'])}"
                     f"{f(r['cacc'])}{f(r['cece'])}{f(r['cnll'])}")
    return "\n".join(lines) + "\n"


def run_sweep(run_dir, sizes: list[int], subsets: int = 10) -> str:
    root = Path(run_dir)
    met = read_json(root / "metrics.json")
    seed = int(met["seed"])
    labels = np.load(root / "predictions" / "labels.npy")
    sets = [("test", "", "", root / "predictions" / "test.npy")]
    for key in sorted(met.get("corrupted", {})):
        kind, sev = key.split("/")
        sets.append(("test-corrupted", kind, sev, root / "predictions" / f"{kind}_{sev}.npy"))
    rows = []
    for name, kind, sev, path in sets:
        ps = M.PredictionSet(np.load(path), labels)
        sw = M.ensemble_size_sweep(ps, sizes, stream(seed, "sweep", name, kind, sev or 0), subsets)
        for s, r in sw.items():
            rows.append({"variant": met["variant"], "dataset": name, "corruption": kind, "severity": sev, "size": s,
                         "accuracy": r.accuracy, "ece": r.ece, "nll": r.nll})
    return rows_to_csv(rows, ["variant", "dataset", "corruption", "severity", "size", "accuracy", "ece", "nll"])
