"""Acceptance criteria, one test each.

Every test records a one-line PASS/FAIL verdict; the lines are printed in the
terminal summary (see conftest.py) whether or not output capture is on.

The trend checks (6 and 7) share one 10-seed experiment whose per-seed results
are cached under .acceptance_cache/. Set URAENAS_SKIP_TRENDS=1 to skip them and
URAENAS_ACCEPTANCE_WORKERS=n to run seeds in parallel.
"""

import json
import os
import time
from pathlib import Path

import pytest

from conftest import tiny_config
from uraenas import cli, experiment, verify
from uraenas import trainer as TR
from uraenas.persistence import read_json
from uraenas.search_space import MacroSkeleton, Supernet
from uraenas.rng import stream

VERDICTS: list[str] = []
CACHE = Path(__file__).resolve().parent.parent / ".acceptance_cache"


def record(num: int, title: str, ok: bool, detail: str) -> None:
    VERDICTS.append(f"[{'PASS' if ok else 'FAIL'}] criterion {num} {title}: {detail}")
    print(VERDICTS[-1])
    assert ok, VERDICTS[-1]


def timed(fn, *a, **kw):
    t0 = time.perf_counter()
    out = fn(*a, **kw)
    return out, time.perf_counter() - t0


def test_c1_gradient_oracle():
    # the NB201 skeleton at C0=4 has ~22k parameters, so the <=2k budget is covered by a C0=1 run
    small = sum(p.data.size for p in Supernet(MacroSkeleton(c0=1, n_cells=1, num_classes=10), stream(0, "c1")).parameters())
    (ok_small, det_small), t_small = timed(verify.gradient_check, c0=1)
    (ok_full, det_full), t_full = timed(verify.gradient_check, c0=4)
    ok = ok_small and ok_full and small <= 2000 and t_small <= 60 and t_full <= 60
    record(1, "gradient oracle", ok,
           f"C0=1 ({small} params) {det_small} in {t_small:.0f}s; C0=4 {det_full} in {t_full:.0f}s (limit 60s each)")


def test_c2_dirichlet():
    t0 = time.perf_counter()
    results = [verify.dirichlet_moments(), verify.dirichlet_ks(), verify.dirichlet_pathwise()]
    secs = time.perf_counter() - t0
    ok = all(r[0] for r in results) and secs <= 60
    record(2, "Dirichlet machinery", ok, "; ".join(r[1] for r in results) + f"; {secs:.1f}s (limit 60s)")


def test_c3_csgld():
    (ok, detail), secs = timed(verify.csgld_gaussian)
    record(3, "cSGLD correctness", ok and secs <= 30, f"{detail}; {secs:.1f}s (limit 30s)")


def test_c4_schedule():
    ok, detail = verify.schedule_enumeration()
    combos = int(detail.split()[0])
    record(4, "schedule/phase exactness", ok and combos >= 20, detail)


def test_c5_variant_identities():
    cfg = TR.parse_config(tiny_config())
    data = TR.load_data(cfg.data)
    search = TR.search_phase(cfg, data)
    joint = TR.run_variant(TR.parse_config(tiny_config(M_theta=1, theta_source="mean")), data, search)
    wonly = TR.run_variant(TR.parse_config(tiny_config(variant="UraeNAS_W")), data, search)
    same = len(joint.members) == len(wonly.members) and all(
        a.weights.tobytes() == b.weights.tobytes() and all(a.theta[e].tobytes() == b.theta[e].tobytes() for e in a.theta)
        for a, b in zip(joint.members, wonly.members))
    pa = TR.predict(joint.cfg, joint.members, data["test"]).probs
    pb = TR.predict(wonly.cfg, wonly.members, data["test"]).probs
    same = same and pa.tobytes() == pb.tobytes()
    drnas = TR.run_variant(TR.parse_config(tiny_config(variant="DrNAS")), data)
    ok = same and len(drnas.members) == 1
    record(5, "variant reductions", ok,
           f"M_theta=1 mean-theta vs UraeNAS_W bitwise equal: {same}; DrNAS members: {len(drnas.members)}")


@pytest.fixture(scope="module")
def trend():
    if os.environ.get("URAENAS_SKIP_TRENDS") == "1":
        pytest.skip("URAENAS_SKIP_TRENDS=1")
    workers = int(os.environ.get("URAENAS_ACCEPTANCE_WORKERS", "1"))
    results = experiment.run_seeds(range(10), cache_dir=CACHE, workers=workers)
    return results, experiment.summarize(results)


def test_c6_trend(trend):
    results, s = trend
    w = s["wins"]
    rho = s["spearman_nll"]
    secs = sum(r["seconds"] for r in results)
    ok = s["all_four"] >= 8 and rho is not None and rho <= -0.5
    record(6, "trend reproduction", ok,
           f"UraeNAS beats DrNAS on all four metrics in {s['all_four']}/10 seeds "
           f"(clean NLL {w['clean_nll']}, clean ECE {w['clean_ece']}, corrupted NLL {w['corrupted_nll']}, "
           f"corrupted ECE {w['corrupted_ece']}; need 8); NLL-vs-size Spearman {rho:.3f} (need <= -0.5); "
           f"compute {secs / 60:.0f} min single-core")


def test_c7_ordering(trend):
    _, s = trend
    o = s["order"]
    m = {v: round(s["clean_means"][v]["nll"], 4) for v in s["clean_means"]}
    ok = o["joint_le_w"] >= 7 and o["w_le_drnas"] >= 7
    record(7, "NLL ordering", ok,
           f"UraeNAS <= UraeNAS_W in {o['joint_le_w']}/10, UraeNAS_W <= DrNAS in {o['w_le_drnas']}/10 (need 7); "
           f"mean clean NLL {m}")


def test_c8_metric_oracles():
    ok, detail = verify.metric_oracles(fixtures=500)
    record(8, "metric oracles", ok, detail)


def test_c9_reproducibility(tmp_path):
    root = tmp_path
    assert cli.main(["synth-data", "--n", "96", "--n-val", "32", "--n-test", "40", "--height", "8", "--width", "8",
                     "--seed", "9", "--out", str(root / "data")]) == 0
    assert cli.main(["corrupt", "--data", str(root / "data"), "--out", str(root / "suite"), "--seed", "1"]) == 0
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(tiny_config(data={"source": "dir", "path": str(root / "data"),
                                                 "corrupted": str(root / "suite"), "evaluate_corrupted": True})))
    assert cli.main(["search", "--config", str(cfg), "--out", str(root / "a" / "search")]) == 0
    assert cli.main(["eval-ensemble", "--config", str(cfg), "--search", str(root / "a" / "search"),
                     "--out", str(root / "a" / "run")]) == 0
    # rerun both stages from their manifests, then once more with a different thread count
    for tag, threads in (("b", "1"), ("c", "2")):
        assert cli.main(["--threads", threads, "search", "--config", str(root / "a" / "search" / "manifest.json"),
                         "--out", str(root / tag / "search")]) == 0
        assert cli.main(["--threads", threads, "eval-ensemble", "--config", str(root / "a" / "run" / "manifest.json"),
                         "--search", str(root / tag / "search"), "--out", str(root / tag / "run")]) == 0
    for tag in "abc":
        assert cli.main(["report", "--runs", str(root / tag / "run"), "--out", str(root / tag / "report.json")]) == 0
    same_reports = all((root / "a" / f"report{ext}").read_bytes() == (root / "b" / f"report{ext}").read_bytes()
                       for ext in (".json", ".csv", ".txt"))
    same_artifacts = (read_json(root / "a" / "run" / "manifest.json")["artifacts"]
                      == read_json(root / "b" / "run" / "manifest.json")["artifacts"])
    same_threads = ((root / "a" / "run" / "metrics.json").read_bytes() == (root / "c" / "run" / "metrics.json").read_bytes()
                    and (root / "a" / "report.json").read_bytes() == (root / "c" / "report.json").read_bytes())
    ok = same_reports and same_artifacts and same_threads
    record(9, "reproducibility", ok,
           f"manifest rerun: reports byte-identical {same_reports}, artifacts identical {same_artifacts}; "
           f"threads 1 vs 2 metrics identical {same_threads}")
