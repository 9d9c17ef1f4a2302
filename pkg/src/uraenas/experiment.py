"""Multi-seed variant comparison used by the acceptance suite.

For each master seed the three variants (DrNAS, UraeNAS_W, UraeNAS) are run on
the same synthetic data. Variants whose search is configured identically share
one search result. Per-seed results are cached as JSON keyed by the config and
a hash of the package sources, so an unchanged rerun is free.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr
from threadpoolctl import threadpool_limits

from . import data as D
from . import metrics as M
from .persistence import canonical_json
from .rng import stream
from .trainer import Variant, eval_phase, load_data, parse_config, predict, search_phase

log = logging.getLogger(__name__)

VARIANTS = (Variant.DRNAS, Variant.URAENAS_W, Variant.URAENAS)

# The setting the trend checks run at: 5k/1k/1k synthetic 16x16 images, 10 classes.
TREND_CONFIG = {
    "csgld": {"K": 10, "C": 5, "r": 0.5, "alpha0": 0.2},
    "M_theta": 2,
    "M_w": 10,
    "ensemble_size": 10,
    "inherit_weights": True,
    "data": {"n_train": 5000, "n_val": 1000, "n_test": 1000, "height": 16, "width": 16},
}
SWEEP_SIZES = tuple(range(1, 11))


# modules whose code can change a trend result; the cache key hashes only these
_HASHED = ("arch_dist", "data", "errors", "experiment", "metrics", "persistence", "rng",
           "samplers", "search_space", "tensor", "trainer")


def source_hash() -> str:
    h = hashlib.sha256()
    for p in (Path(__file__).parent / f"{name}.py" for name in _HASHED):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _merge(base: dict, over: dict) -> dict:
    out = json.loads(json.dumps(base))
    for k, v in over.items():
        out[k] = _merge(out.get(k, {}), v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _short(r: M.CalibrationReport) -> dict:
    return {"accuracy": r.accuracy, "ece": r.ece, "nll": r.nll}


def run_seed(seed: int, base: dict | None = None) -> dict:
    """All variants for one master seed; returns plain JSON-able metrics."""
    base = _merge(base or TREND_CONFIG, {"seed": seed})
    t0 = time.perf_counter()
    with threadpool_limits(1):
        data = load_data(parse_config(base).data)
        suite = {k: v.with_stats(data["test"].stats)
                 for k, v in D.build_corrupted_suite(data["test"], seed).items()}
        searches = {}
        out = {"seed": seed, "variants": {}}
        for variant in VARIANTS:
            cfg = parse_config(dict(base, variant=variant.value))
            if cfg.search_noise not in searches:
                searches[cfg.search_noise] = search_phase(cfg, data)
            ev = eval_phase(cfg, searches[cfg.search_noise], data)
            ps = predict(cfg, ev.members, data["test"])
            avg = M.ensemble_average(ps)
            res = {
                "members": len(ev.members),
                "clean": _short(M.calibration_report(avg, ps.labels)),
                "member_nll": [M.nll(p, ps.labels) for p in ps.probs],
            }
            if variant is not Variant.URAENAS_W:
                reps = []
                for _, ds in sorted(suite.items()):
                    pc = predict(cfg, ev.members, ds)
                    reps.append(M.calibration_report(M.ensemble_average(pc), pc.labels))
                res["corrupted"] = {k: float(np.mean([getattr(r, k) for r in reps])) for k in ("accuracy", "ece", "nll")}
            if variant is Variant.URAENAS and ps.num_members >= max(SWEEP_SIZES):
                sw = M.ensemble_size_sweep(ps, SWEEP_SIZES, stream(seed, "sweep", "clean"))
                res["sweep_nll"] = {str(s): sw[s].nll for s in SWEEP_SIZES}
            out["variants"][variant.value] = res
            log.info("seed %d %s: %s", seed, variant.value, res["clean"])
    out["seconds"] = time.perf_counter() - t0
    return out


def _cached_seed(args) -> dict:
    seed, base, cache_dir = args
    key = hashlib.sha256(canonical_json({"base": base, "seed": seed, "src": source_hash()}).encode()).hexdigest()[:16]
    path = Path(cache_dir) / f"seed{seed}-{key}.json" if cache_dir else None
    if path is not None and path.exists():
        return json.loads(path.read_text())
    res = run_seed(seed, base)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(canonical_json(res))
    return res


def run_seeds(seeds, base: dict | None = None, cache_dir=None, workers: int = 1) -> list[dict]:
    jobs = [(s, base or TREND_CONFIG, str(cache_dir) if cache_dir else None) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_cached_seed, jobs))
    return [_cached_seed(j) for j in jobs]


def summarize(results: list[dict]) -> dict:
    """Win counts and correlations behind the trend checks."""
    def get(r, v, part, metric):
        return r["variants"][v][part][metric]

    n = len(results)
    wins = {}
    for part in ("clean", "corrupted"):
        for metric in ("nll", "ece"):
            wins[f"{part}_{metric}"] = sum(get(r, "UraeNAS", part, metric) < get(r, "DrNAS", part, metric) for r in results)
    both = sum(all(get(r, "UraeNAS", p, m) < get(r, "DrNAS", p, m) for p in ("clean", "corrupted") for m in ("nll", "ece"))
               for r in results)
    order = {
        "joint_le_w": sum(get(r, "UraeNAS", "clean", "nll") <= get(r, "UraeNAS_W", "clean", "nll") for r in results),
        "w_le_drnas": sum(get(r, "UraeNAS_W", "clean", "nll") <= get(r, "DrNAS", "clean", "nll") for r in results),
    }
    sweeps = [r["variants"]["UraeNAS"].get("sweep_nll") for r in results]
    rho = None
    if all(sweeps):
        mean_curve = [float(np.mean([s[str(k)] for s in sweeps])) for k in SWEEP_SIZES]
        rho = float(spearmanr(SWEEP_SIZES, mean_curve)[0])
    means = {v: {m: float(np.mean([get(r, v, "clean", m) for r in results])) for m in ("accuracy", "ece", "nll")}
             for v in ("DrNAS", "UraeNAS_W", "UraeNAS")}
    return {"seeds": n, "wins": wins, "all_four": both, "order": order, "spearman_nll": rho, "clean_means": means}
