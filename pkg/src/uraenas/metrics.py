"""Ensemble averaging and calibration metrics (accuracy, ECE, NLL)."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import UsageError

NLL_CLIP = 1e-12
DEFAULT_BINS = 15


@dataclass
class PredictionSet:
    probs: np.ndarray  # [members, examples, classes]
    labels: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.probs.ndim != 3 or self.probs.shape[1] != self.labels.shape[0]:
            raise UsageError(f"probs {self.probs.shape} do not match {self.labels.shape[0]} labels")

    @property
    def num_members(self) -> int:
        return self.probs.shape[0]


@dataclass
class BinStats:
    lower: float
    upper: float
    count: int
    confidence: float
    accuracy: float


@dataclass
class CalibrationReport:
    accuracy: float
    ece: float
    nll: float
    members: list[int] = field(default_factory=list)
    bins: list[BinStats] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def ensemble_average(preds: PredictionSet, subset=None) -> np.ndarray:
    """Probability-space mean over the selected members."""
    idx = list(range(preds.num_members)) if subset is None else list(subset)
    if not idx:
        raise UsageError("ensemble_average needs at least one member")
    out = preds.probs[idx[0]].copy()
    for m in idx[1:]:
        out += preds.probs[m]
    return out / len(idx)


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest class.
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def nll(probs: np.ndarray, labels: np.ndarray) -> float:
    p = np.clip(probs[np.arange(len(labels)), labels], NLL_CLIP, 1.0)
    return float(-np.mean(np.log(p)))


def ece(probs: np.ndarray, labels: np.ndarray, num_bins: int = DEFAULT_BINS) -> tuple[float, list[BinStats]]:
    """Equal-width, right-closed bins on (0, 1] over the max-probability confidence."""
    if num_bins < 1:
        raise UsageError("num_bins must be >= 1")
    n = len(labels)
    conf = probs.max(axis=1)
    correct = (np.argmax(probs, axis=1) == labels).astype(np.float64)
    edges = np.linspace(0.0, 1.0, num_bins + 1)
    # bin b holds edges[b] < conf <= edges[b+1]; conf == 0 joins the first bin
    which = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, num_bins - 1)
    total = 0.0
    bins = []
    for b in range(num_bins):
        sel = which == b
        cnt = int(sel.sum())
        if cnt:
            c, a = float(conf[sel].mean()), float(correct[sel].mean())
            total += cnt / n * abs(a - c)
        else:
            c = a = 0.0
        bins.append(BinStats(float(edges[b]), float(edges[b + 1]), cnt, c, a))
    return (total if n else 0.0), bins


def calibration_report(probs: np.ndarray, labels: np.ndarray, members=None, num_bins: int = DEFAULT_BINS) -> CalibrationReport:
    e, bins = ece(probs, labels, num_bins)
    return CalibrationReport(accuracy(probs, labels), e, nll(probs, labels), list(members or []), bins)


def ensemble_size_sweep(preds: PredictionSet, sizes, rng: np.random.Generator, subsets: int = 10,
                        num_bins: int = DEFAULT_BINS) -> dict[int, CalibrationReport]:
    """Metrics averaged over random member subsets of each size.

    When a size admits fewer distinct subsets than ``subsets`` (e.g. the full
    ensemble) every distinct subset is used once.
    """
    from itertools import combinations
    from math import comb

    m = preds.num_members
    out = {}
    for s in sizes:
        if s < 1 or s > m:
            raise UsageError(f"ensemble size {s} outside [1, {m}]")
        if comb(m, s) <= subsets:
            chosen = [list(c) for c in combinations(range(m), s)]
        else:
            chosen = [sorted(rng.choice(m, size=s, replace=False).tolist()) for _ in range(subsets)]
        reps = [calibration_report(ensemble_average(preds, c), preds.labels, c, num_bins) for c in chosen]
        out[s] = CalibrationReport(
            float(np.mean([r.accuracy for r in reps])),
            float(np.mean([r.ece for r in reps])),
            float(np.mean([r.nll for r in reps])),
            sorted({i for c in chosen for i in c}),
        )
    return out


def sweep_csv(sweep: dict[int, CalibrationReport], label: str = "") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "size", "accuracy", "ece", "nll"])
    for s, r in sorted(sweep.items()):
        w.writerow([label, s, f"{r.accuracy:.10f}", f"{r.ece:.10f}", f"{r.nll:.10f}"])
    return buf.getvalue()


def reliability_csv(report: CalibrationReport, label: str = "") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "lower", "upper", "count", "confidence", "accuracy"])
    for b in report.bins:
        w.writerow([label, f"{b.lower:.6f}", f"{b.upper:.6f}", b.count, f"{b.confidence:.10f}", f"{b.accuracy:.10f}"])
    return buf.getvalue()
