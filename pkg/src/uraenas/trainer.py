"""Search phase, ensemble-generating evaluation phase and the four variants."""

from __future__ import annotations

import enum
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from threadpoolctl import threadpool_limits

from . import tensor as T
from .arch_dist import ConcentrationParams, arch_objective_grad, dirichlet_mean, sample_dirichlet
from .data import ImageDataset, SynthSpec, compute_stats, load_dataset, synth_dataset
from .errors import ConfigError, InvariantError, TrainingError
from .metrics import PredictionSet
from .rng import stream, stream_id
from .samplers import CsgldConfig, CsgldSampler, Phase, arch_step, snapshot_epochs
from .search_space import NUM_OPS, CellTopology, MacroSkeleton, Supernet, discretize, theta_dict


class Variant(str, enum.Enum):
    DRNAS = "DrNAS"
    URAENAS_W = "UraeNAS_W"
    URAENAS_A = "UraeNAS_A"
    URAENAS = "UraeNAS"


class EvalMode(str, enum.Enum):
    CONTINUOUS = "continuous"
    DISCRETIZED = "discretized"


class ThetaSource(str, enum.Enum):
    SAMPLE = "sample"
    MEAN = "mean"


# ---- configuration ---------------------------------------------------------

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CsgldSection(_Strict):
    alpha0: float = Field(0.1, gt=0)
    K: int = Field(30, ge=0)
    C: int = Field(4, ge=1)
    r: float = Field(0.7, ge=0, lt=1)
    batch_size: int = Field(64, ge=1)
    n_data: Optional[int] = Field(None, ge=1)  # defaults to the train split size
    paper_literal_update: bool = False


class DataSection(_Strict):
    source: Literal["synth", "dir"] = "synth"
    path: Optional[str] = None
    classes: int = Field(10, ge=1, le=10)
    n_train: int = Field(5000, ge=0)
    n_val: int = Field(1000, ge=0)
    n_test: int = Field(1000, ge=0)
    height: int = Field(16, ge=4)
    width: int = Field(16, ge=4)
    seed: int = 0
    corrupted: Optional[str] = None  # directory of a prebuilt suite
    corruption_seed: int = 0
    evaluate_corrupted: bool = True


class ModelSection(_Strict):
    profile: Literal["nb201", "darts"] = "nb201"
    c0: int = Field(4, ge=1)
    n_cells: int = Field(1, ge=1)


class RunConfig(_Strict):
    variant: Variant = Variant.URAENAS
    seed: int = 0
    eta: float = Field(1.0, ge=0)
    reg_weight: float = Field(1e-3, ge=0)
    csgld: CsgldSection = CsgldSection()
    M_theta: int = Field(5, ge=1)
    M_w: int = Field(8, ge=1)
    ensemble_size: int = Field(10, ge=1)
    eval_mode: EvalMode = EvalMode.CONTINUOUS
    theta_source: Optional[ThetaSource] = None  # None: variant default
    inherit_weights: bool = False
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    divergence_factor: float = Field(10.0, gt=1)
    divergence_patience: int = Field(3, ge=1)
    predict_batch: int = Field(500, ge=1)
    arch_batch: Optional[int] = Field(None, ge=1)  # validation images per architecture step; None: the whole split
    grad_clip: Optional[float] = Field(5.0, gt=0)  # global minibatch-gradient norm cap; None disables

    @model_validator(mode="after")
    def _check(self):
        if self.csgld.K and self.csgld.C > 2 * self.csgld.K:
            raise ValueError("cycles C must not exceed the 2K evaluation epochs")
        if self.uses_snapshots and self.M_w < self.csgld.C:
            raise ValueError(f"M_w={self.M_w} must be >= C={self.csgld.C} so that floor(M_w/C) >= 1")
        return self

    # derived views
    @property
    def uses_snapshots(self) -> bool:
        return self.variant in (Variant.URAENAS_W, Variant.URAENAS)

    @property
    def search_noise(self) -> bool:
        return self.variant is not Variant.DRNAS

    @property
    def effective_theta_source(self) -> ThetaSource:
        if self.theta_source is not None:
            return self.theta_source
        return ThetaSource.MEAN if self.variant in (Variant.DRNAS, Variant.URAENAS_W) else ThetaSource.SAMPLE

    @property
    def effective_M_theta(self) -> int:
        return 1 if self.variant in (Variant.DRNAS, Variant.URAENAS_W) else self.M_theta

    @property
    def snapshots_per_cycle(self) -> int:
        return self.M_w // self.csgld.C if self.uses_snapshots else 0

    @property
    def member_cap(self) -> int:
        if self.variant is Variant.DRNAS:
            return 1
        per_arch = self.csgld.C * self.snapshots_per_cycle if self.uses_snapshots else 1
        return min(self.ensemble_size, self.effective_M_theta * per_arch)

    def csgld_config(self, n_train: int) -> CsgldConfig:
        c = self.csgld
        return CsgldConfig(c.alpha0, max(c.K, c.C), c.C, c.r, c.n_data or max(n_train, 1), c.batch_size, c.paper_literal_update)

    def to_json_dict(self) -> dict:
        return self.model_dump(mode="json")


def _pointer(loc) -> str:
    return "/" + "/".join(str(p) for p in loc) if loc else "/"


def parse_config(doc: dict) -> RunConfig:
    """Validate a config dict; errors name the offending key as a JSON pointer."""
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = tuple(p for p in err["loc"] if not (isinstance(p, str) and p.startswith("function-after")))
        raise ConfigError(f"{_pointer(loc)}: {err['msg']}") from None


# ---- data ---------------------------------------------------------------------

def load_data(cfg: DataSection) -> dict[str, ImageDataset]:
    if cfg.source == "synth":
        out = {}
        for split, n in (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)):
            spec = SynthSpec(classes=cfg.classes, n=n, height=cfg.height, width=cfg.width)
            out[split] = synth_dataset(spec, cfg.seed, split)
    else:
        if not cfg.path:
            raise ConfigError("/data/path: required when source is 'dir'")
        root = Path(cfg.path)
        out = {s: load_dataset(root / s / "data.bin") for s in ("train", "val", "test")}
    stats = compute_stats(out["train"])
    return {s: d.with_stats(stats) for s, d in out.items()}


class BatchSource:
    """Normalized minibatches from one split, with a provenance check."""

    def __init__(self, ds: ImageDataset, allowed: tuple[str, ...]):
        if ds.split not in allowed or ds.tag:
            raise InvariantError(f"data hygiene: split {ds.split!r} (tag {ds.tag!r}) may not feed a {allowed} gradient")
        if ds.stats is None or ds.stats.source != "train":
            raise InvariantError("data hygiene: normalization stats must come from the train split")
        self.ds = ds
        self.x = ds.normalized()
        self.y = ds.labels

    def __len__(self) -> int:
        return len(self.y)

    def epoch(self, rng: np.random.Generator, batch_size: int):
        perm = rng.permutation(len(self.y))
        for s in range(0, len(perm), batch_size):
            idx = perm[s : s + batch_size]
            yield self.x[idx], self.y[idx]

    def sample(self, rng: np.random.Generator, batch_size: int):
        idx = rng.choice(len(self.y), size=min(batch_size, len(self.y)), replace=False)
        return self.x[idx], self.y[idx]


# ---- results --------------------------------------------------------------------

@dataclass
class SearchResult:
    params: ConcentrationParams
    losses: list[dict]
    wall_clock: float
    seed: int
    weights: np.ndarray | None = None

    @property
    def beta(self) -> dict[str, np.ndarray]:
        return self.params.beta


@dataclass
class EnsembleMember:
    m1: int  # snapshot index within its architecture (chronological)
    m2: int  # architecture index
    theta: dict[str, np.ndarray]
    weights: np.ndarray
    epoch: int
    cycle: int
    stream: str

    def describe(self) -> dict:
        return {
            "m1": self.m1,
            "m2": self.m2,
            "epoch": self.epoch,
            "cycle": self.cycle,
            "stream": self.stream,
            "theta": {e: [float(v) for v in t] for e, t in self.theta.items()},
        }


@dataclass
class EvalResult:
    members: list[EnsembleMember]
    losses: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0


# ---- helpers -----------------------------------------------------------------------

def build_net(cfg: RunConfig, in_shape: tuple[int, int, int], rng: np.random.Generator) -> Supernet:
    topo = CellTopology.from_profile(cfg.model.profile)
    skel = MacroSkeleton(cfg.model.c0, cfg.model.n_cells, cfg.data.classes, in_shape[0], topo)
    return Supernet(skel, rng)


def clip_global_norm(grads: list[np.ndarray], max_norm: float | None) -> list[np.ndarray]:
    if max_norm is None:
        return grads
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if not math.isfinite(norm) or norm <= max_norm:
        return grads
    return [g * (max_norm / norm) for g in grads]


def _minibatch_step(net: Supernet, thetas, xb, yb, clip: float | None = None) -> tuple[float, float, list[np.ndarray]]:
    logits = net.forward(xb, thetas)
    loss, probs = T.softmax_cross_entropy(logits, yb)
    net.zero_grad()
    T.backward(loss)
    grads = clip_global_norm([p.grad if p.grad is not None else np.zeros_like(p.data) for p in net.parameters()], clip)
    acc = float(np.mean(np.argmax(probs, axis=1) == yb))
    return float(loss.data), acc, grads


def _apply(net: Supernet, new: list[np.ndarray]) -> None:
    for p, w in zip(net.parameters(), new):
        p.data = w


class _DivergenceGuard:
    def __init__(self, factor: float, patience: int, where: str):
        self.factor, self.patience, self.where = factor, patience, where
        self.initial: float | None = None
        self.bad = 0
        self.history: list[float] = []

    def first_batch(self, loss: float) -> None:
        if self.initial is None:
            self.initial = loss

    def end_epoch(self, loss: float) -> None:
        self.history.append(loss)
        if not math.isfinite(loss) or (self.initial is not None and loss > self.factor * self.initial):
            self.bad += 1
        else:
            self.bad = 0
        if self.bad >= self.patience:
            raise TrainingError(
                f"{self.where}: training diverged (initial loss {self.initial:.4g}, recent epoch losses "
                f"{[round(v, 4) for v in self.history[-self.patience:]]})"
            )


def _edge_keys(topo: CellTopology):
    return list(zip(topo.edges, topo.edge_ids))


# ---- search phase --------------------------------------------------------------------

def search_phase(cfg: RunConfig, data: dict[str, ImageDataset]) -> SearchResult:
    """Alternating Dirichlet-concentration steps on validation data and
    cSGLD (or plain SGD) weight epochs on training data."""
    t0 = time.perf_counter()
    train = BatchSource(data["train"], ("train",))
    val = BatchSource(data["val"], ("val",))
    seed = cfg.seed
    net = build_net(cfg, data["train"].shape, stream(seed, "search-init"))
    topo = net.skel.topology
    params = ConcentrationParams.init(topo.edge_ids, NUM_OPS, cfg.reg_weight)
    K = cfg.csgld.K
    scfg = cfg.csgld_config(len(train))
    shapes = [p.shape for p in net.parameters()]
    sampler = CsgldSampler(scfg, K, seed, "search", shapes, noise=cfg.search_noise)
    guard = _DivergenceGuard(cfg.divergence_factor, cfg.divergence_patience, "search")
    losses = []
    for k in range(1, K + 1):
        # (1) architecture step on one validation minibatch, weights held fixed
        arch_rng = stream(seed, "search-arch", k)
        sample = params.sample(arch_rng, stream_id("search-arch", k))
        if cfg.arch_batch is None:
            xv, yv = val.x, val.y
        else:
            xv, yv = val.sample(stream(seed, "val-batch", k), cfg.arch_batch)
        th = {e: T.Tensor(sample.edges[eid].theta, requires_grad=True) for e, eid in _edge_keys(topo)}
        for p in net.parameters():
            p.requires_grad = False
        val_loss, _ = T.softmax_cross_entropy(net.forward(xv, th), yv)
        T.backward(val_loss)
        for p in net.parameters():
            p.requires_grad = True
        g_theta = {eid: th[e].grad for e, eid in _edge_keys(topo)}
        grads = arch_objective_grad(params, g_theta, sample)
        for eid in params.b:
            params.b[eid] = arch_step(params.b[eid], grads[eid], cfg.eta)
        # (2) one weight epoch at the scheduled step size, theta resampled per minibatch
        theta_rng = stream(seed, "search-theta", k)
        tl, ta, nb = 0.0, 0.0, 0
        betas = params.beta
        for xb, yb in train.epoch(stream(seed, "train-perm", k), cfg.csgld.batch_size):
            thb = {e: T.Tensor(sample_dirichlet(betas[eid], theta_rng).theta) for e, eid in _edge_keys(topo)}
            loss, acc, gr = _minibatch_step(net, thb, xb, yb, cfg.grad_clip)
            guard.first_batch(loss)
            _apply(net, sampler.update([p.data for p in net.parameters()], gr, k))
            tl, ta, nb = tl + loss, ta + acc, nb + 1
        tl, ta = tl / max(nb, 1), ta / max(nb, 1)
        losses.append({
            "stage": "search", "branch": 0, "epoch": k, "alpha": sampler.alpha(k),
            "phase": sampler.phase(k).value, "train_loss": tl, "train_acc": ta, "val_loss": float(val_loss.data),
        })
        guard.end_epoch(tl)
    for eid, v in params.beta.items():
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise InvariantError(f"final concentration on edge {eid} is not finite and positive")
    params.meta = {"seed": seed, "epochs": K, "profile": cfg.model.profile}
    return SearchResult(params, losses, time.perf_counter() - t0, seed, net.get_flat())


# ---- evaluation phase ---------------------------------------------------------------------

def architecture_theta(cfg: RunConfig, search: SearchResult, m2: int) -> dict[str, np.ndarray]:
    """Mixing weights for evaluation architecture ``m2``."""
    beta = search.params.beta
    if cfg.effective_theta_source is ThetaSource.MEAN:
        theta = {e: dirichlet_mean(b) for e, b in beta.items()}
    else:
        rng = stream(cfg.seed, "eval-arch", m2)
        theta = {e: sample_dirichlet(beta[e], rng).theta for e in sorted(beta)}
    if cfg.eval_mode is EvalMode.DISCRETIZED:
        arch = discretize(theta)
        theta = {e: np.eye(NUM_OPS)[int(arch.ops[e])] for e in theta}
    return {e: theta[e] for e in beta}


def selection_rank(cycle: int, pos_from_end: int, cycles: int) -> int:
    """Round-robin priority inside one architecture: the last snapshot of every
    cycle first, then the second-to-last of every cycle, and so on."""
    return pos_from_end * cycles + cycle


def _branch(args) -> tuple[list[EnsembleMember], list[dict]]:
    cfg_doc, search, search_weights, data, m2 = args
    with threadpool_limits(1):
        return _train_branch(RunConfig.model_validate(cfg_doc), search, search_weights, data, m2)


def _train_branch(cfg: RunConfig, search: SearchResult, search_weights, data, m2: int):
    seed = cfg.seed
    theta = architecture_theta(cfg, search, m2)
    net = build_net(cfg, data["train"].shape, stream(seed, "eval-init", m2))
    if cfg.inherit_weights and search_weights is not None:
        net.set_flat(search_weights)
    topo = net.skel.topology
    th = {e: T.Tensor(theta[eid]) for e, eid in _edge_keys(topo)}
    train = BatchSource(data["train"], ("train",))
    total = 2 * cfg.csgld.K
    scfg = cfg.csgld_config(len(train))
    shapes = [p.shape for p in net.parameters()]
    sampler = CsgldSampler(scfg, total, seed, ("eval", m2), shapes, noise=cfg.uses_snapshots)
    per_cycle = cfg.snapshots_per_cycle
    keep = set(snapshot_epochs(total, cfg.csgld.C, cfg.csgld.r, per_cycle)) if cfg.uses_snapshots else {total}
    guard = _DivergenceGuard(cfg.divergence_factor, cfg.divergence_patience, f"eval branch {m2}")
    snaps, losses = [], []
    m = math.ceil(total / cfg.csgld.C)
    for k in range(1, total + 1):
        tl, ta, nb = 0.0, 0.0, 0
        for xb, yb in train.epoch(stream(seed, "eval-perm", m2, k), cfg.csgld.batch_size):
            loss, acc, gr = _minibatch_step(net, th, xb, yb, cfg.grad_clip)
            guard.first_batch(loss)
            _apply(net, sampler.update([p.data for p in net.parameters()], gr, k))
            tl, ta, nb = tl + loss, ta + acc, nb + 1
        tl, ta = tl / max(nb, 1), ta / max(nb, 1)
        losses.append({
            "stage": "eval", "branch": m2, "epoch": k, "alpha": sampler.alpha(k),
            "phase": sampler.phase(k).value if cfg.uses_snapshots else Phase.EXPLORATION.value,
            "train_loss": tl, "train_acc": ta, "val_loss": float("nan"),
        })
        guard.end_epoch(tl)
        if k in keep:
            snaps.append((k, (k - 1) // m, net.get_flat()))
    members = []
    for m1, (k, cyc, w) in enumerate(snaps):
        members.append(EnsembleMember(m1, m2, theta, w, k, cyc, stream_id("eval", m2, k)))
    return members, losses


def eval_phase(cfg: RunConfig, search: SearchResult, data: dict[str, ImageDataset], workers: int = 1) -> EvalResult:
    t0 = time.perf_counter()
    if cfg.uses_snapshots:
        # fail before any training if the cycles cannot supply the snapshots
        snapshot_epochs(2 * cfg.csgld.K, cfg.csgld.C, cfg.csgld.r, cfg.snapshots_per_cycle)
    if cfg.csgld.K == 0:
        raise ConfigError("/csgld/K: the evaluation phase needs K >= 1")
    n_arch = cfg.effective_M_theta
    jobs = [(cfg.to_json_dict(), search, search.weights, data, m2) for m2 in range(n_arch)]
    if workers > 1 and n_arch > 1:
        with ProcessPoolExecutor(max_workers=min(workers, n_arch)) as ex:
            results = list(ex.map(_branch, jobs))
    else:
        results = [_branch(j) for j in jobs]
    per_arch = [r[0] for r in results]
    losses = [row for r in results for row in r[1]]
    chosen = select_members(per_arch, cfg.member_cap, cfg.csgld.C)
    return EvalResult(chosen, losses, time.perf_counter() - t0)


def select_members(per_arch: list[list[EnsembleMember]], cap: int, cycles: int) -> list[EnsembleMember]:
    """Round-robin across architectures, ordered by (m2, m1) in the output."""
    ranked = []
    for members in per_arch:
        by_cycle: dict[int, list[EnsembleMember]] = {}
        for mem in members:
            by_cycle.setdefault(mem.cycle, []).append(mem)
        order = []
        for cyc, ms in by_cycle.items():
            for pos, mem in enumerate(reversed(ms)):
                order.append((selection_rank(cyc, pos, cycles), mem))
        ranked.append([mem for _, mem in sorted(order, key=lambda t: t[0])])
    picked = []
    depth = 0
    while len(picked) < cap and any(depth < len(r) for r in ranked):
        for r in ranked:
            if depth < len(r) and len(picked) < cap:
                picked.append(r[depth])
        depth += 1
    return sorted(picked, key=lambda m: (m.m2, m.m1))


# ---- prediction -------------------------------------------------------------------------

def _predict_member(args) -> np.ndarray:
    cfg_doc, member, x, in_shape = args
    cfg = RunConfig.model_validate(cfg_doc)
    with threadpool_limits(1):
        net = build_net(cfg, in_shape, np.random.default_rng(0))
        net.set_flat(member.weights)
        topo = net.skel.topology
        th = {e: T.Tensor(member.theta[eid]) for e, eid in _edge_keys(topo)}
        for p in net.parameters():
            p.requires_grad = False
        out = np.empty((x.shape[0], cfg.data.classes))
        bs = cfg.predict_batch
        with T.no_grad():
            for s in range(0, x.shape[0], bs):
                logits = net.forward(x[s : s + bs], th).data
                z = logits - logits.max(axis=1, keepdims=True)
                e = np.exp(z)
                out[s : s + bs] = e / e.sum(axis=1, keepdims=True)
        return out


def predict(cfg: RunConfig, members: list[EnsembleMember], ds: ImageDataset, workers: int = 1) -> PredictionSet:
    x = ds.normalized()
    jobs = [(cfg.to_json_dict(), m, x, ds.shape) for m in members]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as ex:
            probs = list(ex.map(_predict_member, jobs))
    else:
        probs = [_predict_member(j) for j in jobs]
    return PredictionSet(np.stack(probs) if probs else np.zeros((0, len(ds), cfg.data.classes)), ds.labels)


# ---- variants -----------------------------------------------------------------------------

@dataclass
class VariantRun:
    cfg: RunConfig
    search: SearchResult
    evaluation: EvalResult

    @property
    def members(self) -> list[EnsembleMember]:
        return self.evaluation.members


def run_variant(cfg: RunConfig, data: dict[str, ImageDataset], search: SearchResult | None = None,
                workers: int = 1) -> VariantRun:
    """Search (unless a result is supplied) followed by the variant's evaluation phase."""
    with threadpool_limits(1):
        if search is None:
            search = search_phase(cfg, data)
        ev = eval_phase(cfg, search, data, workers)
    if cfg.variant is Variant.DRNAS and len(ev.members) != 1:
        raise InvariantError(f"DrNAS must emit exactly one member, got {len(ev.members)}")
    return VariantRun(cfg, search, ev)
