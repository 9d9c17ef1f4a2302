"""Self-contained oracle suites behind ``uraenas verify``."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import stats

from . import metrics as M
from . import tensor as T
from .arch_dist import dirichlet_jacobian, sample_dirichlet, sample_dirichlet_batch
from .data import CorruptionSpec, corrupt
from .rng import stream
from .samplers import CsgldConfig, CsgldSampler, lr_schedule, phase_of, sampling_epochs_per_cycle, snapshot_epochs, step_sample
from .search_space import MacroSkeleton, Supernet, simplex_checks_disabled, theta_dict


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def rel_err(a, b, floor: float = 1e-6) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradient_check(seed: int = 0, c0: int = 4, hw: int = 8, n: int = 2, tol: float = 1e-4, h: float = 1e-5) -> tuple[bool, str]:
    """Every weight and theta gradient of the full supernet against central differences."""
    rng = stream(seed, "verify", "grad")
    skel = MacroSkeleton(c0=c0, n_cells=1, num_classes=10)
    net = Supernet(skel, rng)
    x = rng.standard_normal((n, 3, hw, hw))
    y = rng.integers(0, 10, n)
    vec = {e: rng.dirichlet(np.ones(5)) for e in skel.topology.edge_ids}
    th = theta_dict(skel.topology, vec, requires_grad=True)
    loss, _ = T.softmax_cross_entropy(net.forward(x, th), y)
    net.zero_grad()
    T.backward(loss)
    worst, count = 0.0, 0

    def check(leaf, f):
        nonlocal worst, count
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        base = leaf.data

        def g(v):
            leaf.data = v
            return f()

        fd = T.finite_diff_grad(g, base.copy(), h)
        leaf.data = base
        worst = max(worst, float(rel_err(analytic, fd).max()))
        count += base.size

    with T.no_grad():
        blocks = net.blocks(th)
        state = (None, T.Tensor(T.channel_major(x)))
        for b, (params, _) in enumerate(blocks):
            def tail(st=state, b=b):
                for _, fn in blocks[b:]:
                    st = fn(st)
                return float(T.softmax_cross_entropy(st[1], y)[0].data)

            for p in params:
                check(p, tail)
            state = blocks[b][1](state)
        with simplex_checks_disabled():
            for t in th.values():
                check(t, lambda: float(T.softmax_cross_entropy(net.forward(x, th), y)[0].data))
    return worst <= tol, f"max rel err {worst:.2e} over {count} coords (tol {tol:g})"


def dirichlet_moments(seed: int = 0, draws: int = 100000) -> tuple[bool, str]:
    beta = np.array([2.0, 5.0, 1.0, 0.5, 3.0])
    theta, _, _ = sample_dirichlet_batch(beta, draws, stream(seed, "verify", "dir"))
    s = beta.sum()
    mean = beta / s
    var = beta * (s - beta) / (s * s * (s + 1))
    se = np.sqrt(var / draws)
    z = np.abs(theta.mean(0) - mean) / se
    simplex = np.abs(theta.sum(1) - 1).max()
    ok = bool(z.max() < 5 and simplex <= 1e-9 and theta.min() > 0)
    return ok, f"max |z| of means {z.max():.2f} (tol 5), simplex dev {simplex:.1e} (tol 1e-9)"


def dirichlet_ks(seed: int = 0, draws: int = 20000) -> tuple[bool, str]:
    theta, _, _ = sample_dirichlet_batch(np.array([2.0, 5.0]), draws, stream(seed, "verify", "ks"))
    p = stats.kstest(theta[:, 0], stats.beta(2, 5).cdf).pvalue
    return bool(p > 0.01), f"KS p-value vs Beta(2,5) {p:.3f} (tol > 0.01)"


def dirichlet_pathwise(seed: int = 0, draws: int = 10000) -> tuple[bool, str]:
    beta = np.array([2.0, 5.0, 1.5])
    rng = stream(seed, "verify", "path")
    jac = np.zeros((3, 3))
    for _ in range(draws):
        jac += dirichlet_jacobian(sample_dirichlet(beta, rng))
    jac /= draws
    s = beta.sum()
    exact = (np.eye(3) * s - beta[:, None]) / s**2
    err = np.linalg.norm(jac - exact) / np.linalg.norm(exact)
    return bool(err <= 0.05), f"pathwise dE[theta]/dbeta rel err {err:.3f} (tol 0.05)"


def csgld_gaussian(seed: int = 0, steps: int = 50000, alpha: float = 0.1, burn: int = 1000, chains: int = 8) -> tuple[bool, str]:
    """Langevin steps on a 2-D Gaussian; ``chains`` independent chains advance together."""
    mu = np.array([1.0, -1.0])
    sigma = np.array([[1.0, 0.5], [0.5, 2.0]])
    prec = np.linalg.inv(sigma)
    rng = stream(seed, "verify", "sgld")
    w = np.zeros((chains, 2))
    out = np.empty((steps, chains, 2))
    for i in range(steps + burn):
        w = step_sample(w, (w - mu) @ prec, alpha, 1, rng.standard_normal((chains, 2)))
        if i >= burn:
            out[i - burn] = w
    out = out.reshape(-1, 2)
    mean_err = np.max(np.abs(out.mean(0) - mu) / np.sqrt(np.diag(sigma)))
    cov_err = np.linalg.norm(np.cov(out.T) - sigma) / np.linalg.norm(sigma)
    sgd_ok = noise_free_is_sgd(seed)
    ok = bool(mean_err <= 0.05 and cov_err <= 0.10 and sgd_ok)
    return ok, (f"mean err {mean_err:.3f} (tol 0.05 scale-rel), cov err {cov_err:.3f} (tol 0.10 Frobenius), "
                f"noise-free == cosine SGD bitwise: {sgd_ok}")


def noise_free_is_sgd(seed: int = 0, epochs: int = 12, steps: int = 5) -> bool:
    """The sampler with noise switched off against a hand-written cosine-scheduled SGD loop."""
    cfg = CsgldConfig(alpha0=0.3, K=epochs // 2, C=3, r=0.5, n_data=50)
    rng = stream(seed, "verify", "sgd")
    target = rng.standard_normal((4, 3))
    sampler = CsgldSampler(cfg, epochs, seed, "sgd", [target.shape], noise=False)
    w_s = w_ref = rng.standard_normal(target.shape)
    m = math.ceil(epochs / cfg.C)
    for k in range(1, epochs + 1):
        lr = cfg.alpha0 / 2 * (math.cos(math.pi * ((k - 1) % m) / m) + 1)
        for _ in range(steps):
            (w_s,) = sampler.update([w_s], [w_s - target], k)
            w_ref = w_ref - lr * ((w_ref - target) + w_ref / cfg.n_data)
    return bool(np.array_equal(w_s, w_ref))


def schedule_enumeration() -> tuple[bool, str]:
    bad = 0
    combos = 0
    for K in (1, 2, 3, 5, 7, 10, 20, 50, 100):
        for C in (1, 2, 3, 4):
            if C > 2 * K:
                continue
            combos += 1
            m = math.ceil(2 * K / C)
            for k in range(1, 2 * K + 1):
                if lr_schedule(k, 2 * K, C, 0.1) != 0.1 / 2 * (math.cos(math.pi * ((k - 1) % m) / m) + 1):
                    bad += 1
            for r in (Fraction(0), Fraction(1, 2), Fraction(7, 10)):
                expected = m - math.ceil(r * m)
                if sampling_epochs_per_cycle(2 * K, C, float(r)) != expected:
                    bad += 1
    snaps = snapshot_epochs(40, 2, 0.7, 2)
    ok = bad == 0 and snaps == [19, 20, 39, 40] and phase_of(1, 40, 2, 0.7).value == "exploration"
    return ok, f"{combos} (K,C) combos, {bad} mismatches; snapshots(2K=40,C=2,r=0.7,M_w=4) = {snaps}"


def metric_oracles(seed: int = 0, fixtures: int = 500) -> tuple[bool, str]:
    rng = stream(seed, "verify", "metrics")
    worst = 0.0
    jensen_ok = True
    for _ in range(fixtures):
        m, n, k = rng.integers(1, 6), rng.integers(1, 60), rng.integers(2, 11)
        probs = rng.dirichlet(np.ones(k) * rng.uniform(0.2, 3), size=(m, n))
        labels = rng.integers(0, k, n)
        avg = M.ensemble_average(M.PredictionSet(probs, labels))
        worst = max(worst, abs(M.ece(avg, labels)[0] - loop_ece(avg, labels)), abs(M.nll(avg, labels) - loop_nll(avg, labels)),
                    abs(M.accuracy(avg, labels) - loop_accuracy(avg, labels)))
        jensen_ok &= M.nll(avg, labels) <= np.mean([M.nll(p, labels) for p in probs]) + 1e-12
    ok = worst <= 1e-12 and jensen_ok
    return bool(ok), f"max |metric - loop oracle| {worst:.1e} (tol 1e-12), Jensen bound held: {jensen_ok}"


def corruption_checks() -> tuple[bool, str]:
    img = np.full((3, 8, 8), 128, np.uint8)
    b = corrupt(img, CorruptionSpec("Brightness", 1), 0)
    rnd = np.random.default_rng(5).integers(0, 256, (3, 8, 8)).astype(np.uint8)
    same = all(np.array_equal(corrupt(rnd, CorruptionSpec(k, 3), 11), corrupt(rnd, CorruptionSpec(k, 3), 11))
               for k in ("GaussianNoise", "ShotNoise", "ImpulseNoise", "BoxBlur", "Brightness", "Contrast"))
    ok = bool(np.all(b == 154)) and same
    return ok, f"Brightness sev1 on 128 -> {int(b.flat[0])} (want 154); deterministic per seed: {same}"


# plain loop oracles, deliberately independent of the vectorized code

def loop_accuracy(probs, labels) -> float:
    hit = 0
    for row, y in zip(probs, labels):
        best = 0
        for j in range(len(row)):
            if row[j] > row[best]:
                best = j
        hit += int(best == y)
    return hit / len(labels)


def loop_nll(probs, labels) -> float:
    tot = 0.0
    for row, y in zip(probs, labels):
        tot -= math.log(min(max(row[y], 1e-12), 1.0))
    return tot / len(labels)


def loop_ece(probs, labels, bins: int = 15) -> float:
    conf_sum = [0.0] * bins
    acc_sum = [0.0] * bins
    count = [0] * bins
    for row, y in zip(probs, labels):
        c = max(row)
        pred = list(row).index(c)
        b = 0
        while b < bins - 1 and c > (b + 1) / bins:
            b += 1
        conf_sum[b] += c
        acc_sum[b] += float(pred == y)
        count[b] += 1
    n = len(labels)
    return sum(count[b] / n * abs(acc_sum[b] / count[b] - conf_sum[b] / count[b]) for b in range(bins) if count[b])


SUITES = [
    ("gradient-check", gradient_check),
    ("dirichlet-moments", dirichlet_moments),
    ("dirichlet-ks", dirichlet_ks),
    ("dirichlet-pathwise", dirichlet_pathwise),
    ("csgld-gaussian", csgld_gaussian),
    ("schedule-enumeration", schedule_enumeration),
    ("metric-oracles", metric_oracles),
    ("corruptions", corruption_checks),
]


def run_all(names=None) -> list[SuiteResult]:
    out = []
    for name, fn in SUITES:
        if names and name not in names:
            continue
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing suite is a failing suite
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        out.append(SuiteResult(name, ok, detail, time.perf_counter() - t0))
    return out
