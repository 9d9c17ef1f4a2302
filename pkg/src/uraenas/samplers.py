"""Cyclical SGLD for network weights and projected gradient descent for b.

Step sizes are quoted in loss scale (the learning rate applied to the mean
minibatch loss gradient). Internally an update is

    w <- w - alpha * (g + w / N) + sqrt(2 * alpha / N) * eps

which is Langevin dynamics on U(w) = N * E[loss] + ||w||^2 / 2 with posterior
step size alpha / N.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, TrainingError
from .rng import stream


class Phase(str, enum.Enum):
    EXPLORATION = "exploration"
    SAMPLING = "sampling"


@dataclass(frozen=True)
class CsgldConfig:
    alpha0: float = 0.1
    K: int = 30
    C: int = 4
    r: float = 0.7
    n_data: int = 5000
    batch_size: int = 64
    paper_literal_update: bool = False

    def __post_init__(self):
        if self.C < 1 or self.K < self.C:
            raise ConfigError(f"need K >= C >= 1, got K={self.K}, C={self.C}")
        if not 0.0 <= self.r < 1.0:
            raise ConfigError(f"exploration fraction r must lie in [0, 1), got {self.r}")
        if self.alpha0 <= 0:
            raise ConfigError(f"alpha0 must be positive, got {self.alpha0}")
        if self.n_data < 1 or self.batch_size < 1:
            raise ConfigError("n_data and batch_size must be positive")


def cycle_length(total_epochs: int, cycles: int) -> int:
    return math.ceil(total_epochs / cycles)


def lr_schedule(k: int, total_epochs: int, cycles: int, alpha0: float) -> float:
    """Cyclical cosine step size for epoch ``k`` (1-based)."""
    m = cycle_length(total_epochs, cycles)
    return alpha0 / 2.0 * (math.cos(math.pi * ((k - 1) % m) / m) + 1.0)


def phase_of(k: int, total_epochs: int, cycles: int, r: float) -> Phase:
    m = cycle_length(total_epochs, cycles)
    return Phase.EXPLORATION if ((k - 1) % m) / m < r else Phase.SAMPLING


def sampling_epochs_per_cycle(total_epochs: int, cycles: int, r: float) -> int:
    m = cycle_length(total_epochs, cycles)
    return sum(1 for i in range(m) if i / m >= r)


def snapshot_epochs(total_epochs: int, cycles: int, r: float, per_cycle: int) -> list[int]:
    """Epochs whose end-of-epoch weights are stored: the last ``per_cycle``
    sampling epochs of each cycle."""
    m = cycle_length(total_epochs, cycles)
    out = []
    for c in range(cycles):
        epochs = [k for k in range(c * m + 1, min((c + 1) * m, total_epochs) + 1)
                  if phase_of(k, total_epochs, cycles, r) is Phase.SAMPLING]
        if len(epochs) < per_cycle:
            raise ConfigError(
                f"cycle {c + 1} has {len(epochs)} sampling epochs but {per_cycle} snapshots are requested"
            )
        out.extend(epochs[len(epochs) - per_cycle :] if per_cycle else [])
    return out


def posterior_grad(w: np.ndarray, minibatch_grad: np.ndarray, n_data: int) -> np.ndarray:
    """Gradient of U(w) = N * mean loss + ||w||^2 / 2."""
    out = n_data * minibatch_grad + w
    if not np.all(np.isfinite(out)):
        raise TrainingError("non-finite posterior gradient")
    return out


def loss_scale_drift(w: np.ndarray, minibatch_grad: np.ndarray, n_data: int, prior: bool = True) -> np.ndarray:
    """grad U / N, i.e. the minibatch gradient plus the prior pull w / N."""
    if not prior:
        return minibatch_grad
    return minibatch_grad + w / n_data


def step_explore(w: np.ndarray, drift: np.ndarray, alpha: float) -> np.ndarray:
    """Noise-free step; ``drift`` is grad U / N (see ``loss_scale_drift``)."""
    return w - alpha * drift


def step_sample(w: np.ndarray, drift: np.ndarray, alpha: float, n_data: int, noise: np.ndarray | None) -> np.ndarray:
    """Langevin step. ``noise=None`` forces eps = 0 (reduces to ``step_explore``)."""
    out = w - alpha * drift
    if noise is not None:
        out = out + math.sqrt(2.0 * alpha / n_data) * noise
    return out


def arch_step(b: np.ndarray, grad_b: np.ndarray, eta: float, clamp: float = 10.0) -> np.ndarray:
    return np.clip(b - eta * grad_b, -clamp, clamp)


@dataclass
class WeightSnapshot:
    weights: np.ndarray
    epoch: int
    cycle: int
    seed: int
    stream: str

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64)
        self.weights.setflags(write=False)


class NoiseSource:
    """Per-parameter-tensor Gaussian streams keyed by (seed, tag, tensor index).

    Each tensor has its own generator, so draws do not depend on how many
    other tensors exist or in which order they are updated.
    """

    def __init__(self, seed: int, tag, shapes: list[tuple[int, ...]]):
        self.shapes = shapes
        self.gens = [stream(seed, "noise", tag, i) for i in range(len(shapes))]

    def draw(self, i: int) -> np.ndarray:
        return self.gens[i].standard_normal(self.shapes[i])


class CsgldSampler:
    """Applies one cSGLD epoch's worth of per-minibatch updates to a list of arrays."""

    def __init__(self, cfg: CsgldConfig, total_epochs: int, seed: int, tag, shapes,
                 noise: bool = True, prior: bool = True):
        self.cfg = cfg
        self.total_epochs = total_epochs
        self.noise = NoiseSource(seed, tag, shapes) if noise else None
        self.prior = prior and not cfg.paper_literal_update

    def alpha(self, k: int) -> float:
        return lr_schedule(k, self.total_epochs, self.cfg.C, self.cfg.alpha0)

    def phase(self, k: int) -> Phase:
        return phase_of(k, self.total_epochs, self.cfg.C, self.cfg.r)

    def update(self, params: list[np.ndarray], grads: list[np.ndarray], k: int, deterministic: bool = False) -> list[np.ndarray]:
        alpha = self.alpha(k)
        sampling = not deterministic and self.noise is not None and self.phase(k) is Phase.SAMPLING
        n = self.cfg.n_data
        out = []
        for i, (w, g) in enumerate(zip(params, grads)):
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter tensor {i}")
            if self.cfg.paper_literal_update:
                # w - alpha * g + sqrt(2 alpha) eps, exactly as written, no N or prior scaling
                new = w - alpha * g
                if sampling:
                    new = new + math.sqrt(2.0 * alpha) * self.noise.draw(i)
            else:
                drift = loss_scale_drift(w, g, n, self.prior)
                new = step_sample(w, drift, alpha, n, self.noise.draw(i) if sampling else None)
            out.append(new)
        return out
