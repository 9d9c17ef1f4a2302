"""Dirichlet distribution over per-edge mixing weights.

Concentrations are parameterized as ``beta = exp(b)``. Samples are drawn
through Gamma variates and carry pathwise derivatives obtained by implicit
reparameterization through the Gamma CDF, so a validation-loss gradient wrt
the mixing weights can be pulled back to ``b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import InputError, TrainingError

B_CLAMP = 10.0
ALPHA_MIN = float(np.exp(-B_CLAMP))
ALPHA_MAX = float(np.exp(B_CLAMP))
MAX_RESAMPLE = 10
# Gamma draws with concentration near exp(-10) routinely sit below the smallest
# double relative to the other components; theta is floored here so it stays > 0.
THETA_FLOOR = 1e-300


def _marsaglia_tsang(alpha: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Gamma(alpha, 1) draws for alpha >= 1, returned as log values."""
    d = alpha - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    out = np.empty_like(alpha)
    todo = np.arange(alpha.size)
    while todo.size:
        x = rng.standard_normal(todo.size)
        u = rng.random(todo.size)
        v = (1.0 + c[todo] * x) ** 3
        ok = v > 0
        logv = np.log(np.where(ok, v, 1.0))
        ok &= np.log(u) < 0.5 * x * x + d[todo] - d[todo] * v + d[todo] * logv
        out[todo[ok]] = np.log(d[todo[ok]]) + logv[ok]
        todo = todo[~ok]
    return out


def gamma_cdf(alpha, z):
    return special.gammainc(alpha, z)


def gamma_logpdf(alpha, z):
    return (alpha - 1.0) * np.log(z) - z - special.gammaln(alpha)


def implicit_dz_dalpha(alpha: np.ndarray, z: np.ndarray) -> np.ndarray:
    """-(dF/dalpha) / (dF/dz) for the regularized lower incomplete gamma F.

    dF/dalpha uses a central difference with step 1e-5 * max(1, alpha).
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    h = 1e-5 * np.maximum(1.0, alpha)
    dfda = (gamma_cdf(alpha + h, z) - gamma_cdf(alpha - h, z)) / (2.0 * h)
    out = np.zeros_like(z)
    pos = z > 0
    out[pos] = -dfda[pos] * np.exp(-gamma_logpdf(alpha[pos], z[pos]))
    return out


def sample_log_gamma(alpha, rng: np.random.Generator) -> np.ndarray:
    """Log of Gamma(alpha, 1) draws; alpha < 1 uses the u**(1/alpha) boost."""
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    if np.any(~np.isfinite(alpha)) or np.any(alpha <= ALPHA_MIN * (1 - 1e-12)) or np.any(alpha >= ALPHA_MAX * (1 + 1e-12)):
        raise InputError(f"gamma shape must lie in (e^-10, e^10), got {alpha}")
    small = alpha < 1.0
    logz = _marsaglia_tsang(np.where(small, alpha + 1.0, alpha), rng)
    if np.any(small):
        u = rng.random(int(small.sum()))
        logz[small] += np.log(u) / alpha[small]
    return logz


def sample_gamma(alpha, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw z ~ Gamma(alpha, 1) and return (z, dz/dalpha)."""
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    z = np.exp(sample_log_gamma(alpha, rng))
    return z, implicit_dz_dalpha(alpha, z)


def dirichlet_mean(beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(beta <= 0):
        raise InputError("Dirichlet concentrations must be positive")
    return beta / beta.sum()


@dataclass
class EdgeSample:
    theta: np.ndarray
    z: np.ndarray
    dz_dbeta: np.ndarray


def sample_dirichlet(beta, rng: np.random.Generator) -> EdgeSample:
    """theta = z / sum(z) with z_o ~ Gamma(beta_o, 1)."""
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(beta <= 0):
        raise InputError("Dirichlet concentrations must be positive")
    for _ in range(MAX_RESAMPLE):
        logz = sample_log_gamma(beta, rng)
        theta = np.exp(logz - special.logsumexp(logz))
        z = np.exp(logz)
        if z.sum() > 0 and np.all(np.isfinite(z)) and np.all(np.isfinite(theta)):
            theta = np.maximum(theta, THETA_FLOOR)
            theta /= theta.sum()
            return EdgeSample(theta, z, implicit_dz_dalpha(beta, z))
    raise TrainingError(f"Dirichlet draw underflowed {MAX_RESAMPLE} times for beta={beta}")


def sample_dirichlet_batch(beta, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``n`` independent draws at once: (theta [n,K], z [n,K], dz/dbeta [n,K])."""
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(beta <= 0):
        raise InputError("Dirichlet concentrations must be positive")
    alpha = np.broadcast_to(beta, (n, beta.size)).reshape(-1)
    logz = sample_log_gamma(alpha, rng).reshape(n, beta.size)
    theta = np.maximum(np.exp(logz - special.logsumexp(logz, axis=1, keepdims=True)), THETA_FLOOR)
    theta /= theta.sum(axis=1, keepdims=True)
    z = np.exp(logz)
    if not np.all(np.isfinite(z)) or np.any(z.sum(axis=1) <= 0):
        raise TrainingError(f"Dirichlet draw underflowed for beta={beta}")
    dz = implicit_dz_dalpha(alpha, z.reshape(-1)).reshape(n, beta.size)
    return theta, z, dz


def dirichlet_vjp(sample: EdgeSample, g_theta: np.ndarray) -> np.ndarray:
    """Pull dL/dtheta back to dL/dbeta through theta = z / sum(z)."""
    g_theta = np.asarray(g_theta, dtype=np.float64)
    s = sample.z.sum()
    return sample.dz_dbeta * (g_theta - np.dot(g_theta, sample.theta)) / s


def dirichlet_jacobian(sample: EdgeSample) -> np.ndarray:
    """d theta_i / d beta_j for one draw."""
    s = sample.z.sum()
    k = sample.theta.size
    return (np.eye(k) - sample.theta[:, None]) * sample.dz_dbeta[None, :] / s


@dataclass
class ArchSample:
    """One mixing-weight draw for every edge."""

    edges: dict[str, EdgeSample]
    stream: str = ""

    @property
    def theta(self) -> dict[str, np.ndarray]:
        return {k: v.theta for k, v in self.edges.items()}


@dataclass
class ConcentrationParams:
    b: dict[str, np.ndarray]
    reg_weight: float = 1e-3
    anchor: float = 1.0
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, edge_ids, num_ops: int, reg_weight: float = 1e-3, b0: float = 0.0) -> "ConcentrationParams":
        return cls({e: np.full(num_ops, float(b0)) for e in edge_ids}, reg_weight)

    @property
    def beta(self) -> dict[str, np.ndarray]:
        return {e: np.exp(v) for e, v in self.b.items()}

    def mean(self) -> dict[str, np.ndarray]:
        return {e: dirichlet_mean(v) for e, v in self.beta.items()}

    def copy(self) -> "ConcentrationParams":
        return ConcentrationParams({e: v.copy() for e, v in self.b.items()}, self.reg_weight, self.anchor, dict(self.meta))

    def sample(self, rng: np.random.Generator, stream: str = "") -> ArchSample:
        return ArchSample({e: sample_dirichlet(beta, rng) for e, beta in self.beta.items()}, stream)

    def regularizer(self) -> float:
        return float(sum(self.reg_weight * np.sum((beta - self.anchor) ** 2) for beta in self.beta.values()))

    def to_json(self) -> str:
        doc = {
            "b": {e: [float(x) for x in v] for e, v in self.b.items()},
            "reg_weight": self.reg_weight,
            "anchor": self.anchor,
            "meta": self.meta,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ConcentrationParams":
        doc = json.loads(text)
        return cls(
            {e: np.asarray(v, dtype=np.float64) for e, v in doc["b"].items()},
            float(doc["reg_weight"]),
            float(doc.get("anchor", 1.0)),
            doc.get("meta", {}),
        )


def arch_objective_grad(
    params: ConcentrationParams,
    val_grad_theta: dict[str, np.ndarray],
    sample: ArchSample,
) -> dict[str, np.ndarray]:
    """Gradient wrt b of  L_val(theta(b)) + lam * ||exp(b) - 1||^2  for one draw."""
    out = {}
    for e, b in params.b.items():
        beta = np.exp(b)
        g_beta = dirichlet_vjp(sample.edges[e], val_grad_theta[e])
        g = g_beta * beta + 2.0 * params.reg_weight * (beta - params.anchor) * beta
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite architecture gradient on edge {e}: {g}")
        out[e] = g
    return out
