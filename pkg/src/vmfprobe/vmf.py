"""von Mises-Fisher distribution: densities, sampling and concentration estimates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .special import log_norm_const

UNIT_TOL = 1e-9
MAX_REJECTION_ROUNDS = 1_000_000


class SamplerError(RuntimeError):
    """The rejection sampler did not accept within the iteration cap."""


class InfiniteConcentration(ValueError):
    """Samples are all identical; the concentration estimate diverges."""


def check_unit(x: np.ndarray, name: str = "vector") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(np.atleast_2d(x), axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError(f"{name} must have unit norm (got norms {norms.min():.12g}..{norms.max():.12g})")
    return x


@dataclass(frozen=True)
class VmfParams:
    mu: np.ndarray
    kappa: float

    def __post_init__(self):
        mu = check_unit(self.mu, "mu")
        if mu.ndim != 1 or mu.size < 2:
            raise ValueError("mu must be a vector of length >= 2")
        if not self.kappa >= 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "kappa", float(self.kappa))

    @property
    def dim(self) -> int:
        return self.mu.size


def _check_points(params: VmfParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.dim:
        raise ValueError(f"dimension mismatch: mu has {params.dim} coords, x has {x.shape[-1]}")
    return x


def unnorm_log_score(params: VmfParams, x) -> float | np.ndarray:
    """``kappa * mu^T x``, the log of the unnormalized density."""
    x = _check_points(params, x)
    out = params.kappa * (x @ params.mu)
    return float(out) if np.ndim(out) == 0 else out


def log_density(params: VmfParams, x) -> float | np.ndarray:
    x = _check_points(params, x)
    if params.kappa == 0:
        # Uniform density: limit of log C(kappa) as kappa -> 0.
        d = params.dim
        log_c = gammaln(d / 2.0) - np.log(2.0) - (d / 2.0) * np.log(np.pi)
    else:
        log_c = log_norm_const(params.dim, params.kappa)
    out = log_c + params.kappa * (x @ params.mu)
    return float(out) if np.ndim(out) == 0 else out


def sample_w(kappa, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``w = mu^T x`` by Wood's rejection scheme, one draw per entry of ``kappa``."""
    kappa = np.atleast_1d(np.asarray(kappa, dtype=np.float64))
    m = dim - 1.0
    b = m / (2.0 * kappa + np.sqrt(4.0 * kappa**2 + m**2))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + m * np.log1p(-(x0**2))

    w = np.empty_like(kappa)
    todo = np.arange(kappa.size)
    for _ in range(MAX_REJECTION_ROUNDS):
        if todo.size == 0:
            return w
        z = rng.beta(m / 2.0, m / 2.0, size=todo.size)
        bt, xt = b[todo], x0[todo]
        cand = (1.0 - (1.0 + bt) * z) / (1.0 - (1.0 - bt) * z)
        log_u = np.log(rng.uniform(size=todo.size))
        ok = kappa[todo] * cand + m * np.log1p(-xt * cand) - c[todo] >= log_u
        w[todo[ok]] = cand[ok]
        todo = todo[~ok]
    raise SamplerError(f"vMF rejection sampler exceeded {MAX_REJECTION_ROUNDS} rounds")


def sample_canonical(kappa, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Samples around the north pole ``e_1``, one row per entry of ``kappa``."""
    w = sample_w(kappa, dim, rng)
    v = rng.standard_normal((w.size, dim - 1))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.column_stack([w, np.sqrt(np.clip(1.0 - w**2, 0.0, None))[:, None] * v])


def householder_from_pole(y: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Apply the reflection mapping ``e_1`` onto ``mu`` to each row of ``y``.

    ``mu`` is either one direction or one direction per row.
    """
    y = np.asarray(y, dtype=np.float64)
    mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), y.shape)
    u = -mu.copy()
    u[:, 0] += 1.0
    s = 1.0 - mu[:, 0]  # ||u||^2 / 2 for unit mu
    coef = np.zeros_like(s)
    live = s > 1e-12
    coef[live] = np.einsum("ij,ij->i", u[live], y[live]) / s[live]
    return y - coef[:, None] * u


def sample(params: VmfParams, n: int, rng_seed: int) -> np.ndarray:
    """``n`` i.i.d. vMF draws as rows of an ``(n, d)`` array."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng_seed)
    y = sample_canonical(np.full(n, params.kappa), params.dim, rng)
    return householder_from_pole(y, params.mu)


def mean_resultant_length(samples) -> float:
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if x.shape[0] < 1:
        raise ValueError("need at least one sample")
    return float(np.linalg.norm(x.mean(axis=0)))


def estimate_kappa_mle(samples) -> float:
    """Banerjee et al. closed-form approximation ``r(d - r^2) / (1 - r^2)``."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if x.shape[0] < 2:
        raise ValueError("need at least two samples")
    r = mean_resultant_length(x)
    if r >= 1.0 - 1e-15:
        raise InfiniteConcentration("all samples coincide; concentration is unbounded")
    d = x.shape[1]
    return r * (d - r * r) / (1.0 - r * r)
