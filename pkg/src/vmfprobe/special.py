"""Log-domain special functions for the von Mises-Fisher distribution.

``I_nu(kappa)`` overflows double precision long before the concentrations a
trained encoder can produce (``I_0(710)`` is already ``inf``), so everything
here returns logarithms and never materializes the Bessel function itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
from numpy.polynomial import Polynomial
from scipy.special import gammaln

LOG_2PI = math.log(2.0 * math.pi)

# Debye terms kept in the uniform expansion. With kappa > 50 the truncation
# error is far below double-precision resolution of log I.
_N_DEBYE = 8


class DomainError(ValueError):
    """Argument outside the domain of a special function."""


@dataclass(frozen=True)
class LogBesselResult:
    value: float
    method: Literal["series", "asymptotic"]

    def __float__(self) -> float:
        return self.value


def _debye_polynomials(n: int) -> list[Polynomial]:
    # u_{k+1}(t) = t^2 (1 - t^2) u_k'(t) / 2 + 1/8 * int_0^t (1 - 5 s^2) u_k(s) ds
    polys = [Polynomial([1.0])]
    t2_1mt2 = Polynomial([0.0, 0.0, 1.0, 0.0, -1.0])
    weight = Polynomial([1.0, 0.0, -5.0])
    for _ in range(n - 1):
        u = polys[-1]
        polys.append(0.5 * t2_1mt2 * u.deriv() + (weight * u).integ() / 8.0)
    return polys


_DEBYE = _debye_polynomials(_N_DEBYE)


def _crossover(nu: float) -> float:
    return max(50.0, 10.0 * nu)


def _log_series(nu: float, kappa: float) -> float:
    # log of sum_k (kappa/2)^(2k+nu) / (k! Gamma(k+nu+1)), summed around its peak.
    log_half = math.log(kappa / 2.0)
    peak = 0.5 * (math.sqrt(nu * nu + kappa * kappa) - nu)
    n_terms = int(peak + 40 + 12 * math.sqrt(peak + 1.0))
    while True:
        k = np.arange(n_terms, dtype=np.float64)
        log_terms = (2.0 * k + nu) * log_half - gammaln(k + 1.0) - gammaln(k + nu + 1.0)
        top = int(np.argmax(log_terms))
        if log_terms[-1] < log_terms[top] - 45.0:
            break
        n_terms *= 2
    m = log_terms[top]
    rest = np.exp(np.delete(log_terms, top) - m)
    return m + math.log1p(math.fsum(rest))


def _log_hankel(nu: float, kappa: float) -> float:
    # Large-argument expansion; only used for nu < 1 where it converges fast.
    mu = 4.0 * nu * nu
    term = 1.0
    total = 1.0
    for k in range(1, 200):
        nxt = -term * (mu - (2 * k - 1) ** 2) / (k * 8.0 * kappa)
        if abs(nxt) >= abs(term):
            break
        term = nxt
        total += term
        if abs(term) < 1e-17 * abs(total):
            break
    return kappa - 0.5 * (LOG_2PI + math.log(kappa)) + math.log(total)


def _log_debye(nu: float, kappa: float) -> float:
    root = math.sqrt(nu * nu + kappa * kappa)
    t = nu / root
    correction = 1.0
    inv_nu_k = 1.0
    for u in _DEBYE[1:]:
        inv_nu_k /= nu
        correction += u(t) * inv_nu_k
    return (
        root
        + nu * math.log(kappa / (nu + root))
        - 0.5 * LOG_2PI
        - 0.25 * math.log(nu * nu + kappa * kappa)
        + math.log(correction)
    )


def log_bessel_i(nu: float, kappa: float) -> LogBesselResult:
    """Natural log of the modified Bessel function of the first kind.

    Power series (summed in log space) up to ``kappa = max(50, 10 nu)``;
    beyond that the uniform Debye expansion (Hankel's expansion for
    ``nu < 1``). ``log I_nu(0)`` is ``-inf`` for ``nu > 0``.
    """
    nu = float(nu)
    kappa = float(kappa)
    if not (math.isfinite(nu) and math.isfinite(kappa)):
        raise DomainError(f"log_bessel_i needs finite arguments, got nu={nu}, kappa={kappa}")
    if nu < 0 or kappa < 0:
        raise DomainError(f"log_bessel_i needs nu >= 0 and kappa >= 0, got nu={nu}, kappa={kappa}")
    if kappa == 0.0:
        return LogBesselResult(0.0 if nu == 0.0 else -math.inf, "series")
    if kappa <= _crossover(nu):
        return LogBesselResult(_log_series(nu, kappa), "series")
    if nu < 1.0:
        return LogBesselResult(_log_hankel(nu, kappa), "asymptotic")
    return LogBesselResult(_log_debye(nu, kappa), "asymptotic")


def _check_dim(dim: int) -> None:
    if int(dim) != dim or dim < 2:
        raise DomainError(f"dim must be an integer >= 2, got {dim}")


def log_norm_const(dim: int, kappa: float) -> float:
    """log C_d(kappa) of the vMF density on the unit sphere in R^dim."""
    _check_dim(dim)
    if not kappa > 0:
        raise DomainError(f"log_norm_const needs kappa > 0, got {kappa}")
    nu = dim / 2.0 - 1.0
    return nu * math.log(kappa) - (dim / 2.0) * LOG_2PI - log_bessel_i(nu, kappa).value


def log_norm_const_asymptotic(dim: int, kappa: float) -> float:
    """Large-kappa approximation ``(d/2-1) log k - k - log sqrt(2 pi k)``.

    Kept exactly in this published form (no ``-(d/2) log 2pi`` term, minus
    sign on the square-root term) because it is only used as a test oracle.
    Its gap to :func:`log_norm_const` is ``log(2 pi k) - (d/2) log 2pi + O(1/k)``,
    so the two agree to 1e-3 relative only from ``kappa ~ 1e4`` on.
    """
    _check_dim(dim)
    if not kappa > 0:
        raise DomainError(f"log_norm_const_asymptotic needs kappa > 0, got {kappa}")
    return (dim / 2.0 - 1.0) * math.log(kappa) - kappa - 0.5 * math.log(2.0 * math.pi * kappa)


def bessel_ratio(dim: int, kappa: float) -> float:
    """Mean resultant length ``A_d(kappa) = I_{d/2}(kappa) / I_{d/2-1}(kappa)``."""
    _check_dim(dim)
    if kappa < 0:
        raise DomainError(f"bessel_ratio needs kappa >= 0, got {kappa}")
    if kappa == 0:
        return 0.0
    nu = dim / 2.0 - 1.0
    return math.exp(log_bessel_i(nu + 1.0, kappa).value - log_bessel_i(nu, kappa).value)


def softplus(x):
    """``log(1 + e^x)`` without overflow; accepts scalars or arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, 0.0))))
    return float(out) if out.ndim == 0 else out


def log_sum_exp(values: Sequence[float]) -> float:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise DomainError("log_sum_exp of an empty sequence")
    m = float(np.max(v))
    if math.isinf(m):
        return m
    return m + math.log(math.fsum(np.exp(v - m)))
