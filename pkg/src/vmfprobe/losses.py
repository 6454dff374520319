"""Alignment, concentration-regularization, SimCLR and MC-InfoNCE losses.

Every loss takes tape tensors (or plain arrays, which are wrapped as
constants on a fresh tape) and returns a scalar :class:`~vmfprobe.diff.Tensor`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diff as D
from .model import EmbeddingBatch, ProbEmbedding
from .vmf import sample_canonical

# Log guard used by the reference training loop. The alignment term is
# evaluated in closed form (log exp cancels), so it is not applied there.
EPSILON = 1e-6
MC_KAPPA_INIT = 16.0  # concentration used by mc_infonce_loss when a batch carries none


@dataclass(frozen=True)
class LossHyper:
    lambda_align: float = 0.05
    lambda_reg: float = 0.005
    temperature: float = 0.5

    def __post_init__(self):
        if self.lambda_align < 0 or self.lambda_reg < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    align: float
    reg: float
    contrastive: float
    total: float
    hyper: LossHyper


def _tensors(*xs):
    tape = next((x.tape for x in xs if isinstance(x, D.Tensor)), None) or D.Tape()
    return [x if isinstance(x, D.Tensor) else tape.constant(np.asarray(x, dtype=np.float64)) for x in xs]


def _batches(e1, e2) -> tuple[EmbeddingBatch, EmbeddingBatch]:
    mu1, k1, mu2, k2 = _tensors(e1[0], e1[1], e2[0], e2[1])
    return EmbeddingBatch(mu1, k1), EmbeddingBatch(mu2, k2)


def simclr_loss(mu1, mu2, temperature: float = 0.5) -> D.Tensor:
    """NT-Xent over the ``2n`` views with the self-similarity masked out."""
    mu1, mu2 = _tensors(mu1, mu2)
    if mu1.shape != mu2.shape or mu1.data.ndim != 2:
        raise D.ShapeError(f"view batches must be matching matrices, got {mu1.shape} and {mu2.shape}")
    n = mu1.shape[0]
    if n < 2:
        raise ValueError("simclr_loss needs at least 2 pairs (no negatives otherwise)")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    for m in (mu1, mu2):
        if np.any(np.abs(np.linalg.norm(m.data, axis=1) - 1.0) > 1e-6):
            raise ValueError("simclr_loss expects unit-norm rows")
    z = D.concat_rows(mu1, mu2)
    sim = D.mul(D.matmul(z, D.transpose(z)), 1.0 / temperature)
    rows = np.arange(2 * n)
    positives = np.concatenate([rows[n:], rows[:n]])
    lse = D.masked_logsumexp_rows(sim, ~np.eye(2 * n, dtype=bool))
    return D.mean(D.sub(lse, D.take(sim, rows, positives)))


def alignment_loss(e1, e2, lambda_align: float = 0.05) -> D.Tensor:
    """Mean over pairs of ``-lambda (kappa1 + kappa2) mu1^T mu2``."""
    (mu1, k1), (mu2, k2) = _batches(e1, e2)
    if mu1.shape != mu2.shape or k1.shape != k2.shape:
        raise D.ShapeError("embedding batches must have the same length and dimension")
    cos = D.dot_rows(mu1, mu2)
    return D.mul(D.mean(D.mul(D.add(k1, k2), cos)), -float(lambda_align))


def kappa_reg_loss(kappas1, kappas2, lambda_reg: float = 0.005) -> D.Tensor:
    """``lambda * mean(kappa1^2 + kappa2^2)``."""
    k1, k2 = _tensors(kappas1, kappas2)
    if k1.shape != k2.shape:
        raise D.ShapeError("kappa batches must have the same length")
    if np.any(k1.data < 0) or np.any(k2.data < 0):
        raise ValueError("concentrations must be non-negative")
    return D.mul(D.mean(D.add(D.mul(k1, k1), D.mul(k2, k2))), float(lambda_reg))


def kappa_log_prior(kappa: float, lambda_reg: float) -> float:
    """Log density of the half-Gaussian prior ``p(kappa) ∝ exp(-lambda kappa^2)`` on kappa >= 0."""
    return -lambda_reg * kappa * kappa - math.log(0.5 * math.sqrt(math.pi / lambda_reg))


def total_loss_tensor(e1, e2, hyper: LossHyper = LossHyper()) -> tuple[D.Tensor, LossBreakdown]:
    e1, e2 = _batches(e1, e2)
    align = alignment_loss(e1, e2, hyper.lambda_align)
    reg = kappa_reg_loss(e1.kappa, e2.kappa, hyper.lambda_reg)
    contrastive = simclr_loss(e1.mu, e2.mu, hyper.temperature)
    total = D.add(D.add(align, reg), contrastive)
    parts = LossBreakdown(align.item(), reg.item(), contrastive.item(), total.item(), hyper)
    return total, parts


def total_loss(e1, e2, hyper: LossHyper = LossHyper()) -> LossBreakdown:
    return total_loss_tensor(e1, e2, hyper)[1]


def analytic_alignment_gradients(e1, e2, lambda_align: float = 0.05):
    """Closed-form gradients of the single-pair alignment loss w.r.t. ``mu1`` and ``kappa1``.

    ``e1`` and ``e2`` are :class:`~vmfprobe.model.ProbEmbedding` or ``(mu, kappa)``
    pairs. Taken at the level of the unit vector ``mu1`` itself, before any
    projection onto the sphere's tangent space.
    """
    mu1, kappa1 = _unpack(e1)
    mu2, kappa2 = _unpack(e2)
    grad_mu1 = -lambda_align * (kappa1 * mu2 + kappa2 * mu2)
    grad_kappa1 = -lambda_align * float(mu1 @ mu2)
    return grad_mu1, grad_kappa1


def _unpack(e):
    mu, kappa = (e.mu, e.kappa) if isinstance(e, ProbEmbedding) else e
    return np.asarray(mu, dtype=np.float64), float(kappa)


def mc_infonce_loss(
    e1, e2, n_samples: int = 64, temperature: float = 0.5, rng_seed: int = 0, kappa_init: float = MC_KAPPA_INIT
) -> D.Tensor:
    """Monte Carlo SimCLR loss over vMF samples of both views, averaged over replicates.

    A batch given as ``(mu, None)`` is sampled at the constant ``kappa_init``.

    Samples are ``H(mu) y`` with ``y`` drawn around the north pole, so
    gradients reach ``mu`` through the Householder map. The rejection-sampled
    ``w = mu^T x`` is a constant: ``kappa`` receives no gradient from this loss.
    """
    e1, e2 = (_with_kappa(e, kappa_init) for e in (e1, e2))
    (mu1, k1), (mu2, k2) = _batches(e1, e2)
    if mu1.shape != mu2.shape:
        raise D.ShapeError("embedding batches must match")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    n, d = mu1.shape
    if n < 2:
        raise ValueError("mc_infonce_loss needs at least 2 pairs")
    rng = np.random.default_rng(rng_seed)
    y1 = sample_canonical(np.tile(k1.data, n_samples), d, rng).reshape(n_samples, n, d)
    y2 = sample_canonical(np.tile(k2.data, n_samples), d, rng).reshape(n_samples, n, d)
    total = None
    for r in range(n_samples):
        s1 = D.householder_rows(mu1, y1[r])
        s2 = D.householder_rows(mu2, y2[r])
        term = simclr_loss(s1, s2, temperature)
        total = term if total is None else D.add(total, term)
    return D.mul(total, 1.0 / n_samples)


def _with_kappa(e, kappa_init: float):
    mu, kappa = e
    if kappa is None:
        n = (mu.data if isinstance(mu, D.Tensor) else np.asarray(mu)).shape[0]
        kappa = np.full(n, float(kappa_init))
    return mu, kappa
