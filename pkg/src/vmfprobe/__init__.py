"""Probabilistic contrastive embeddings: vMF concentration as a per-input uncertainty score."""

from .losses import LossBreakdown, LossHyper, alignment_loss, kappa_reg_loss, mc_infonce_loss, simclr_loss, total_loss
from .special import bessel_ratio, log_bessel_i, log_norm_const
from .vmf import VmfParams, estimate_kappa_mle, log_density, sample, unnorm_log_score

__version__ = "0.1.0"
