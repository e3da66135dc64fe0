"""Per-sample ELBO terms, the weighted generator objective and discriminator BCE.

Reductions sum over pixels / latent dimensions within a sample (nats per
sample); optimization uses the batch mean of the per-sample total.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .nn import bce_with_logits, bce_with_logits_grad

REDUCTION = "sum"


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 1.0
    alpha2: float = 1.0

    def __post_init__(self):
        for a in (self.alpha1, self.alpha2):
            if not math.isfinite(a) or a < 0:
                raise ConfigError(f"loss weights must be finite and >= 0, got {a}")


@dataclass
class PerSampleLoss:
    recon1: np.ndarray
    kl1: np.ndarray
    recon2: np.ndarray
    kl2: np.ndarray
    total: np.ndarray


def kl_divergence(mu, logvar):
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over the latent axis."""
    return 0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar, axis=1)


def kl_divergence_grad(mu, logvar):
    return mu, 0.5 * (np.exp(logvar) - 1.0)


def _check_target(x):
    if np.any(x < 0) or np.any(x > 1):
        raise ValueError("reconstruction target must lie in [0, 1]")


def reconstruction_nll(x_logits, x):
    """Per-sample Bernoulli cross entropy between ``sigmoid(x_logits)`` and ``x``."""
    if x_logits.shape != x.shape:
        raise DimensionError(f"logits shape {x_logits.shape} != target shape {x.shape}")
    _check_target(x)
    return bce_with_logits(x_logits, x).reshape(x.shape[0], -1).sum(axis=1)


def generator_loss(out, x, w=LossWeights()):
    recon1 = reconstruction_nll(out.x1_logits, x)
    kl1 = kl_divergence(out.latent1.mu, out.latent1.logvar)
    if out.latent2 is not None:
        recon2 = reconstruction_nll(out.x2_logits, x)
        kl2 = kl_divergence(out.latent2.mu, out.latent2.logvar)
    else:
        recon2 = np.zeros_like(recon1)
        kl2 = np.zeros_like(kl1)
    total = w.alpha1 * (recon1 + kl1) + w.alpha2 * (recon2 + kl2)
    return PerSampleLoss(recon1, kl1, recon2, kl2, total)


def generator_loss_grad(out, x, w=LossWeights()):
    """Gradient of ``mean(total)`` with respect to the generator outputs.

    Keys match what :func:`cvad.models.generator_backward` consumes.
    """
    n = x.shape[0]
    a1, a2 = w.alpha1 / n, w.alpha2 / n
    dmu1, dlv1 = kl_divergence_grad(out.latent1.mu, out.latent1.logvar)
    up = {
        "x1_logits": a1 * bce_with_logits_grad(out.x1_logits, x),
        "mu1": a1 * dmu1,
        "logvar1": a1 * dlv1,
    }
    if out.latent2 is not None:
        dmu2, dlv2 = kl_divergence_grad(out.latent2.mu, out.latent2.logvar)
        up.update({
            "x2_logits": a2 * bce_with_logits_grad(out.x2_logits, x),
            "mu2": a2 * dmu2,
            "logvar2": a2 * dlv2,
        })
    return up


def discriminator_loss(p_real, p_fake):
    """Mean BCE with real samples labelled 0 and reconstructions labelled 1."""
    p_real = np.asarray(p_real, dtype=np.float64).ravel()
    p_fake = np.asarray(p_fake, dtype=np.float64).ravel()
    for p in (p_real, p_fake):
        if np.any(p <= 0) or np.any(p >= 1):
            raise ValueError("discriminator probabilities must lie in the open interval (0, 1)")
    terms = np.concatenate([-np.log1p(-p_real), -np.log(p_fake)])
    return float(terms.mean())


def discriminator_loss_logits(logit_real, logit_fake):
    """Same objective on logits; returns ``(loss, dlogit_real, dlogit_fake)``."""
    n = logit_real.shape[0] + logit_fake.shape[0]
    loss = (bce_with_logits(logit_real, 0.0).sum() + bce_with_logits(logit_fake, 1.0).sum()) / n
    return float(loss), bce_with_logits_grad(logit_real, 0.0) / n, bce_with_logits_grad(logit_fake, 1.0) / n
