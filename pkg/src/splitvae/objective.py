"""Training objective: negative ELBO of the two-channel splitting model.

The reconstruction terms are summed over pixels and averaged over the batch,
the same aggregation the KL terms use, so the KL weight keeps its meaning
across both KL modes.
"""

import math
from dataclasses import dataclass

import torch

from .noisemodel import GmmNoiseModel
from .vse import kl_loss, kl_tensors

_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


@dataclass
class Batch:
    """Standardised network inputs ``(B, 1, H, W)`` and raw noisy targets ``(B, 2, H, W)``."""

    x: torch.Tensor
    targets: torch.Tensor


def gaussian_log_likelihood(pred, target):
    """Unit-variance Gaussian log-likelihood: pixel sum, batch mean.

    A 2D input is treated as a batch of one image.
    """
    diff = pred - target
    ll = -_HALF_LOG_2PI - 0.5 * diff**2
    if ll.dim() <= 2:
        return ll.sum()
    return ll.flatten(1).sum(dim=1).mean()


def noise_model_log_likelihood(nm, noisy, clean):
    """Noise-model log-likelihood of raw ``noisy`` given raw ``clean``: pixel sum, batch mean."""
    ll = nm.log_prob(noisy, clean)
    if ll.dim() <= 2:
        return ll.sum()
    return ll.flatten(1).sum(dim=1).mean()


def reconstruction_terms(model, pred, targets, noise_models=None):
    """``(recon1, recon2)`` for a ``(B, 2, H, W)`` prediction in standardised units."""
    head = model.config.likelihood_head
    if head == "gaussian":
        t = model.normalize_targets(targets)
        return gaussian_log_likelihood(pred[:, 0], t[:, 0]), gaussian_log_likelihood(pred[:, 1], t[:, 1])
    nm1, nm2 = _require_noise_models(noise_models)
    raw = model.to_raw(pred)
    return (
        noise_model_log_likelihood(nm1, targets[:, 0], raw[:, 0]),
        noise_model_log_likelihood(nm2, targets[:, 1], raw[:, 1]),
    )


def _require_noise_models(noise_models):
    if noise_models is None or len(noise_models) != 2 or any(nm is None for nm in noise_models):
        raise ValueError("the noise_model likelihood head needs two noise models (one per channel)")
    for nm in noise_models:
        if not isinstance(nm, GmmNoiseModel):
            raise TypeError(f"training needs differentiable GMM noise models, got {type(nm).__name__}")
    return noise_models


def total_loss(model, batch, noise_models=None, generator=None, mode="stochastic"):
    """Negative ELBO for one batch.

    Parameters
    ----------
    model : VseModel
    batch : Batch
    noise_models : (GmmNoiseModel, GmmNoiseModel), optional
        Required when ``model.config.likelihood_head == "noise_model"``.
    generator : torch.Generator, optional
        Source of the single latent sample drawn per call.
    mode : {"stochastic", "posterior_mean"}

    Returns
    -------
    loss : torch.Tensor
        ``-(recon1 + recon2) + kl``.
    parts : dict
        ``recon1``, ``recon2`` and ``kl`` as tensors, plus the prediction.
    """
    cfg = model.config
    if cfg.likelihood_head == "noise_model":
        _require_noise_models(noise_models)
    pred, hierarchy = model(batch.x, mode=mode, generator=generator)
    recon1, recon2 = reconstruction_terms(model, pred, batch.targets, noise_models)
    kl = kl_loss(kl_tensors(hierarchy), cfg.kl_mode, cfg.kl_weight, cfg.free_bits)
    loss = -(recon1 + recon2) + kl
    return loss, {"recon1": recon1, "recon2": recon2, "kl": kl, "pred": pred}
