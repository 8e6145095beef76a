"""Variational splitting encoder-decoder.

A hierarchical VAE whose decoder emits two channel images instead of
reconstructing its input. The encoder is a bottom-up convolutional pyramid;
level ``i`` (``i = 0`` is the finest) carries a diagonal Gaussian posterior of
shape ``(c, H / 2**(i+1), W / 2**(i+1))``. The decoder walks top-down: the
coarsest level has a standard normal prior, every finer level has a
conditional prior predicted from the samples above it.

Tensors follow the torch ``(batch, channel, height, width)`` convention.
"""

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

LIKELIHOOD_HEADS = ("gaussian", "noise_model")
KL_MODES = ("musplit", "denoisplit")
SAMPLING_MODES = ("stochastic", "posterior_mean")


@dataclass
class VseConfig:
    levels: int = 3
    latent_channels: int = 8
    base_filters: int = 32
    patch: int = 64
    likelihood_head: str = "noise_model"
    kl_mode: str = "denoisplit"
    kl_weight: float = 1.0
    free_bits: float = 0.0

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.latent_channels < 1 or self.base_filters < 1:
            raise ValueError("latent_channels and base_filters must be positive")
        if self.patch % (2**self.levels):
            raise ValueError(f"patch {self.patch} must be divisible by 2**levels = {2**self.levels}")
        if self.likelihood_head not in LIKELIHOOD_HEADS:
            raise ValueError(f"likelihood_head must be one of {LIKELIHOOD_HEADS}, got {self.likelihood_head!r}")
        if self.kl_mode not in KL_MODES:
            raise ValueError(f"kl_mode must be one of {KL_MODES}, got {self.kl_mode!r}")
        if not self.kl_weight > 0:
            raise ValueError(f"kl_weight must be > 0, got {self.kl_weight}")
        if self.free_bits < 0:
            raise ValueError(f"free_bits must be >= 0, got {self.free_bits}")

    def to_dict(self):
        return asdict(self)

    def level_shapes(self, height=None, width=None):
        height = height or self.patch
        width = width or self.patch
        return [(self.latent_channels, height >> (i + 1), width >> (i + 1)) for i in range(self.levels)]


@dataclass
class LatentHierarchy:
    """Per-level Gaussian parameters and samples; index 0 is the finest level.

    ``mu``/``logstd`` are filled by :meth:`VseModel.encode`, ``z`` by
    :func:`sample_latents` and ``prior_mu``/``prior_logstd`` by
    :meth:`VseModel.decode`.
    """

    mu: list
    logstd: list
    z: list = None
    prior_mu: list = None
    prior_logstd: list = None

    @property
    def levels(self):
        return len(self.mu)

    @property
    def shapes(self):
        return [tuple(m.shape[1:]) for m in self.mu]


def sample_latents(hierarchy, mode="stochastic", generator=None):
    """Fill ``hierarchy.z`` and return the hierarchy.

    ``stochastic`` draws ``z = mu + exp(logstd) * eps`` (reparameterised, so
    gradients reach ``mu`` and ``logstd``); ``posterior_mean`` sets ``z = mu``.
    ``generator`` is a :class:`torch.Generator` that makes draws reproducible.
    """
    if mode not in SAMPLING_MODES:
        raise ValueError(f"sampling mode must be one of {SAMPLING_MODES}, got {mode!r}")
    if mode == "posterior_mean":
        z = list(hierarchy.mu)
    else:
        z = []
        for mu, logstd in zip(hierarchy.mu, hierarchy.logstd):
            eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
            z.append(mu + torch.exp(logstd) * eps)
    hierarchy.z = z
    return hierarchy


def gaussian_kl(mu_q, logstd_q, mu_p, logstd_p):
    """Element-wise KL(N(mu_q, s_q^2) || N(mu_p, s_p^2))."""
    var_ratio = torch.exp(2 * (logstd_q - logstd_p))
    t = ((mu_q - mu_p) * torch.exp(-logstd_p)) ** 2
    return 0.5 * (var_ratio + t - 1) - (logstd_q - logstd_p)


def kl_tensors(hierarchy):
    """Per-level KL maps, each shaped like the level's latents (batch included)."""
    if hierarchy.prior_mu is None:
        raise ValueError("prior parameters missing; run decode() on the hierarchy first")
    return [
        gaussian_kl(mq, lq, mp, lp)
        for mq, lq, mp, lp in zip(hierarchy.mu, hierarchy.logstd, hierarchy.prior_mu, hierarchy.prior_logstd)
    ]


def kl_level(kl_map, mode, kl_weight, free_bits=0.0):
    """Scalar KL term of one level.

    ``kl_map`` has shape ``(batch, c, h, w)``. The per-channel mean over batch
    and space is clamped from below at ``free_bits`` nats. ``musplit`` sums the
    clamped channel means (each level contributes an average), ``denoisplit``
    multiplies that by ``h * w`` (each latent pixel contributes in full).
    """
    if mode not in KL_MODES:
        raise ValueError(f"kl mode must be one of {KL_MODES}, got {mode!r}")
    if kl_map.dim() == 3:
        kl_map = kl_map.unsqueeze(0)
    per_channel = kl_map.mean(dim=(0, 2, 3))
    if free_bits > 0:
        per_channel = per_channel.clamp(min=free_bits)
    total = kl_weight * per_channel.sum()
    if mode == "denoisplit":
        total = total * (kl_map.shape[2] * kl_map.shape[3])
    return total


def kl_loss(kl_maps, mode, kl_weight=1.0, free_bits=0.0):
    """Sum of :func:`kl_level` over all levels."""
    return sum(kl_level(m, mode, kl_weight, free_bits) for m in kl_maps)


class ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.elu(self.conv1(F.elu(x))))


class VseModel(nn.Module):
    """Hierarchical encoder/decoder with a two-channel output head.

    The model works on standardised intensities. ``data_mean``/``data_std``
    (buffers, stored in checkpoints) map raw mixtures to network inputs; each
    output channel is mapped back to raw units with ``out * std + mean / 2`` so
    that the two raw channels sum to the raw mixture scale.
    """

    def __init__(self, config=None):
        super().__init__()
        self.config = config or VseConfig()
        nf = self.config.base_filters
        c = self.config.latent_channels
        n = self.config.levels
        self.register_buffer("data_mean", torch.zeros(()))
        self.register_buffer("data_std", torch.ones(()))

        self.stem = nn.Sequential(nn.Conv2d(1, nf, 3, padding=1), ResBlock(nf))
        self.down = nn.ModuleList(
            nn.Sequential(nn.Conv2d(nf, nf, 3, stride=2, padding=1), ResBlock(nf)) for _ in range(n)
        )
        self.posterior = nn.ModuleList(nn.Conv2d(nf, 2 * c, 3, padding=1) for _ in range(n))
        # top-down path; index i serves level i
        self.prior = nn.ModuleList(nn.Conv2d(nf, 2 * c, 3, padding=1) for _ in range(n - 1))
        self.top_in = nn.Conv2d(c, nf, 3, padding=1)
        self.merge = nn.ModuleList(nn.Conv2d(nf + c, nf, 1) for _ in range(n - 1))
        self.td_block = nn.ModuleList(ResBlock(nf) for _ in range(n))
        self.up = nn.ModuleList(nn.Conv2d(nf, nf, 3, padding=1) for _ in range(n))
        self.head = nn.Sequential(ResBlock(nf), nn.ELU(), nn.Conv2d(nf, 2, 1))

        for conv in list(self.posterior) + list(self.prior):
            nn.init.zeros_(conv.bias)
            conv.weight.data.mul_(0.1)

    # -- normalisation ------------------------------------------------------

    def set_normalization(self, mean, std):
        if not std > 0:
            raise ValueError("normalisation std must be positive")
        self.data_mean.fill_(float(mean))
        self.data_std.fill_(float(std))

    def normalize_input(self, x):
        return (x - self.data_mean) / self.data_std

    def normalize_targets(self, t):
        return (t - 0.5 * self.data_mean) / self.data_std

    def to_raw(self, t):
        return t * self.data_std + 0.5 * self.data_mean

    # -- core ---------------------------------------------------------------

    def _check_input(self, x):
        if x.dim() == 2:
            x = x[None, None]
        elif x.dim() == 3:
            x = x[:, None]
        if x.dim() != 4 or x.shape[1] != 1:
            raise ValueError(f"expected input of shape (B, 1, H, W), got {tuple(x.shape)}")
        step = 2**self.config.levels
        if x.shape[-2] % step or x.shape[-1] % step or x.shape[-2] < step or x.shape[-1] < step:
            raise ValueError(
                f"spatial size {tuple(x.shape[-2:])} is not a positive multiple of 2**levels = {step}"
            )
        return x

    def encode(self, x):
        """Posterior parameters for a batch of standardised inputs ``(B, 1, H, W)``."""
        x = self._check_input(x)
        h = self.stem(x)
        mus, logstds = [], []
        for down, post in zip(self.down, self.posterior):
            h = down(h)
            mu, logstd = post(h).chunk(2, dim=1)
            mus.append(mu)
            logstds.append(logstd)
        return LatentHierarchy(mu=mus, logstd=logstds)

    def decode(self, hierarchy):
        """Top-down pass from sampled latents to a ``(B, 2, H, W)`` prediction.

        Fills ``hierarchy.prior_mu`` / ``hierarchy.prior_logstd`` along the way.
        """
        n = self.config.levels
        z = hierarchy.z
        if z is None or len(z) != n or any(t is None for t in z):
            raise ValueError(f"decode needs sampled latents for all {n} levels")
        top = z[n - 1]
        prior_mu = [None] * n
        prior_logstd = [None] * n
        prior_mu[n - 1] = torch.zeros_like(top)
        prior_logstd[n - 1] = torch.zeros_like(top)

        h = self.td_block[n - 1](self.top_in(top))
        for i in range(n - 2, -1, -1):
            h = F.elu(self.up[i + 1](F.interpolate(h, scale_factor=2, mode="nearest")))
            p_mu, p_logstd = self.prior[i](h).chunk(2, dim=1)
            prior_mu[i] = p_mu
            prior_logstd[i] = p_logstd
            h = self.td_block[i](self.merge[i](torch.cat([h, z[i]], dim=1)))
        h = F.elu(self.up[0](F.interpolate(h, scale_factor=2, mode="nearest")))
        hierarchy.prior_mu = prior_mu
        hierarchy.prior_logstd = prior_logstd
        return self.head(h)

    def forward(self, x, mode="stochastic", generator=None):
        hierarchy = self.encode(x)
        sample_latents(hierarchy, mode, generator)
        pred = self.decode(hierarchy)
        return pred, hierarchy

    def n_parameters(self):
        return sum(p.numel() for p in self.parameters())
