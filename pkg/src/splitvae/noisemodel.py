"""Pixel noise models ``P(noisy | clean)``.

Two representations are provided:

* :class:`GmmNoiseModel` - a signal-conditioned Gaussian mixture whose weights,
  mean offsets and standard deviations are polynomials of the normalised
  clean signal. It is differentiable with respect to the clean signal and is
  what the splitting network trains against.
* :class:`HistogramNoiseModel` - a 2D co-occurrence table of (clean, noisy)
  intensities. It is non-parametric and mostly serves as an independent check
  on GMM fits.

Both treat pixels independently, so the log-likelihood of an image is the sum
of per-pixel log densities. Densities are floored at ``DENSITY_FLOOR`` before
taking the log.
"""

import json
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DENSITY_FLOOR = 1e-10
LOG_DENSITY_FLOOR = math.log(DENSITY_FLOOR)
MIN_FIT_PIXELS = 100_000
_LOG_2PI = math.log(2 * math.pi)


def _stack_pairs(pairs):
    if len(pairs) == 0:
        raise ValueError("no (clean, noisy) pairs given")
    clean, noisy = [], []
    for c, n in pairs:
        c = np.asarray(c, dtype=np.float64)
        n = np.asarray(n, dtype=np.float64)
        if c.shape != n.shape:
            raise ValueError(f"clean/noisy shape mismatch: {c.shape} vs {n.shape}")
        clean.append(c.ravel())
        noisy.append(n.ravel())
    return np.concatenate(clean), np.concatenate(noisy)


def _softplus_inv(x):
    x = np.asarray(x, dtype=np.float64)
    return x + np.log(-np.expm1(-x))


def _polyval(coeffs, s):
    """Evaluate ``sum_d coeffs[:, d] * s**d`` for every component; returns (..., K)."""
    powers = torch.stack([s**d for d in range(coeffs.shape[1])], dim=-1)
    return powers @ coeffs.T


@dataclass(frozen=True)
class GmmNoiseModel:
    """Signal-conditioned Gaussian mixture noise model.

    With ``t = (clamp(s) - signal_min) / R`` and ``R = signal_max - signal_min``,
    component ``k`` has weight ``softmax_k(poly_a_k(t))``, mean
    ``s + R * poly_b_k(t)`` and std ``R * softplus(poly_c_k(t)) + std_floor``.
    Coefficient arrays have shape ``(K, D + 1)``, lowest power first.
    """

    weight_coeffs: np.ndarray
    mean_offset_coeffs: np.ndarray
    std_coeffs: np.ndarray
    signal_min: float
    signal_max: float
    std_floor: float

    def __post_init__(self):
        for name in ("weight_coeffs", "mean_offset_coeffs", "std_coeffs"):
            arr = np.array(getattr(self, name), dtype=np.float64, ndmin=2)
            object.__setattr__(self, name, arr)
        shapes = {self.weight_coeffs.shape, self.mean_offset_coeffs.shape, self.std_coeffs.shape}
        if len(shapes) != 1:
            raise ValueError(f"coefficient arrays disagree in shape: {shapes}")
        if not self.signal_max > self.signal_min:
            raise ValueError("signal_max must exceed signal_min")
        if not self.std_floor > 0:
            raise ValueError("std_floor must be positive")

    @property
    def n_components(self):
        return self.weight_coeffs.shape[0]

    @property
    def degree(self):
        return self.weight_coeffs.shape[1] - 1

    @property
    def signal_range(self):
        return self.signal_max - self.signal_min

    def _coeff_tensors(self, like):
        kw = {"dtype": like.dtype, "device": like.device}
        return (
            torch.as_tensor(self.weight_coeffs, **kw),
            torch.as_tensor(self.mean_offset_coeffs, **kw),
            torch.as_tensor(self.std_coeffs, **kw),
        )

    def components(self, clean):
        """Per-pixel ``(log_weights, means, stds)``, each with a trailing K axis (torch)."""
        a, b, c = self._coeff_tensors(clean)
        return _gmm_components(clean, a, b, c, self.signal_min, self.signal_max, self.std_floor)

    def log_prob(self, noisy, clean):
        """Differentiable per-pixel log density (torch tensors, any shape)."""
        a, b, c = self._coeff_tensors(clean)
        return _gmm_log_prob(noisy, clean, a, b, c, self.signal_min, self.signal_max, self.std_floor)

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "type": "gmm",
            "n_components": self.n_components,
            "degree": self.degree,
            "signal_min": float(self.signal_min),
            "signal_max": float(self.signal_max),
            "std_floor": float(self.std_floor),
            "weight_coeffs": self.weight_coeffs.tolist(),
            "mean_offset_coeffs": self.mean_offset_coeffs.tolist(),
            "std_coeffs": self.std_coeffs.tolist(),
        }


def _gmm_components(clean, a, b, c, smin, smax, floor):
    rng = smax - smin
    s = clean.clamp(smin, smax)
    t = (s - smin) / rng
    log_w = torch.log_softmax(_polyval(a, t), dim=-1)
    means = s.unsqueeze(-1) + rng * _polyval(b, t)
    stds = rng * F.softplus(_polyval(c, t)) + floor
    return log_w, means, stds


def _gmm_log_prob(noisy, clean, a, b, c, smin, smax, floor):
    log_w, means, stds = _gmm_components(clean, a, b, c, smin, smax, floor)
    z = (noisy.unsqueeze(-1) - means) / stds
    comp = -0.5 * _LOG_2PI - torch.log(stds) - 0.5 * z**2
    return torch.logsumexp(log_w + comp, dim=-1).clamp(min=LOG_DENSITY_FLOOR)


@dataclass(frozen=True)
class HistogramNoiseModel:
    """Co-occurrence table of clean (rows) and noisy (columns) intensity bins.

    ``table`` rows sum to one; the density of a noisy value is the row entry
    divided by the bin width.
    """

    table: np.ndarray
    range_min: float
    range_max: float
    smoothing: float = 1e-10

    def __post_init__(self):
        table = np.asarray(self.table, dtype=np.float64)
        if table.ndim != 2 or table.shape[0] != table.shape[1]:
            raise ValueError(f"table must be square, got {table.shape}")
        object.__setattr__(self, "table", table)

    @property
    def bins(self):
        return self.table.shape[0]

    @property
    def bin_width(self):
        return (self.range_max - self.range_min) / self.bins

    @property
    def edges(self):
        return np.linspace(self.range_min, self.range_max, self.bins + 1)

    def bin_index(self, values):
        idx = np.floor((np.asarray(values, dtype=np.float64) - self.range_min) / self.bin_width).astype(np.int64)
        return np.clip(idx, 0, self.bins - 1)

    def density(self, noisy, clean):
        noisy = np.asarray(noisy, dtype=np.float64)
        rows = self.bin_index(clean)
        cols = self.bin_index(noisy)
        dens = self.table[rows, cols] / self.bin_width
        outside = (noisy < self.range_min) | (noisy > self.range_max)
        return np.where(outside, 0.0, dens)

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "type": "histogram",
            "bins": self.bins,
            "range_min": float(self.range_min),
            "range_max": float(self.range_max),
            "smoothing": float(self.smoothing),
            "bin_edges": self.edges.tolist(),
            "table": self.table.tolist(),
        }


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------


def fit_gmm(
    pairs,
    n_components=3,
    degree=2,
    iterations=2000,
    batch_pixels=20000,
    seed=0,
    lr=0.02,
    std_floor_fraction=1e-3,
):
    """Fit a :class:`GmmNoiseModel` to (clean, noisy) image pairs.

    Minimises the mean negative log density over random pixel batches with
    Adam and a cosine learning-rate decay. Pairs may come from a calibration
    acquisition (clean = average of repeats) or be bootstrapped from an
    external denoiser's output.

    Parameters
    ----------
    pairs : sequence of (clean, noisy) arrays
    n_components : int
        Number of mixture components ``K``.
    degree : int
        Polynomial degree ``D`` of every parameter curve.
    iterations : int
    batch_pixels : int
        Pixels drawn (with replacement) per step.
    seed : int
    lr : float
        Initial Adam learning rate.
    std_floor_fraction : float
        Component std floor as a fraction of the signal range.
    """
    clean, noisy = _stack_pairs(pairs)
    if clean.size < MIN_FIT_PIXELS:
        raise ValueError(f"need at least {MIN_FIT_PIXELS} pixel pairs to fit a noise model, got {clean.size}")
    lo, hi = float(clean.min()), float(clean.max())
    span = hi - lo
    if span <= 0:
        span = max(abs(hi), 1.0)
    smin, smax = lo - 0.05 * span, hi + 0.05 * span
    rng_ = smax - smin
    floor = std_floor_fraction * rng_

    resid = (noisy - clean) / rng_
    sigma0 = max(float(resid.std()), 1e-6)
    spread = np.geomspace(0.5, 2.0, n_components) if n_components > 1 else np.ones(1)

    gen = torch.Generator().manual_seed(int(seed))
    a = torch.zeros(n_components, degree + 1, dtype=torch.float64)
    b = torch.zeros(n_components, degree + 1, dtype=torch.float64)
    c = torch.zeros(n_components, degree + 1, dtype=torch.float64)
    a[:, 0] = 0.01 * torch.randn(n_components, generator=gen, dtype=torch.float64)
    b[:, 0] = float(resid.mean())
    c[:, 0] = torch.as_tensor(_softplus_inv(sigma0 * spread))
    params = [p.requires_grad_() for p in (a, b, c)]

    clean_t = torch.as_tensor(clean)
    noisy_t = torch.as_tensor(noisy)
    opt = torch.optim.Adam(params, lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=iterations, eta_min=lr * 1e-2)
    n = clean_t.numel()
    for it in range(iterations):
        idx = torch.randint(0, n, (min(batch_pixels, n),), generator=gen)
        loss = -_gmm_log_prob(noisy_t[idx], clean_t[idx], a, b, c, smin, smax, floor).mean()
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite noise-model loss at iteration {it}: {loss.item()}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if it % 500 == 0:
            logger.debug("gmm fit it=%d nll=%.5f", it, loss.item())
    return GmmNoiseModel(
        weight_coeffs=a.detach().numpy().copy(),
        mean_offset_coeffs=b.detach().numpy().copy(),
        std_coeffs=c.detach().numpy().copy(),
        signal_min=smin,
        signal_max=smax,
        std_floor=floor,
    )


def fit_histogram(pairs, bins=256, smoothing=1e-10):
    """Build a :class:`HistogramNoiseModel` from (clean, noisy) pairs."""
    clean, noisy = _stack_pairs(pairs)
    lo = float(min(clean.min(), noisy.min()))
    hi = float(max(clean.max(), noisy.max()))
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    counts, _, _ = np.histogram2d(clean, noisy, bins=[edges, edges])
    counts += smoothing
    table = counts / counts.sum(axis=1, keepdims=True)
    return HistogramNoiseModel(table=table, range_min=lo, range_max=hi, smoothing=smoothing)


# --------------------------------------------------------------------------
# evaluation and sampling
# --------------------------------------------------------------------------


def log_likelihood(model, noisy, clean):
    """Per-pixel log density map and its sum.

    Returns
    -------
    logp : ndarray
        ``log P(noisy[p] | clean[p])`` for every pixel.
    total : float
        Sum over all pixels.
    """
    noisy = np.asarray(noisy, dtype=np.float64)
    clean = np.asarray(clean, dtype=np.float64)
    if noisy.shape != clean.shape:
        raise ValueError(f"shape mismatch: {noisy.shape} vs {clean.shape}")
    if isinstance(model, GmmNoiseModel):
        with torch.no_grad():
            logp = model.log_prob(torch.as_tensor(noisy), torch.as_tensor(clean)).numpy()
    elif isinstance(model, HistogramNoiseModel):
        logp = np.log(np.maximum(model.density(noisy, clean), DENSITY_FLOOR))
    else:
        raise TypeError(f"unsupported noise model {type(model).__name__}")
    return logp, float(logp.sum())


def sample_noisy(model, clean, seed=0):
    """Draw one noisy observation per pixel of ``clean``."""
    clean = np.asarray(clean, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if isinstance(model, GmmNoiseModel):
        with torch.no_grad():
            log_w, means, stds = model.components(torch.as_tensor(clean))
        w = np.exp(log_w.numpy())
        cdf = np.cumsum(w, axis=-1)
        u = rng.random(clean.shape)[..., None]
        k = np.minimum((u > cdf).sum(axis=-1), model.n_components - 1)
        mu = np.take_along_axis(means.numpy(), k[..., None], axis=-1)[..., 0]
        sd = np.take_along_axis(stds.numpy(), k[..., None], axis=-1)[..., 0]
        return mu + sd * rng.standard_normal(clean.shape)
    if isinstance(model, HistogramNoiseModel):
        rows = model.bin_index(clean).ravel()
        cdf = np.cumsum(model.table, axis=1)
        u = rng.random(rows.size)
        cols = np.array([np.searchsorted(cdf[r], v, side="right") for r, v in zip(rows, u)])
        cols = np.minimum(cols, model.bins - 1)
        jitter = rng.random(rows.size)
        return (model.range_min + (cols + jitter) * model.bin_width).reshape(clean.shape)
    raise TypeError(f"unsupported noise model {type(model).__name__}")


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------


def from_dict(doc):
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported noise model schema_version {version!r}")
    kind = doc.get("type")
    if kind == "gmm":
        return GmmNoiseModel(
            weight_coeffs=np.array(doc["weight_coeffs"]),
            mean_offset_coeffs=np.array(doc["mean_offset_coeffs"]),
            std_coeffs=np.array(doc["std_coeffs"]),
            signal_min=doc["signal_min"],
            signal_max=doc["signal_max"],
            std_floor=doc["std_floor"],
        )
    if kind == "histogram":
        return HistogramNoiseModel(
            table=np.array(doc["table"]),
            range_min=doc["range_min"],
            range_max=doc["range_max"],
            smoothing=doc.get("smoothing", 1e-10),
        )
    raise ValueError(f"unknown noise model type {kind!r}")


def save(model, path):
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh)


def load(path):
    with open(path) as fh:
        return from_dict(json.load(fh))
