"""Per-channel uncertainty calibration from posterior-sample spread.

The predicted per-pixel standard deviation ``sigma`` (spread of posterior
samples) is rescaled by one scalar per channel so that, under a Gaussian
error model centred on the MMSE prediction, the negative log-likelihood of the
true signal on held-out data is minimal. Calibration never modifies the
prediction arrays it is given.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

SCHEMA_VERSION = 1


@dataclass
class CurveBin:
    rmv: float
    rmse: float
    count: int


@dataclass
class CalibrationState:
    scalars: tuple
    bins: int = 30
    binning: str = "equal_count"
    curves: dict = field(default_factory=dict)
    excluded: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "calib_scalar1": float(self.scalars[0]),
            "calib_scalar2": float(self.scalars[1]),
            "bins": self.bins,
            "binning": self.binning,
            "excluded_zero_sigma": {str(k): int(v) for k, v in self.excluded.items()},
        }


def _flat(*arrays):
    out = [np.asarray(a, dtype=np.float64).ravel() for a in arrays]
    if len({a.size for a in out}) != 1:
        raise ValueError("sigma, prediction and target arrays must have the same number of pixels")
    return out


def _valid(sigma, pred, target):
    sigma, pred, target = _flat(sigma, pred, target)
    keep = sigma > 0
    n_excluded = int(sigma.size - keep.sum())
    if not keep.any():
        raise ValueError("all predicted standard deviations are zero; cannot calibrate")
    return sigma[keep], pred[keep], target[keep], n_excluded


def fit_scalar(sigma, pred, target, method="closed_form", lr=0.5, max_iter=10000, tol=1e-12):
    """Scalar ``s`` minimising ``sum(log(s * sigma) + (target - pred)**2 / (2 s**2 sigma**2))``.

    Parameters
    ----------
    sigma, pred, target : array_like
        Matching arrays; pixels with ``sigma == 0`` are dropped.
    method : {"closed_form", "gradient"}
        ``closed_form`` uses ``s**2 = mean((target - pred)**2 / sigma**2)``.
        ``gradient`` runs gradient descent on ``log s``.

    Returns
    -------
    s : float
    n_excluded : int
        Number of zero-sigma pixels that were left out.
    """
    sigma, pred, target, n_excluded = _valid(sigma, pred, target)
    ratio = np.mean(((target - pred) / sigma) ** 2)
    if method == "closed_form":
        return float(np.sqrt(ratio)), n_excluded
    if method != "gradient":
        raise ValueError(f"unknown method {method!r}")
    # mean NLL in t = log s:  t + e^{-2t} * ratio / 2 + const;  gradient 1 - ratio * e^{-2t}
    t = 0.0
    for _ in range(max_iter):
        grad = 1.0 - ratio * np.exp(-2.0 * t)
        t -= np.clip(lr * grad, -1.0, 1.0)
        if abs(grad) < tol:
            break
    return float(np.exp(t)), n_excluded


def fit_scalars(sigmas, preds, targets, method="closed_form"):
    """Fit one scalar per channel.

    ``sigmas``, ``preds`` and ``targets`` are length-2 sequences (channel 1,
    channel 2) of arrays, each possibly a stack of images.
    """
    scalars, excluded = [], {}
    for ch, (s, p, t) in enumerate(zip(sigmas, preds, targets), start=1):
        value, n_excl = fit_scalar(s, p, t, method=method)
        scalars.append(value)
        excluded[ch] = n_excl
    return tuple(scalars), excluded


def calibration_curve(sigma, pred, target, scalar=1.0, bins=30, binning="equal_count"):
    """RMV vs RMSE per bin of scaled predicted standard deviation.

    Pixels are sorted by ``scalar * sigma``. ``equal_count`` binning splits the
    sorted pixels into ``bins`` groups of equal size (the first groups take one
    extra pixel when the count does not divide); ``equal_width`` splits the
    value range into equal intervals and skips empty ones.

    Returns
    -------
    list of CurveBin
    """
    if bins < 2:
        raise ValueError(f"need at least 2 bins, got {bins}")
    sigma, pred, target, _ = _valid(sigma, pred, target)
    if sigma.size < bins:
        raise ValueError(f"{sigma.size} pixels cannot fill {bins} bins")
    scaled = scalar * sigma
    order = np.argsort(scaled, kind="stable")
    scaled = scaled[order]
    sq_err = ((target - pred) ** 2)[order]
    if binning == "equal_count":
        groups = np.array_split(np.arange(scaled.size), bins)
    elif binning == "equal_width":
        edges = np.linspace(scaled[0], scaled[-1], bins + 1)
        which = np.clip(np.searchsorted(edges, scaled, side="right") - 1, 0, bins - 1)
        groups = [np.flatnonzero(which == b) for b in range(bins)]
        groups = [g for g in groups if g.size]
    else:
        raise ValueError(f"unknown binning {binning!r}")
    return [
        CurveBin(
            rmv=float(np.sqrt(np.mean(scaled[g] ** 2))),
            rmse=float(np.sqrt(np.mean(sq_err[g]))),
            count=int(g.size),
        )
        for g in groups
    ]


def calibrate(sigmas, preds, targets, bins=30, binning="equal_count"):
    """Fit both scalars and build both curves on the same data."""
    scalars, excluded = fit_scalars(sigmas, preds, targets)
    curves = {
        ch: calibration_curve(s, p, t, scalar=scalars[ch - 1], bins=bins, binning=binning)
        for ch, (s, p, t) in enumerate(zip(sigmas, preds, targets), start=1)
    }
    return CalibrationState(scalars=scalars, bins=bins, binning=binning, curves=curves, excluded=excluded)


def curve_fit_stats(curve):
    """Least-squares slope (through free intercept) and R^2 of RMSE against RMV."""
    x = np.array([b.rmv for b in curve])
    y = np.array([b.rmse for b in curve])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), float(r2)


def save_calibration(state, path):
    with open(path, "w") as fh:
        json.dump(state.to_dict(), fh, indent=2)


def load_calibration(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported schema_version {doc.get('schema_version')!r}")
    return CalibrationState(
        scalars=(doc["calib_scalar1"], doc["calib_scalar2"]),
        bins=doc["bins"],
        binning=doc.get("binning", "equal_count"),
        excluded={int(k): v for k, v in doc.get("excluded_zero_sigma", {}).items()},
    )


def write_curve_csv(curves, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["channel", "bin", "rmv", "rmse", "count"])
        for ch in sorted(curves):
            for j, b in enumerate(curves[ch]):
                writer.writerow([ch, j, repr(b.rmv), repr(b.rmse), b.count])
