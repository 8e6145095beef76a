"""Prediction on raw images: posterior sampling, MMSE, uncertainty maps and tiling.

All functions take and return raw-intensity numpy arrays. Sample ``i`` of a
call seeded with ``seed`` always uses latent noise seeded with ``seed + i``, so
any subset of samples can be regenerated on its own.
"""

import numpy as np
import torch

from . import storage
from .data import as_image


def _as_input(model, x):
    dtype = next(model.parameters()).dtype
    t = torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)
    return model.normalize_input(t)[None, None]


@torch.no_grad()
def predict(model, x, mode="posterior_mean", seed=0):
    """One forward pass on a whole image; returns ``(c1_hat, c2_hat)``."""
    model.eval()
    gen = torch.Generator().manual_seed(int(seed))
    pred, _ = model(_as_input(model, x), mode=mode, generator=gen)
    raw = model.to_raw(pred)[0].double().numpy()
    return raw[0], raw[1]


def sample_predictions(model, x, k=50, seed=0):
    """``k`` stochastic decodes of the same input, as a list of ``(c1_hat, c2_hat)``."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    x = as_image(x, "x")
    return [predict(model, x, mode="stochastic", seed=seed + i) for i in range(k)]


def _stack(samples):
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[1] != 2:
        raise ValueError("samples must be a sequence of (c1, c2) image pairs")
    return arr


def mmse(samples):
    """Pixel-wise mean of the samples, per channel."""
    mean = _stack(samples).mean(axis=0)
    return mean[0], mean[1]


def pixelwise_std(samples):
    """Population standard deviation (divide by k) per pixel and channel."""
    std = _stack(samples).std(axis=0)
    return std[0], std[1]


def tile_origins(length, tile, stride):
    """Start offsets (in padded coordinates) of tiles covering ``length`` inner pixels."""
    n = max(1, int(np.ceil(length / stride)))
    return [i * stride for i in range(n)]


def predict_tiled(model, x, tile=128, pad=24, mode="posterior_mean", k=50, seed=0, return_std=False):
    """Predict an arbitrarily large image from overlapping tiles.

    Tiles of size ``tile`` are laid out with stride ``tile - 2 * pad``; only the
    central ``(tile - 2 * pad)**2`` window of each tile prediction is written.
    The frame is mirror-padded by ``pad`` on every side (and a little more on
    the bottom/right so the last tile fits). Use tile, pad and stride that are
    multiples of ``2**levels`` to keep tiles aligned with the full-frame
    downsampling grid.

    Parameters
    ----------
    mode : {"posterior_mean", "mmse"}
        ``mmse`` averages ``k`` stochastic samples per tile.
    return_std : bool
        With ``mode="mmse"``, also return pixel-wise sample std maps.
    """
    x = as_image(x, "x")
    h, w = x.shape
    if tile > min(h, w):
        raise ValueError(f"tile {tile} larger than image {h}x{w}")
    if not 0 <= pad < tile / 2:
        raise ValueError(f"pad must satisfy 0 <= pad < tile/2, got pad={pad}, tile={tile}")
    if mode not in ("posterior_mean", "mmse"):
        raise ValueError(f"mode must be 'posterior_mean' or 'mmse', got {mode!r}")
    inner = tile - 2 * pad
    rows = tile_origins(h, tile, inner)
    cols = tile_origins(w, tile, inner)
    ph = rows[-1] + tile - pad - h
    pw = cols[-1] + tile - pad - w
    padded = np.pad(x, ((pad, ph), (pad, pw)), mode="symmetric") if (pad or ph or pw) else x
    if padded.shape[0] < rows[-1] + tile or padded.shape[1] < cols[-1] + tile:
        raise ValueError("mirror padding exceeds the image; use a smaller pad or larger image")

    out = np.zeros((2, h, w))
    out_std = np.zeros((2, h, w)) if return_std else None
    for r in rows:
        for c in cols:
            window = padded[r : r + tile, c : c + tile]
            if mode == "posterior_mean":
                pred = np.stack(predict(model, window, "posterior_mean", seed))
            else:
                samples = sample_predictions(model, window, k, seed)
                pred = np.stack(mmse(samples))
                if return_std:
                    std = np.stack(pixelwise_std(samples))
            hh = min(inner, h - r)
            ww = min(inner, w - c)
            out[:, r : r + hh, c : c + ww] = pred[:, pad : pad + hh, pad : pad + ww]
            if return_std and mode == "mmse":
                out_std[:, r : r + hh, c : c + ww] = std[:, pad : pad + hh, pad : pad + ww]
    if return_std:
        return (out[0], out[1]), (out_std[0], out_std[1])
    return out[0], out[1]


def save_predictions(directory, ids, preds, provenance=None, stds=None):
    """Write predictions as a raster directory with roles ``pred1``/``pred2`` (and ``std1``/``std2``)."""
    records = []
    for i, sid in enumerate(ids):
        images = {"pred1": preds[i][0], "pred2": preds[i][1]}
        if stds is not None:
            images.update(std1=stds[i][0], std2=stds[i][1])
        records.append({"id": sid, "images": images})
    return storage.write_dataset(directory, records, provenance=provenance, kind="predictions")
