"""Image quality metrics: range-invariant PSNR and multi-scale SSIM."""

import numpy as np
from scipy import ndimage

PSNR_CAP = 100.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_K1, _K2 = 0.01, 0.03


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def affine_fit(pred, gt):
    """Least-squares ``(a, b)`` minimising ``sum((a * pred + b - gt) ** 2)``."""
    p = pred.ravel() - pred.mean()
    g = gt.ravel() - gt.mean()
    denom = np.dot(p, p)
    a = np.dot(p, g) / denom if denom > 0 else 0.0
    b = gt.mean() - a * pred.mean()
    return a, b


def ri_psnr(pred, gt):
    """PSNR after the best affine fit of ``pred`` onto ``gt``.

    The peak is ``max(gt) - min(gt)``. A zero residual returns ``PSNR_CAP``.
    The metric is not symmetric; ``gt`` is the reference.
    """
    pred, gt = _pair(pred, gt)
    data_range = gt.max() - gt.min()
    if not data_range > 0:
        raise ValueError("ground truth is constant; range-invariant PSNR is undefined")
    a, b = affine_fit(pred, gt)
    # residual of the centred fit, so a constant offset cancels exactly
    resid = a * (pred - pred.mean()) - (gt - gt.mean())
    mse = np.mean(resid**2)
    if mse <= (1e-14 * data_range) ** 2:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10 * np.log10(data_range**2 / mse)))


def _gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _filter_valid(img, win):
    out = ndimage.correlate1d(img, win, axis=0, mode="constant")
    out = ndimage.correlate1d(out, win, axis=1, mode="constant")
    r = len(win) // 2
    return out[r : img.shape[0] - r, r : img.shape[1] - r]


def _ssim_maps(x, y, data_range, win):
    c1 = (_K1 * data_range) ** 2
    c2 = (_K2 * data_range) ** 2
    mu_x = _filter_valid(x, win)
    mu_y = _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mu_x**2
    syy = _filter_valid(y * y, win) - mu_y**2
    sxy = _filter_valid(x * y, win) - mu_x * mu_y
    lum = (2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return lum, cs


def ssim(pred, gt, data_range=None, win_size=11, sigma=1.5):
    """Single-scale SSIM with a Gaussian window, averaged over the valid region."""
    pred, gt = _pair(pred, gt)
    if data_range is None:
        data_range = gt.max() - gt.min()
    lum, cs = _ssim_maps(pred, gt, data_range, _gaussian_window(win_size, sigma))
    return float(np.mean(lum * cs))


def _downsample(img):
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    img = img[:h, :w]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def ms_ssim(pred, gt, data_range=None, weights=MS_SSIM_WEIGHTS, win_size=11, sigma=1.5):
    """Multi-scale SSIM.

    Uses up to five dyadic scales (2x2 average pooling between scales); the
    number of scales shrinks, with renormalised weights, when the image is too
    small for the coarser ones. Negative contrast-structure terms are clipped
    to zero before exponentiation.
    """
    pred, gt = _pair(pred, gt)
    if data_range is None:
        data_range = gt.max() - gt.min()
    if not data_range > 0:
        raise ValueError("ground truth is constant; pass data_range explicitly")
    min_side = min(gt.shape)
    if min_side < win_size:
        raise ValueError(f"image side {min_side} is smaller than the {win_size}-pixel SSIM window")
    n_scales = 1
    while n_scales < len(weights) and (min_side >> n_scales) >= win_size:
        n_scales += 1
    w = np.asarray(weights[:n_scales], dtype=np.float64)
    w = w / w.sum()

    win = _gaussian_window(win_size, sigma)
    x, y = pred, gt
    values = []
    for s in range(n_scales):
        lum, cs = _ssim_maps(x, y, data_range, win)
        if s == n_scales - 1:
            values.append(max(float(np.mean(lum * cs)), 0.0))
        else:
            values.append(max(float(np.mean(cs)), 0.0))
            x, y = _downsample(x), _downsample(y)
    return float(np.prod(np.power(values, w)))
