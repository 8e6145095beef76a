"""Independent reference computations shared by the unit and acceptance tests."""

import numpy as np
import torch

from splitvae import noisemodel as nm
from splitvae.objective import Batch, total_loss
from splitvae.vse import VseConfig, VseModel


def tiny_gmm():
    return nm.GmmNoiseModel(
        weight_coeffs=[[0.2, -0.1], [0.0, 0.3]],
        mean_offset_coeffs=[[0.0, 0.01], [0.02, 0.0]],
        std_coeffs=[[-2.0, 0.1], [-1.5, 0.0]],
        signal_min=-5.0,
        signal_max=15.0,
        std_floor=0.01,
    )


def make_batch(model, n=2, size=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    dtype = next(model.parameters()).dtype
    targets = 5 + 2 * torch.rand(n, 2, size, size, generator=g, dtype=dtype)
    x = targets.sum(dim=1, keepdim=True)
    return Batch(x=model.normalize_input(x), targets=targets)


def finite_difference_check(head, kl_mode, n_params=20, seed=0):
    """Max relative error between autograd and central differences on random parameters.

    Runs a 2-level model on 16x16 inputs in double precision. The latent noise
    is fixed by reseeding the generator for every loss evaluation.
    """
    torch.manual_seed(seed)
    cfg = VseConfig(levels=2, latent_channels=2, base_filters=4, patch=16, likelihood_head=head, kl_mode=kl_mode)
    model = VseModel(cfg).double()
    model.set_normalization(12.0, 1.5)
    batch = make_batch(model, n=2, size=16, seed=seed)
    nms = (tiny_gmm(), tiny_gmm()) if head == "noise_model" else None

    def loss_value():
        return total_loss(model, batch, nms, torch.Generator().manual_seed(7))[0]

    model.zero_grad()
    loss_value().backward()
    params = [p for p in model.parameters() if p.requires_grad]
    rng = np.random.default_rng(seed)
    errors = []
    eps = 1e-5
    for _ in range(n_params):
        p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = p.grad[idx].item()
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + eps
            up = loss_value().item()
            p[idx] = orig - eps
            down = loss_value().item()
            p[idx] = orig
        numeric = (up - down) / (2 * eps)
        scale = max(abs(analytic), abs(numeric), 1e-4)
        errors.append(abs(analytic - numeric) / scale)
    return max(errors)


def receptive_radius(model, size=96):
    """Half-width of the region of input pixels that influence the centre output pixel."""
    m = VseModel(model.config).double()
    m.load_state_dict(model.state_dict())
    x = torch.zeros(1, 1, size, size, dtype=torch.float64, requires_grad=True)
    pred, _ = m(x, mode="posterior_mean")
    c = size // 2
    pred[0, :, c, c].sum().backward()
    rows, cols = np.nonzero(x.grad[0, 0].numpy())
    return int(max(c - rows.min(), rows.max() - c, c - cols.min(), cols.max() - c))


def covered_interior(shape, tile, pad, radius, tile_origins):
    """Mask of pixels whose receptive field lies inside their source tile and the image."""
    h, w = shape
    inner = tile - 2 * pad
    mask = np.zeros((h, w), bool)
    for o_r in tile_origins(h, tile, inner):
        for o_c in tile_origins(w, tile, inner):
            top, left = o_r - pad, o_c - pad
            rows = np.arange(o_r, min(o_r + inner, h))
            cols = np.arange(o_c, min(o_c + inner, w))
            ok_r = rows[(rows - radius >= max(top, 0)) & (rows + radius < min(top + tile, h))]
            ok_c = cols[(cols - radius >= max(left, 0)) & (cols + radius < min(left + tile, w))]
            mask[np.ix_(ok_r, ok_c)] = True
    return mask
