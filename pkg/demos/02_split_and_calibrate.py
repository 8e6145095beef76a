"""Train a small splitting model, read out MMSE estimates and calibrate their errors.

The network sees only the noisy sum of two channels and learns to produce
both channels, denoised. Every forward pass draws fresh latents, so repeated
passes give different plausible solutions. Their pixel-wise mean (the MMSE
estimate) is the prediction and their spread is an uncertainty. One scalar per
channel turns that spread into a calibrated error estimate.

The model here is deliberately small so the script finishes in a few minutes
on a laptop CPU; expect a clear gain over the trivial "half the input"
baseline rather than the best attainable numbers.
"""

import logging

import numpy as np

from splitvae import calibration, pipeline
from splitvae.config import ExperimentConfig
from splitvae.data import split_dataset
from splitvae.inference import mmse, pixelwise_std, sample_predictions
from splitvae.training import TrainConfig, train
from splitvae.vse import VseConfig

logging.basicConfig(level=logging.INFO, format="%(message)s")

cfg = ExperimentConfig()
samples, _ = pipeline.build_task(cfg)
split = split_dataset(samples, seed=0)
print(f"train/val/test = {len(split.train)}/{len(split.val)}/{len(split.test)} images of {samples[0].shape}")

# The learned noise models replace a Gaussian likelihood on the targets.
nms = pipeline.fit_noise_models(split.train, cfg.noise_model)

model_cfg = VseConfig(base_filters=8, latent_channels=4, likelihood_head="noise_model", kl_mode="denoisplit")
result = train(model_cfg, TrainConfig(epochs=12, patches_per_image=8), split, noise_models=nms)
model = result.model
print(f"best epoch {result.best_epoch}, validation loss {result.best_val_loss:.1f}")


def estimate(sample, k=20):
    draws = sample_predictions(model, sample.input, k=k, seed=0)
    return mmse(draws), pixelwise_std(draws)


# Fit the calibration scalars on validation images...
val = [estimate(s) for s in split.val]
sig = [np.concatenate([v[1][c].ravel() for v in val]) for c in (0, 1)]
pred = [np.concatenate([v[0][c].ravel() for v in val]) for c in (0, 1)]
gt = [np.concatenate([getattr(s, f"clean{c + 1}").ravel() for s in split.val]) for c in (0, 1)]
state = calibration.calibrate(sig, pred, gt, bins=20)
print("calibration scalars:", ", ".join(f"{s:.2f}" for s in state.scalars))
# A perfectly calibrated model puts the curve on the identity line. Small,
# briefly trained models usually stay some way off it.
for ch, curve in state.curves.items():
    slope, _, r2 = calibration.curve_fit_stats(curve)
    print(f"  channel {ch}: RMSE vs RMV slope {slope:.2f}, R^2 {r2:.3f}")

# ...and score the MMSE estimates on the test images.
base = pipeline.trivial_baseline(split.test)
scores = [pipeline.score(estimate(s)[0], s) for s in split.test]
for ch in (1, 2):
    ours = np.mean([r[f"ri_psnr_ch{ch}"] for r in scores])
    print(f"channel {ch}: RI-PSNR {ours:.2f} dB (half the input: {base[f'ri_psnr_ch{ch}']:.2f} dB)")
