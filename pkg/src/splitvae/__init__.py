"""Joint two-channel image splitting and unsupervised denoising with a hierarchical VAE."""

__version__ = "0.1.0"
