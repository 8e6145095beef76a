"""Synthetic two-channel structures, mixing, noise injection and dataset handling.

Images are plain 2D float64 numpy arrays. A :class:`SplitSample` bundles the
mixed input with its two channel targets (and, for synthetic data, the
noise-free channels). All random operations take an explicit integer seed and
are pure functions of their arguments.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import storage

KINDS = ("dots", "curves", "mesh")
DEFAULT_PEAK = 1000.0


def as_image(img, name="image"):
    """Validate and return ``img`` as a finite 2D float64 array."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass
class SplitSample:
    """Mixed input with its two channel targets.

    ``input`` is the noisy mixture, ``target1``/``target2`` are the noisy
    channels. ``clean1``/``clean2`` hold the noise-free channels when they are
    known (synthetic data) and are only ever used for evaluation.
    """

    input: np.ndarray
    target1: np.ndarray
    target2: np.ndarray
    clean1: np.ndarray = None
    clean2: np.ndarray = None

    def __post_init__(self):
        self.input = as_image(self.input, "input")
        self.target1 = as_image(self.target1, "target1")
        self.target2 = as_image(self.target2, "target2")
        if self.clean1 is not None:
            self.clean1 = as_image(self.clean1, "clean1")
        if self.clean2 is not None:
            self.clean2 = as_image(self.clean2, "clean2")
        for name in ("target1", "target2", "clean1", "clean2"):
            img = getattr(self, name)
            if img is not None and img.shape != self.input.shape:
                raise ValueError(f"{name} shape {img.shape} != input shape {self.input.shape}")

    @property
    def shape(self):
        return self.input.shape

    @property
    def has_clean(self):
        return self.clean1 is not None and self.clean2 is not None

    def images(self):
        return {
            "input": self.input,
            "target1": self.target1,
            "target2": self.target2,
            "clean1": self.clean1,
            "clean2": self.clean2,
        }

    def crop(self, top, left, size):
        sl = (slice(top, top + size), slice(left, left + size))
        return SplitSample(**{k: (None if v is None else v[sl].copy()) for k, v in self.images().items()})


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    seed: int = 0
    indices: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# structure generators
# --------------------------------------------------------------------------


def _splat(canvas, ys, xs, weights):
    """Accumulate point masses onto ``canvas`` with bilinear weights."""
    h, w = canvas.shape
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = ys - y0
    fx = xs - x0
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy = y0 + dy
            xx = x0 + dx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            np.add.at(canvas, (yy[ok], xx[ok]), (weights * wy * wx)[ok])


def _render_dots(rng, height, width, density):
    area = height * width
    n = max(1, int(round(density * area / (np.pi * 3.5**2))))
    yy, xx = np.mgrid[0:height, 0:width]
    img = np.zeros((height, width))
    for _ in range(n):
        cy = rng.uniform(0, height)
        cx = rng.uniform(0, width)
        radius = rng.uniform(2.0, 5.0)
        sigma = radius / 2.0
        amp = rng.uniform(0.5, 1.0)
        r0 = int(np.ceil(4 * sigma))
        y_lo, y_hi = max(0, int(cy) - r0), min(height, int(cy) + r0 + 1)
        x_lo, x_hi = max(0, int(cx) - r0), min(width, int(cx) + r0 + 1)
        sub_y = yy[y_lo:y_hi, x_lo:x_hi]
        sub_x = xx[y_lo:y_hi, x_lo:x_hi]
        img[y_lo:y_hi, x_lo:x_hi] += amp * np.exp(-((sub_y - cy) ** 2 + (sub_x - cx) ** 2) / (2 * sigma**2))
    return img


def _smooth_path(rng, start, heading, length, step=0.5, wiggle=0.08):
    n = max(2, int(length / step))
    # low-pass filtered turning rate gives smooth bends
    turn = ndimage.gaussian_filter1d(rng.normal(0.0, wiggle, n), sigma=8, mode="nearest") * 8
    angles = heading + np.cumsum(turn)
    ys = start[0] + np.cumsum(step * np.sin(angles))
    xs = start[1] + np.cumsum(step * np.cos(angles))
    return ys, xs


def _render_curves(rng, height, width, density, line_sigma=1.2):
    length = 0.5 * max(height, width)
    n = max(1, int(round(density * height * width / (length * 4.0))))
    canvas = np.zeros((height, width))
    for _ in range(n):
        start = (rng.uniform(0, height), rng.uniform(0, width))
        ys, xs = _smooth_path(rng, start, rng.uniform(0, 2 * np.pi), length)
        _splat(canvas, ys, xs, np.full(ys.shape, rng.uniform(0.6, 1.0)))
    return ndimage.gaussian_filter(canvas, line_sigma)


def _render_mesh(rng, height, width, density, line_sigma=1.0):
    canvas = np.zeros((height, width))
    mean_radius = 0.12 * min(height, width)
    n = max(1, int(round(density * height * width / (2 * np.pi * mean_radius * 3.0))))
    for _ in range(n):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        radius = rng.uniform(0.6, 1.4) * mean_radius
        n_pts = max(16, int(2 * np.pi * radius / 0.5))
        theta = np.linspace(0, 2 * np.pi, n_pts, endpoint=False)
        # a few low harmonics make the loops irregular but still closed
        wobble = sum(
            rng.normal(0, 0.12) * np.cos(k * theta + rng.uniform(0, 2 * np.pi)) for k in (2, 3, 4)
        )
        r = radius * (1 + wobble)
        _splat(canvas, cy + r * np.sin(theta), cx + r * np.cos(theta), np.full(n_pts, rng.uniform(0.6, 1.0)))
    return ndimage.gaussian_filter(canvas, line_sigma)


_RENDERERS = {"dots": _render_dots, "curves": _render_curves, "mesh": _render_mesh}


def generate_channel(kind, height, width, density, seed, peak=DEFAULT_PEAK):
    """Render one synthetic structure channel.

    Parameters
    ----------
    kind : {"dots", "curves", "mesh"}
        Gaussian blobs, smooth open polylines, or overlapping closed loops.
    height, width : int
        Image size, both at least 32.
    density : float
        Fraction in (0, 1] controlling how many structures are drawn.
    seed : int
        Random seed; identical arguments give bit-identical images.
    peak : float
        Maximum intensity of the returned image. Background is exactly 0.
    """
    if kind not in _RENDERERS:
        raise ValueError(f"unknown structure kind {kind!r}; expected one of {', '.join(KINDS)}")
    if height < 32 or width < 32:
        raise ValueError(f"image dimensions must be >= 32, got {height}x{width}")
    if not 0 < density <= 1:
        raise ValueError(f"density must be in (0, 1], got {density}")
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    rng = np.random.default_rng(seed)
    img = _RENDERERS[kind](rng, int(height), int(width), float(density))
    img = np.clip(img, 0.0, None)
    top = img.max()
    if top > 0:
        img *= peak / top
    # drop the far tails of the rendering kernels so the background is exactly 0
    img[img < 1e-6 * peak] = 0.0
    return img


def mix(c1, c2):
    """Pixel-wise sum of two channel images."""
    c1 = as_image(c1, "c1")
    c2 = as_image(c2, "c2")
    if c1.shape != c2.shape:
        raise ValueError(f"shape mismatch: {c1.shape} vs {c2.shape}")
    return c1 + c2


# --------------------------------------------------------------------------
# noise
# --------------------------------------------------------------------------


def add_poisson_noise(img, factor=1000.0, seed=0):
    """Signal-dependent shot noise: ``factor * Poisson(img / factor)``.

    The output has mean ``img`` and variance ``factor * img`` per pixel.
    """
    img = as_image(img)
    if not factor > 0:
        raise ValueError(f"poisson factor must be positive, got {factor}")
    if np.any(img < 0):
        raise ValueError("poisson noise needs a nonnegative image (rate must be >= 0)")
    rng = np.random.default_rng(seed)
    return rng.poisson(img / factor).astype(np.float64) * factor


def add_gaussian_noise(img, scale, reference_std, seed=0):
    """Add zero-mean Gaussian noise with standard deviation ``scale * reference_std``."""
    img = as_image(img)
    if scale < 0:
        raise ValueError(f"gaussian scale must be >= 0, got {scale}")
    if not reference_std > 0:
        raise ValueError(f"reference_std must be positive, got {reference_std}")
    if scale == 0:
        return img.copy()
    rng = np.random.default_rng(seed)
    return img + rng.normal(0.0, scale * reference_std, size=img.shape)


def reference_std(clean_inputs):
    """Standard deviation over all pixels of the clean mixed inputs of a task."""
    flat = np.concatenate([as_image(x).ravel() for x in clean_inputs])
    std = float(flat.std())
    if not std > 0:
        raise ValueError("clean inputs are constant; cannot derive a noise reference std")
    return std


def noisy_channel(clean, gaussian_scale, poisson_factor, ref_std, seed):
    """Poisson first (if ``poisson_factor > 0``), then Gaussian (if ``gaussian_scale > 0``)."""
    ss = np.random.SeedSequence(seed)
    s_poisson, s_gauss = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    out = as_image(clean)
    if poisson_factor:
        out = add_poisson_noise(out, poisson_factor, s_poisson)
    if gaussian_scale:
        out = add_gaussian_noise(out, gaussian_scale, ref_std, s_gauss)
    return out


def make_noisy_samples(clean_pairs, gaussian_scale, poisson_factor, seed, ref_std=None):
    """Inject noise independently into both channels and re-mix.

    Parameters
    ----------
    clean_pairs : list of (ndarray, ndarray)
    gaussian_scale : float
        Multiple of ``ref_std`` used as Gaussian noise std.
    poisson_factor : float
        0 disables shot noise.
    seed : int
    ref_std : float, optional
        Defaults to the std over all clean mixed inputs of ``clean_pairs``.

    Returns
    -------
    samples : list of SplitSample
    ref_std : float
    """
    if ref_std is None:
        ref_std = reference_std([mix(a, b) for a, b in clean_pairs])
    samples = []
    for idx, (c1, c2) in enumerate(clean_pairs):
        n1 = noisy_channel(c1, gaussian_scale, poisson_factor, ref_std, [seed, idx, 1])
        n2 = noisy_channel(c2, gaussian_scale, poisson_factor, ref_std, [seed, idx, 2])
        samples.append(SplitSample(input=n1 + n2, target1=n1, target2=n2, clean1=c1, clean2=c2))
    return samples, ref_std


def make_clean_pairs(kind1, kind2, n, size, seed, density1=0.05, density2=0.08, peak=DEFAULT_PEAK):
    """Generate ``n`` clean channel pairs of shape ``(size, size)``."""
    pairs = []
    for idx in range(n):
        s1, s2 = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence([seed, idx]).spawn(2))
        pairs.append(
            (
                generate_channel(kind1, size, size, density1, s1, peak),
                generate_channel(kind2, size, size, density2, s2, peak),
            )
        )
    return pairs


# --------------------------------------------------------------------------
# splitting and cropping
# --------------------------------------------------------------------------


def split_dataset(samples, seed=0):
    """Shuffle and partition into 80/10/10 train/val/test; remainders go to train."""
    n = len(samples)
    if n < 10:
        raise ValueError(f"need at least 10 samples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_val = n // 10
    n_test = n // 10
    n_train = n - n_val - n_test
    idx = {
        "train": sorted(order[:n_train].tolist()),
        "val": sorted(order[n_train : n_train + n_val].tolist()),
        "test": sorted(order[n_train + n_val :].tolist()),
    }
    return DatasetSplit(
        train=[samples[i] for i in idx["train"]],
        val=[samples[i] for i in idx["val"]],
        test=[samples[i] for i in idx["test"]],
        seed=seed,
        indices=idx,
    )


def extract_patches(sample, patch=128, count=1, seed=0):
    """Random square crops; the same window is applied to every image of ``sample``."""
    h, w = sample.shape
    if patch > min(h, w):
        raise ValueError(f"patch {patch} larger than image {h}x{w}")
    rng = np.random.default_rng(seed)
    tops = rng.integers(0, h - patch + 1, size=count)
    lefts = rng.integers(0, w - patch + 1, size=count)
    return [sample.crop(int(t), int(l), patch) for t, l in zip(tops, lefts)]


# --------------------------------------------------------------------------
# directory I/O
# --------------------------------------------------------------------------


def save_samples(directory, samples, provenance=None, ids=None):
    ids = ids or [f"{i:05d}" for i in range(len(samples))]
    records = [{"id": i, "images": s.images()} for i, s in zip(ids, samples)]
    return storage.write_dataset(directory, records, provenance=provenance, kind="split_samples")


def load_samples(directory):
    """Read a sample directory; returns ``(samples, manifest)``."""
    records, manifest = storage.read_dataset(directory)
    samples = []
    for rec in records:
        imgs = rec["images"]
        if "input" not in imgs:
            # clean-only datasets: the mixture is the (noise-free) sum
            c1, c2 = imgs["clean1"], imgs["clean2"]
            samples.append(SplitSample(input=c1 + c2, target1=c1, target2=c2, clean1=c1, clean2=c2))
        else:
            samples.append(SplitSample(**{k: imgs.get(k) for k in ("input", "target1", "target2", "clean1", "clean2")}))
    return samples, manifest
