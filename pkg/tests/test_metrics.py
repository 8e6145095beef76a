import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy import optimize
from skimage.filters import gaussian
from skimage.metrics import structural_similarity
from skimage.transform import downscale_local_mean

from splitvae import metrics
from splitvae.metrics import ms_ssim, ri_psnr


def reference_ms_ssim(x, y, data_range, weights=metrics.MS_SSIM_WEIGHTS):
    """MS-SSIM assembled from scikit-image filters, used as an independent check."""
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    n = 1
    while n < len(weights) and (min(x.shape) >> n) >= 11:
        n += 1
    w = np.asarray(weights[:n]) / np.sum(weights[:n])
    vals = []
    for s in range(n):
        f = lambda img: gaussian(img, sigma=1.5, truncate=3.5, mode="constant", preserve_range=True)[5:-5, 5:-5]
        mx, my = f(x), f(y)
        vx, vy, cxy = f(x * x) - mx**2, f(y * y) - my**2, f(x * y) - mx * my
        cs = (2 * cxy + c2) / (vx + vy + c2)
        lum = (2 * mx * my + c1) / (mx**2 + my**2 + c1)
        vals.append(max(np.mean(lum * cs), 0) if s == n - 1 else max(np.mean(cs), 0))
        h, wd = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
        x, y = downscale_local_mean(x[:h, :wd], (2, 2)), downscale_local_mean(y[:h, :wd], (2, 2))
    return float(np.prod(np.power(vals, w)))


@pytest.fixture
def gt():
    rng = np.random.default_rng(0)
    img = np.zeros((192, 192))
    img[40:120, 30:90] = 1.0
    return gaussian(img, 2) * 500 + rng.normal(0, 5, img.shape)


class TestRiPsnr:
    def test_identity_capped(self, gt):
        assert ri_psnr(gt, gt) == 100.0

    def test_affine_absorbed(self, gt):
        assert ri_psnr(2 * gt + 5, gt) == 100.0

    def test_worked_example(self):
        # gt range exactly 2, residual of the best affine fit with MSE exactly 0.01
        rng = np.random.default_rng(1)
        base = rng.normal(size=400)
        e = rng.normal(size=400)
        e -= e.mean()
        e -= base * np.dot(e, base - base.mean()) / np.dot(base, base - base.mean())
        e -= e.mean()

        def scaled(t):
            g = base + t * e
            c = 2 / np.ptp(g)
            return c * base, c * g

        t = optimize.brentq(lambda t: np.mean((scaled(t)[1] - scaled(t)[0]) ** 2) - 0.01, 1e-6, 10)
        pred, g = scaled(t)
        coef, *_ = np.linalg.lstsq(np.c_[pred, np.ones_like(pred)], g, rcond=None)
        assert np.mean((np.c_[pred, np.ones_like(pred)] @ coef - g) ** 2) == pytest.approx(0.01, rel=1e-9)
        assert np.ptp(g) == pytest.approx(2.0)
        assert ri_psnr(pred, g) == pytest.approx(10 * np.log10(4 / 0.01), abs=1e-9)
        assert ri_psnr(pred, g) == pytest.approx(26.02, abs=0.005)

    def test_against_least_squares(self, gt):
        pred = np.sqrt(np.abs(gt)) + np.random.default_rng(2).normal(0, 1, gt.shape)
        A = np.c_[pred.ravel(), np.ones(pred.size)]
        coef, *_ = np.linalg.lstsq(A, gt.ravel(), rcond=None)
        mse = np.mean((A @ coef - gt.ravel()) ** 2)
        assert ri_psnr(pred, gt) == pytest.approx(10 * np.log10(np.ptp(gt) ** 2 / mse), abs=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(
        st.floats(-50, 50).filter(lambda a: abs(a) > 1e-3),
        st.floats(-1e4, 1e4),
        st.integers(0, 2**31 - 1),
    )
    def test_affine_invariance(self, a, b, seed):
        rng = np.random.default_rng(seed)
        g = rng.uniform(0, 100, (16, 16))
        p = g + rng.normal(0, 10, g.shape)
        base = ri_psnr(p, g)
        assume(base < 99)
        assert abs(ri_psnr(a * p + b, g) - base) <= 1e-9

    def test_not_symmetric(self, gt):
        pred = gt**2 / gt.max()
        assert ri_psnr(pred, gt) != pytest.approx(ri_psnr(gt, pred), abs=1e-3)

    def test_constant_gt_rejected(self):
        with pytest.raises(ValueError):
            ri_psnr(np.arange(4.0).reshape(2, 2), np.ones((2, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ri_psnr(np.zeros((2, 2)), np.zeros((2, 3)))


class TestSsim:
    def test_identity(self, gt):
        assert ms_ssim(gt, gt) == pytest.approx(1.0, abs=1e-12)

    def test_inversion_not_identity(self, gt):
        assert ms_ssim(gt.max() - gt, gt) < 1

    def test_heavy_noise(self, gt):
        noisy = gt + np.random.default_rng(3).normal(0, 10 * gt.std(), gt.shape)
        value = ms_ssim(noisy, gt)
        assert value < 0.5
        assert value == pytest.approx(reference_ms_ssim(noisy, gt, np.ptp(gt)), abs=1e-6)

    @pytest.mark.parametrize("noise", [1.0, 20.0, 80.0])
    @pytest.mark.parametrize("size", [64, 192])
    def test_matches_reference(self, gt, noise, size):
        g = gt[:size, :size]
        p = g + np.random.default_rng(int(noise)).normal(0, noise, g.shape)
        assert ms_ssim(p, g) == pytest.approx(reference_ms_ssim(p, g, np.ptp(g)), abs=1e-6)

    def test_single_scale_matches_skimage(self, gt):
        p = gt + np.random.default_rng(4).normal(0, 30, gt.shape)
        ours = metrics.ssim(p, gt)
        ref = structural_similarity(
            p, gt, data_range=np.ptp(gt), gaussian_weights=True, sigma=1.5, use_sample_covariance=False
        )
        assert ours == pytest.approx(ref, abs=1e-6)

    def test_too_small(self):
        with pytest.raises(ValueError):
            ms_ssim(np.random.rand(8, 8), np.random.rand(8, 8))
