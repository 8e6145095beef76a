import math

import numpy as np
import pytest
import torch
from scipy import integrate, stats

from splitvae import noisemodel as nm


def constant_gmm(sigma0, smin=0.0, smax=1000.0, floor=1e-3):
    """K=1, D=0 model with zero mean offset and total std ``sigma0``."""
    rng_ = smax - smin
    c0 = float(nm._softplus_inv((sigma0 - floor) / rng_))
    return nm.GmmNoiseModel([[0.0]], [[0.0]], [[c0]], smin, smax, floor)


def random_gmm(seed, k=3, d=2):
    rng = np.random.default_rng(seed)
    return nm.GmmNoiseModel(
        weight_coeffs=rng.normal(0, 1, (k, d + 1)),
        mean_offset_coeffs=rng.normal(0, 0.02, (k, d + 1)),
        std_coeffs=rng.normal(-3, 0.5, (k, d + 1)),
        signal_min=0.0,
        signal_max=1000.0,
        std_floor=1.0,
    )


@pytest.fixture(scope="module")
def gaussian_pairs():
    rng = np.random.default_rng(0)
    clean = rng.uniform(0, 1000, (400, 400))
    return [(clean, clean + rng.normal(0, 100, clean.shape))]


@pytest.fixture(scope="module")
def held_out():
    rng = np.random.default_rng(99)
    clean = rng.uniform(0, 1000, (200, 200))
    return clean, clean + rng.normal(0, 100, clean.shape)


class TestGmmDensity:
    def test_analytic_single_gaussian(self):
        sigma0 = 50.0
        model = constant_gmm(sigma0)
        rng = np.random.default_rng(1)
        clean = rng.uniform(0, 1000, (16, 16))
        noisy = clean + rng.normal(0, 80, clean.shape)
        logp, total = nm.log_likelihood(model, noisy, clean)
        expected = -0.5 * np.log(2 * np.pi * sigma0**2) - (noisy - clean) ** 2 / (2 * sigma0**2)
        np.testing.assert_allclose(logp, expected, rtol=1e-10)
        assert total == pytest.approx(expected.sum(), rel=1e-10)

    def test_zero_residual(self):
        model = constant_gmm(20.0)
        img = np.linspace(0, 900, 64).reshape(8, 8)
        logp, _ = nm.log_likelihood(model, img, img)
        np.testing.assert_allclose(logp, -0.5 * np.log(2 * np.pi * 400.0))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_normalisation_quadrature(self, seed):
        model = random_gmm(seed)
        rng = np.random.default_rng(seed)
        for s in rng.uniform(0, 1000, 100):
            with torch.no_grad():
                log_w, means, stds = model.components(torch.tensor([s], dtype=torch.float64))
            lo = float((means - 8 * stds).min())
            hi = float((means + 8 * stds).max())
            xs = np.linspace(lo, hi, 20001)
            with torch.no_grad():
                dens = model.log_prob(torch.as_tensor(xs), torch.full((xs.size,), s, dtype=torch.float64)).exp()
            assert integrate.simpson(dens.numpy(), x=xs) == pytest.approx(1.0, abs=1e-3)

    def test_weights_sum_to_one_and_floor(self):
        model = random_gmm(5)
        with torch.no_grad():
            log_w, _, stds = model.components(torch.linspace(-100, 1100, 200, dtype=torch.float64))
        np.testing.assert_allclose(log_w.exp().sum(-1).numpy(), 1.0, atol=1e-12)
        assert stds.min().item() >= model.std_floor

    def test_pixel_independence(self):
        model = random_gmm(3)
        rng = np.random.default_rng(0)
        a_c, b_c = rng.uniform(0, 1000, (8, 8)), rng.uniform(0, 1000, (8, 5))
        a_n, b_n = a_c + rng.normal(0, 30, a_c.shape), b_c + rng.normal(0, 30, b_c.shape)
        whole = nm.log_likelihood(model, np.hstack([a_n, b_n]), np.hstack([a_c, b_c]))[1]
        parts = nm.log_likelihood(model, a_n, a_c)[1] + nm.log_likelihood(model, b_n, b_c)[1]
        assert whole == pytest.approx(parts, rel=1e-12)

    def test_density_floor_keeps_finite(self):
        model = constant_gmm(1.0)
        logp, _ = nm.log_likelihood(model, np.array([[1e6]]), np.array([[0.0]]))
        assert logp[0, 0] == pytest.approx(nm.LOG_DENSITY_FLOOR)

    def test_clean_values_clamped(self):
        model = random_gmm(1)
        noisy = np.full((1, 1), 1000.0)
        above = nm.log_likelihood(model, noisy, np.full((1, 1), 5000.0))[0]
        at_max = nm.log_likelihood(model, noisy, np.full((1, 1), 1000.0))[0]
        # the mean offset follows the raw signal; only the polynomial argument is clamped
        with torch.no_grad():
            _, _, s_above = model.components(torch.tensor([5000.0], dtype=torch.float64))
            _, _, s_max = model.components(torch.tensor([1000.0], dtype=torch.float64))
        np.testing.assert_allclose(s_above.numpy(), s_max.numpy())
        assert np.isfinite(above).all() and np.isfinite(at_max).all()


class TestGmmFit:
    def test_recovers_gaussian(self, gaussian_pairs, held_out):
        model = nm.fit_gmm(gaussian_pairs, n_components=1, degree=0, iterations=300, seed=0)
        clean, noisy = held_out
        fitted = np.exp(nm.log_likelihood(model, noisy, clean)[0])
        analytic = stats.norm.pdf(noisy, loc=clean, scale=100.0)
        assert np.mean(np.abs(fitted / analytic - 1)) < 0.02

    def test_signal_range_expanded(self, gaussian_pairs):
        model = nm.fit_gmm(gaussian_pairs, n_components=1, degree=0, iterations=5, seed=0)
        lo, hi = gaussian_pairs[0][0].min(), gaussian_pairs[0][0].max()
        assert model.signal_min == pytest.approx(lo - 0.05 * (hi - lo))
        assert model.signal_max == pytest.approx(hi + 0.05 * (hi - lo))

    def test_three_components_not_worse(self, gaussian_pairs, held_out):
        clean, noisy = held_out
        m1 = nm.fit_gmm(gaussian_pairs, n_components=1, degree=0, iterations=300, seed=0)
        m3 = nm.fit_gmm(gaussian_pairs, n_components=3, degree=2, iterations=300, seed=0)
        nll1 = -nm.log_likelihood(m1, noisy, clean)[1]
        nll3 = -nm.log_likelihood(m3, noisy, clean)[1]
        assert nll3 <= nll1 + 0.01 * abs(nll1)

    def test_noise_free_collapses_to_floor(self):
        clean = np.random.default_rng(0).uniform(0, 1000, (400, 400))
        model = nm.fit_gmm([(clean, clean.copy())], n_components=1, degree=0, iterations=500, seed=0)
        with torch.no_grad():
            _, _, stds = model.components(torch.as_tensor(clean[:4]))
        assert stds.max().item() < 1.01 * model.std_floor
        out = nm.sample_noisy(model, clean, seed=1)
        assert np.all(np.abs(out - clean) < 6 * model.std_floor)

    def test_too_few_pixels(self):
        img = np.zeros((100, 100))
        with pytest.raises(ValueError, match="at least"):
            nm.fit_gmm([(img, img)])

    def test_empty_and_mismatched(self):
        with pytest.raises(ValueError):
            nm.fit_gmm([])
        with pytest.raises(ValueError):
            nm.fit_gmm([(np.zeros((4, 4)), np.zeros((4, 5)))])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_aborts(self):
        clean = np.zeros((400, 400))
        clean[0, 0] = 1.0
        noisy = clean.copy()
        noisy[1, 1] = np.inf
        with pytest.raises(FloatingPointError):
            nm.fit_gmm([(clean, noisy)], iterations=50, batch_pixels=160000)


class TestHistogram:
    def test_constant_pair_is_diagonal(self):
        img = np.full((32, 32), 5.0)
        model = nm.fit_histogram([(img, img)], bins=16)
        row = model.bin_index(np.array(5.0))
        assert model.table[row, row] == pytest.approx(1.0)
        np.testing.assert_allclose(model.table.sum(axis=1), 1.0)

    def test_rows_normalised_and_smoothed(self, gaussian_pairs):
        model = nm.fit_histogram(gaussian_pairs, bins=64)
        np.testing.assert_allclose(model.table.sum(axis=1), 1.0)
        assert model.table.min() > 0

    def test_matches_analytic_density(self):
        rng = np.random.default_rng(2)
        levels = np.array([200.0, 400.0, 600.0, 800.0])
        clean = rng.choice(levels, size=(1000, 1000))
        noisy = clean + rng.normal(0, 100, clean.shape)
        model = nm.fit_histogram([(clean, noisy)], bins=128)
        counts, _, _ = np.histogram2d(clean.ravel(), noisy.ravel(), bins=[model.edges, model.edges])
        centres = 0.5 * (model.edges[:-1] + model.edges[1:])
        for lev in levels:
            r = model.bin_index(np.array(lev))
            full = counts[r] >= 1000
            dens = model.table[r, full] / model.bin_width
            # bin-averaged analytic density
            lo, hi = model.edges[:-1][full], model.edges[1:][full]
            ana = (stats.norm.cdf(hi, lev, 100) - stats.norm.cdf(lo, lev, 100)) / model.bin_width
            assert np.all(np.abs(dens / ana - 1) < 0.10), centres[full]

    def test_empty(self):
        with pytest.raises(ValueError):
            nm.fit_histogram([])


class TestSampling:
    def test_single_gaussian_std(self):
        model = constant_gmm(40.0)
        clean = np.full((1000, 1000), 500.0)
        out = nm.sample_noisy(model, clean, seed=3)
        assert (out - clean).std() == pytest.approx(40.0, rel=0.005)
        assert (out - clean).mean() == pytest.approx(0.0, abs=3 * 40.0 / 1000)

    def test_refit_recovers_nll(self, held_out):
        rng = np.random.default_rng(4)
        gen = random_gmm(7, k=2, d=1)
        clean = rng.uniform(0, 1000, (400, 400))
        noisy = nm.sample_noisy(gen, clean, seed=5)
        refit = nm.fit_gmm([(clean, noisy)], n_components=2, degree=1, iterations=600, seed=0)
        hc = held_out[0]
        hn = nm.sample_noisy(gen, hc, seed=6)
        nll_gen = -nm.log_likelihood(gen, hn, hc)[1]
        nll_fit = -nm.log_likelihood(refit, hn, hc)[1]
        assert abs(nll_fit - nll_gen) < 0.02 * abs(nll_gen)

    def test_histogram_sampling_stays_in_range(self, gaussian_pairs):
        model = nm.fit_histogram(gaussian_pairs, bins=64)
        clean = np.full((50, 50), 500.0)
        out = nm.sample_noisy(model, clean, seed=0)
        assert model.range_min <= out.min() and out.max() <= model.range_max
        assert abs(out.mean() - 500) < 15


class TestPersistence:
    def test_gmm_roundtrip(self, tmp_path):
        model = random_gmm(11)
        nm.save(model, tmp_path / "nm.json")
        loaded = nm.load(tmp_path / "nm.json")
        rng = np.random.default_rng(0)
        clean = rng.uniform(0, 1000, (32, 32))
        noisy = clean + rng.normal(0, 20, clean.shape)
        np.testing.assert_array_equal(
            nm.log_likelihood(model, noisy, clean)[0], nm.log_likelihood(loaded, noisy, clean)[0]
        )

    def test_histogram_roundtrip(self, tmp_path, gaussian_pairs):
        model = nm.fit_histogram(gaussian_pairs, bins=32)
        nm.save(model, tmp_path / "h.json")
        loaded = nm.load(tmp_path / "h.json")
        c, n = gaussian_pairs[0][0][:8, :8], gaussian_pairs[0][1][:8, :8]
        np.testing.assert_array_equal(nm.log_likelihood(model, n, c)[0], nm.log_likelihood(loaded, n, c)[0])

    def test_rejects_unknown_version(self):
        doc = random_gmm(0).to_dict()
        doc["schema_version"] = 99
        with pytest.raises(ValueError):
            nm.from_dict(doc)

    def test_log_constant(self):
        assert nm.LOG_DENSITY_FLOOR == pytest.approx(math.log(1e-10))
