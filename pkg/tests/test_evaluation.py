import numpy as np
import pytest
import scipy.linalg
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_condition, small_spec
from pmcgan import evaluation as ev
from pmcgan.errors import DimensionMismatch, InsufficientData, MissingAsset, NonConvergent
from pmcgan.networks import UMARGenerator


def stats(mu, sigma, n=10):
    return ev.FeatureStats(np.atleast_1d(mu), np.atleast_2d(sigma), n)


def random_spd(rng, d):
    a = rng.normal(size=(d, d))
    return a @ a.T / d + 1e-3 * np.eye(d)


def scipy_fid(a, b):
    covmean = scipy.linalg.sqrtm(a.sigma @ b.sigma).real
    diff = a.mu - b.mu
    return float(diff @ diff + np.trace(a.sigma + b.sigma - 2 * covmean))


class TestFrechet:
    def test_one_dimensional_shift(self):
        assert ev.frechet_distance(stats(0.0, 1.0), stats(2.0, 1.0)) == pytest.approx(4.0, abs=1e-6)

    def test_one_dimensional_scale(self):
        assert ev.frechet_distance(stats(0.0, 1.0), stats(0.0, 4.0)) == pytest.approx(1.0, abs=1e-6)

    def test_self_distance(self):
        rng = np.random.default_rng(0)
        s = ev.feature_stats(rng.normal(size=(200, 12)))
        assert ev.frechet_distance(s, s) < 1e-8

    def test_matches_scipy(self):
        rng = np.random.default_rng(1)
        for d in (1, 3, 16, 64):
            a = stats(rng.normal(size=d), random_spd(rng, d))
            b = stats(rng.normal(size=d), random_spd(rng, d))
            assert ev.frechet_distance(a, b) == pytest.approx(scipy_fid(a, b), rel=1e-7, abs=1e-8)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 12), st.integers(0, 2**31 - 1))
    def test_symmetric_nonnegative(self, d, seed):
        rng = np.random.default_rng(seed)
        a = stats(rng.normal(size=d), random_spd(rng, d))
        b = stats(rng.normal(size=d), random_spd(rng, d))
        ab, ba = ev.frechet_distance(a, b), ev.frechet_distance(b, a)
        assert ab >= 0 and ba >= 0
        assert abs(ab - ba) < 1e-8 * max(1.0, ab)

    def test_rank_deficient_covariance(self):
        rng = np.random.default_rng(2)
        f = rng.normal(size=(5, 20))  # 5 samples in 20-d: covariance of rank 4
        s = ev.feature_stats(f)
        assert ev.frechet_distance(s, s) < 1e-8
        assert ev.frechet_distance(s, ev.feature_stats(rng.normal(size=(50, 20)))) > 0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            ev.frechet_distance(stats(np.zeros(2), np.eye(2)), stats(np.zeros(3), np.eye(3)))

    def test_indefinite_rejected(self):
        with pytest.raises(NonConvergent):
            ev.frechet_distance(stats(np.zeros(2), np.diag([1.0, -1.0])), stats(np.zeros(2), np.eye(2)))

    def test_non_finite_rejected(self):
        with pytest.raises(NonConvergent):
            ev.frechet_distance(stats(np.zeros(2), np.array([[np.nan, 0], [0, 1]])), stats(np.zeros(2), np.eye(2)))


class TestFeatureStats:
    def test_unbiased_covariance(self):
        f = np.array([[0.0], [2.0]])
        s = ev.feature_stats(f)
        assert s.mu[0] == 1.0 and s.sigma[0, 0] == 2.0 and s.n == 2

    def test_needs_two(self):
        with pytest.raises(InsufficientData):
            ev.feature_stats(np.zeros((1, 4)))


class TestExtractor:
    def test_toy_shape_and_determinism(self):
        x = torch.rand(3, 3, 64, 64) * 2 - 1
        ext = ev.ToyExtractor(dim=24)
        f = ev.extract_features(torch.cat([x, x[:1]]), ext)
        assert f.shape == (4, 24)
        assert np.array_equal(f[0], f[3])

    def test_resizes_to_native(self):
        seen = []

        class Probe(torch.nn.Module):
            input_size = 40

            def forward(self, x):
                seen.append(tuple(x.shape[-2:]))
                return x.mean((2, 3))

        ev.extract_features(torch.zeros(2, 3, 64, 64), Probe())
        assert seen == [(40, 40)]

    def test_inception_missing(self, monkeypatch, tmp_path):
        monkeypatch.delenv(ev.INCEPTION_WEIGHTS_ENV, raising=False)
        with pytest.raises(MissingAsset):
            ev.InceptionFeatures()
        with pytest.raises(MissingAsset):
            ev.InceptionFeatures(tmp_path / "absent.pth")

    def test_inception_loads_state_dict(self, tmp_path):
        from torchvision.models import inception_v3

        torch.manual_seed(0)
        path = tmp_path / "inception.pth"
        torch.save(inception_v3(weights=None, aux_logits=True, init_weights=False).state_dict(), path)
        f = ev.extract_features(torch.rand(2, 3, 64, 64) * 2 - 1, ev.InceptionFeatures(path))
        assert f.shape == (2, 2048)


class Stub:
    """Generator that ignores the condition and returns a fixed image per call."""

    def __init__(self, images):
        self.images, self.calls = images, 0

    def __call__(self, cond, z):
        img = self.images[self.calls % len(self.images)][None]
        self.calls += 1
        return img


class Injected(torch.nn.Module):
    """Extractor stub whose 'features' are the first pixel values, bypassing any network."""

    def forward(self, x):
        return x[:, :, 0, 0]


class TestComputeFID:
    def test_pools_five_per_input(self):
        real = torch.rand(4, 3, 8, 8)
        stub = Stub(torch.rand(7, 3, 8, 8))
        res = ev.compute_fid(real, torch.zeros(6, 40, 8, 8), stub, Injected(), rng=0)
        assert res.n_fake == 30 and stub.calls == 30 and res.n_real == 4

    def test_identity_generator(self):
        real = torch.rand(10, 3, 8, 8) * 2 - 1
        # five codes per input, ten inputs: every real image appears five times in the fake set,
        # so the fake mean equals the real mean and the covariance differs only by the n-1 factor
        res = ev.compute_fid(real, torch.zeros(10, 40, 8, 8), Stub(real), Injected(), rng=0)
        expected_sigma_ratio = (10 - 1) * 5 / (50 - 1) / 1.0
        s = res.real.sigma
        oracle = np.trace(s) + expected_sigma_ratio * np.trace(s) - 2 * np.sqrt(expected_sigma_ratio) * np.trace(s)
        assert res.fid == pytest.approx(oracle, abs=1e-9)
        assert res.fid < 1e-2

    def test_injected_gaussians_match_oracle(self):
        rng = np.random.default_rng(3)
        real = torch.from_numpy(rng.normal(0, 1, size=(400, 3, 1, 1))).float()
        fake = torch.from_numpy(rng.normal(1, 2, size=(100, 3, 1, 1))).float()
        res = ev.compute_fid(real, torch.zeros(20, 40, 1, 1), Stub(fake), Injected(), rng=0)
        direct = ev.frechet_distance(ev.feature_stats(real[:, :, 0, 0].double().numpy()),
                                     ev.feature_stats(fake[:, :, 0, 0].double().numpy()))
        assert res.fid == pytest.approx(direct, abs=1e-9)
        # population value: 3 * (1 + 1 + 4 - 2*2) = 6
        assert res.fid == pytest.approx(6.0, rel=0.35)

    def test_halves_closer_than_noise(self):
        rng = np.random.default_rng(4)
        base = torch.from_numpy(rng.normal(size=(60, 3, 1, 1))).float() * 0.3
        real, other = base[:30], base[30:]
        noise = torch.from_numpy(rng.permutation(base.numpy().ravel()).reshape(60, 3, 1, 1) * 5).float()
        ext = Injected()
        close = ev.compute_fid(real, torch.zeros(6, 40, 1, 1), Stub(other), ext, rng=0).fid
        far = ev.compute_fid(real, torch.zeros(6, 40, 1, 1), Stub(noise[:30]), ext, rng=0).fid
        assert close < far

    def test_real_generator_pipeline(self):
        torch.manual_seed(0)
        G = UMARGenerator(small_spec()).eval()
        inputs = torch.cat([random_condition(16, seed=k) for k in range(3)])
        res = ev.compute_fid(torch.rand(5, 3, 16, 16) * 2 - 1, inputs, G, ev.ToyExtractor(8), rng=1)
        assert res.n_fake == 15 and np.isfinite(res.fid) and res.fid >= 0

    def test_empty(self):
        with pytest.raises(InsufficientData):
            ev.compute_fid(torch.zeros(0, 3, 8, 8), torch.zeros(1, 40, 8, 8), Stub(torch.zeros(1, 3, 8, 8)), Injected())


class TestInterpolation:
    def setup_method(self):
        torch.manual_seed(0)
        self.G = UMARGenerator(small_spec()).eval()
        self.cond = random_condition(16)
        g = torch.Generator().manual_seed(1)
        self.a, self.b = torch.randn(1, 16, generator=g), torch.randn(1, 16, generator=g)

    def test_endpoints_exact(self):
        with torch.no_grad():
            first, last = self.G(self.cond, self.a), self.G(self.cond, self.b)
        for steps in (2, 5):
            _, imgs = ev.interpolate_latents(self.cond, self.a, self.b, steps, self.G)
            assert imgs.shape[0] == steps
            assert torch.equal(imgs[0:1], first) and torch.equal(imgs[-1:], last)

    def test_constant_path(self):
        _, imgs = ev.interpolate_latents(self.cond, self.a, self.a.clone(), 4, self.G)
        assert all(torch.equal(imgs[0], imgs[k]) for k in range(4))

    def test_grid(self):
        seen = []

        def probe(cond, z):
            seen.append(z.clone())
            return torch.zeros(1, 3, 2, 2)

        ts, _ = ev.interpolate_latents(self.cond, self.a, self.b, 10, probe)
        assert ts == [k / 9 for k in range(10)]
        for t, z in zip(ts, seen):
            torch.testing.assert_close(z, (1 - t) * self.a + t * self.b, rtol=0, atol=1e-6)

    def test_too_few_steps(self):
        with pytest.raises(ValueError):
            ev.interpolate_latents(self.cond, self.a, self.b, 1, self.G)


class TestMultimodal:
    def test_sampling(self, tmp_path):
        torch.manual_seed(0)
        G = UMARGenerator(small_spec()).eval()
        cond = random_condition(16)
        one = ev.sample_multimodal(cond, G, 1, rng=5)
        assert one.shape == (1, 3, 16, 16)
        a, b = ev.sample_multimodal(cond, G, 4, rng=5), ev.sample_multimodal(cond, G, 4, rng=5)
        assert torch.equal(a, b)
        div = ev.pairwise_diversity(a, ev.mask_of(cond))
        assert len(div) == 6 and all(v > 0 for v in div.values())
        grid = ev.tile_grid(a, ncols=2)
        assert grid.shape == (2 * 18 + 2, 2 * 18 + 2, 3) and grid.dtype == np.uint8
        assert ev.save_png(grid, tmp_path / "grid.png").is_file()

    def test_diversity_oracle(self):
        imgs = torch.zeros(2, 3, 4, 4)
        imgs[1] = 0.5
        imgs[1, :, 0, 0] = 3.0
        mask = torch.zeros(4, 4)
        mask[1:3, 1:3] = 1
        assert ev.pairwise_diversity(imgs, mask) == {(0, 1): 0.5}
