import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from starshape import data, latent, models
from starshape.errors import ConfigError, ContractError, DataError, ProtocolError


def small_gen(kind, c=1, latent_dim=8, seed=0):
    towers = 1 if kind in ("dcgan", "multichannel") else (2 if kind == "separable" else c + 1)
    spec = models.GeneratorSpec(kind, c=c, base_width=16 * towers, latent_dim_per_tower=latent_dim)
    torch.manual_seed(seed)
    return models.build_generator(spec).eval()


class TestNormalizedL2:
    def test_identity_is_zero(self):
        x = np.random.default_rng(0).normal(size=(2, 48, 80))
        assert latent.normalized_l2(x, x) == 0.0

    def test_matches_manual(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(2, 4, 4)), rng.normal(size=(2, 4, 4))
        manual = float(np.sum((a - b) ** 2)) / a.size
        assert latent.normalized_l2(a, b) == pytest.approx(manual, rel=1e-12)


class TestLatentNll:
    def test_closed_form_d1(self):
        assert latent.latent_nll(np.zeros(1)) == pytest.approx(0.5 * math.log(2 * math.pi), rel=1e-12)

    def test_closed_form_d100(self):
        assert latent.latent_nll(np.zeros(100)) == pytest.approx(50 * math.log(2 * math.pi), rel=1e-12)

    def test_matches_density_oracle(self):
        from scipy.stats import norm

        rng = np.random.default_rng(2)
        for _ in range(5):
            z = rng.normal(size=64)
            oracle = float(-norm.logpdf(z).sum())
            assert latent.latent_nll(z) == pytest.approx(oracle, abs=1e-9)

    def test_prior_moments_d100(self):
        mean, std = latent.prior_nll_moments(100)
        assert mean == pytest.approx(141.8939, abs=1e-3)
        assert std == pytest.approx(math.sqrt(50.0), rel=1e-12)

    def test_accepts_torch(self):
        z = torch.zeros(10)
        assert latent.latent_nll(z) == pytest.approx(5 * math.log(2 * math.pi), rel=1e-12)


class TestSlerp:
    def test_endpoints(self):
        g = torch.Generator().manual_seed(0)
        z0, z1 = torch.randn(8, generator=g), torch.randn(8, generator=g)
        assert torch.allclose(latent.slerp(z0, z1, 0.0), z0, atol=1e-6)
        assert torch.allclose(latent.slerp(z0, z1, 1.0), z1, atol=1e-6)

    def test_identical_vectors_fallback(self):
        z = torch.randn(8, generator=torch.Generator().manual_seed(1))
        for t in (0.0, 0.3, 1.0):
            assert torch.allclose(latent.slerp(z, z, t), z, atol=1e-7)

    def test_orthogonal_midpoint(self):
        z0 = torch.tensor([1.0, 0.0])
        z1 = torch.tensor([0.0, 1.0])
        mid = latent.slerp(z0, z1, 0.5)
        expected = (z0 + z1) / math.sqrt(2.0)
        assert torch.allclose(mid, expected, atol=1e-6)
        assert float(mid.norm()) == pytest.approx(1.0, abs=1e-6)

    def test_zero_vector_rejected(self):
        with pytest.raises(DataError):
            latent.slerp(torch.zeros(4), torch.ones(4), 0.5)

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_norm_interpolates_monotonically(self, seed):
        # the norm can overshoot for obtuse angles, so the property is
        # checked on the non-obtuse domain where Gaussian latents live
        g = torch.Generator().manual_seed(seed)
        z0 = torch.randn(16, generator=g)
        z1 = torch.randn(16, generator=g) * 2.5
        cos = float(torch.dot(z0, z1) / (z0.norm() * z1.norm()))
        if cos < 0 or abs(float(z0.norm()) - float(z1.norm())) < 1e-3:
            return
        norms = [float(latent.slerp(z0, z1, t).norm()) for t in np.linspace(0, 1, 11)]
        diffs = np.diff(norms)
        assert (diffs >= -1e-5).all() or (diffs <= 1e-5).all()


class TestReconstructRegular:
    def test_informed_init_reaches_global_minimum(self):
        g = small_gen("dcgan")
        z_star = torch.randn(1, 16, generator=torch.Generator().manual_seed(3))
        target = models.generate(g, z_star)[0].numpy()
        res = latent.reconstruct_regular(g, target, restarts=1, iters=5, init_latents=[z_star])
        assert res.l2_error <= 1e-8

    def test_pairwise_informed_init(self):
        g = small_gen("star", c=2)
        gen = torch.Generator().manual_seed(4)
        z = models.sample_latent(g.spec, 1, generator=gen)
        target = g.forward_pair(z.z_red, z.z_greens[1], 1)[0].detach().numpy()
        res = latent.reconstruct_regular(
            g, target, restarts=1, iters=5, pair_index=1,
            init_latents=[(z.z_red, z.z_greens[1])],
        )
        assert res.l2_error <= 1e-8
        assert res.best_latent.size == 16

    def test_never_worse_than_initialization(self):
        g = small_gen("separable")
        target = np.zeros((2, 48, 80), dtype=np.float32)
        gen = torch.Generator().manual_seed(5)
        init = (torch.randn(1, 8, generator=gen), torch.randn(1, 8, generator=gen))
        with torch.no_grad():
            at_init = float(((g.forward_pair(*init, 0) - torch.from_numpy(target)[None]) ** 2).mean())
        res = latent.reconstruct_regular(g, target, restarts=1, iters=8, init_latents=[init])
        assert res.l2_error <= at_init + 1e-12

    def test_best_restart_wins(self):
        g = small_gen("dcgan")
        target = models.generate(
            g, torch.randn(1, 16, generator=torch.Generator().manual_seed(6))
        )[0].numpy()
        res = latent.reconstruct_regular(g, target, restarts=3, iters=5, seed=9)
        assert len(res.restart_errors) == 3
        assert res.l2_error == min(res.restart_errors)
        assert math.isfinite(res.nll)

    def test_defaults_are_paper_protocol(self):
        assert latent.DEFAULT_RESTARTS == 5
        assert latent.DEFAULT_ITERS == 50


class TestReconstructSeparable:
    def test_informed_init_both_stages_near_zero(self):
        g = small_gen("separable")
        gen = torch.Generator().manual_seed(7)
        z = models.sample_latent(g.spec, 1, generator=gen)
        target = g.forward_pair(z.z_red, z.z_greens[0], 0)[0].detach().numpy()
        res = latent.reconstruct_separable(
            g, target, restarts=1, iters=5, init_latents=[(z.z_red, z.z_greens[0])]
        )
        assert res.l2_error <= 1e-8
        red_err, green_err = res.stage_errors[0]
        assert red_err <= 1e-8 and green_err <= 1e-8
        np.testing.assert_allclose(
            res.best_latent, torch.cat([z.z_red, z.z_greens[0]], 1).numpy().ravel(), atol=1e-6
        )

    def test_stage_isolation(self, monkeypatch):
        g = small_gen("separable")
        calls = []
        original = latent._lbfgs_best

        def spy(params, err_fn, iters):
            calls.append([p.detach().clone() for p in params])
            return original(params, err_fn, iters)

        monkeypatch.setattr(latent, "_lbfgs_best", spy)
        gen = torch.Generator().manual_seed(8)
        init = (torch.randn(1, 8, generator=gen), torch.randn(1, 8, generator=gen))
        latent.reconstruct_separable(
            g, np.zeros((2, 48, 80), dtype=np.float32),
            restarts=1, iters=3, init_latents=[init],
        )
        # one optimizer call per stage, each over exactly one latent
        assert len(calls) == 2
        assert len(calls[0]) == 1 and len(calls[1]) == 1
        # stage 2 starts from the untouched green initialization
        np.testing.assert_allclose(calls[1][0].numpy(), init[1].numpy(), atol=1e-7)

    def test_dcgan_kind_rejected(self):
        g = small_gen("dcgan")
        with pytest.raises(ContractError):
            latent.reconstruct_separable(g, np.zeros((2, 48, 80), dtype=np.float32))


class TestNnBaseline:
    def make_ds(self, n, seed=0):
        rng = np.random.default_rng(seed)
        items = [
            data.Image2C(
                red=rng.uniform(-1, 1, (48, 80)).astype(np.float32),
                green=rng.uniform(-1, 1, (48, 80)).astype(np.float32),
                class_label="a",
            )
            for _ in range(n)
        ]
        return data.Dataset(items=items, classes=["a"], split_tags=[data.TRAIN] * n, seed=seed)

    def test_member_target_has_zero_distance(self):
        ds = self.make_ds(20)
        neighbor, dist = latent.nn_baseline(ds.items[7], ds)
        assert dist == 0.0
        assert neighbor is ds.items[7]

    def test_matches_brute_force_oracle(self):
        ds = self.make_ds(200, seed=3)
        rng = np.random.default_rng(9)
        target = data.Image2C(
            red=rng.uniform(-1, 1, (48, 80)).astype(np.float32),
            green=rng.uniform(-1, 1, (48, 80)).astype(np.float32),
            class_label="a",
        )
        neighbor, dist = latent.nn_baseline(target, ds)
        best_d, best_item = math.inf, None
        for item in ds.items:
            d = float(np.mean((item.channels().astype(np.float64) - target.channels()) ** 2))
            if d < best_d:
                best_d, best_item = d, item
        assert neighbor is best_item
        assert dist == pytest.approx(best_d, rel=1e-12)


class TestCellCycleStrip:
    def test_endpoints_match_direct_generation(self):
        g = small_gen("star", c=2)
        gen = torch.Generator().manual_seed(10)
        z = models.sample_latent(g.spec, 1, generator=gen)
        z_end = torch.randn(1, 8, generator=gen)
        strip = latent.cell_cycle_strip(g, z.z_red, z_end, 2, z.z_greens)
        first = models.generate(g, z)[0].numpy()
        last = models.generate(g, models.StarLatent(z_end, z.z_greens))[0].numpy()
        np.testing.assert_allclose(strip[0], first, atol=1e-6)
        np.testing.assert_allclose(strip[-1], last, atol=1e-6)

    def test_c6_strip_has_seven_columns(self):
        g = small_gen("star", c=6)
        gen = torch.Generator().manual_seed(11)
        z = models.sample_latent(g.spec, 1, generator=gen)
        strip = latent.cell_cycle_strip(g, z.z_red, torch.randn(1, 8, generator=gen), 3, z.z_greens)
        assert strip.shape == (3, 7, 48, 80)

    def test_severed_links_freeze_greens(self):
        g = small_gen("star", c=2)
        models.sever_cross_links(g)
        gen = torch.Generator().manual_seed(12)
        z = models.sample_latent(g.spec, 1, generator=gen)
        strip = latent.cell_cycle_strip(g, z.z_red, torch.randn(1, 8, generator=gen), 4, z.z_greens)
        for frame in strip[1:]:
            np.testing.assert_array_equal(frame[1:], strip[0][1:])
        assert np.abs(strip[-1][0] - strip[0][0]).max() > 0

    def test_rejects_bad_inputs(self):
        g = small_gen("star", c=2)
        z = models.sample_latent(g.spec, 1, generator=torch.Generator().manual_seed(0))
        with pytest.raises(ConfigError):
            latent.cell_cycle_strip(g, z.z_red, z.z_red + 1, 1, z.z_greens)
        with pytest.raises(ConfigError):
            latent.cell_cycle_strip(small_gen("dcgan"), z.z_red, z.z_red + 1, 2, z.z_greens)


class TestReconScatter:
    def fake_results(self, n):
        return [
            latent.ReconResult(
                best_latent=np.zeros(4),
                l2_error=0.01 * (i + 1),
                nll=100.0 + i,
                restart_errors=[0.01 * (i + 1)],
                mode="regular",
            )
            for i in range(n)
        ]

    def test_guides_for_d100(self):
        scatter = latent.recon_scatter(self.fake_results(3), nn_median=0.08, latent_dim=100)
        assert scatter["guides"]["nll_mean"] == pytest.approx(141.8939, abs=1e-3)
        assert scatter["guides"]["nll_std"] == pytest.approx(math.sqrt(50), rel=1e-9)
        assert scatter["guides"]["nn_median_l2"] == 0.08

    def test_points_only_without_baselines(self):
        scatter = latent.recon_scatter(self.fake_results(4))
        assert scatter["guides"] == {}
        assert len(scatter["points"]) == 4

    def test_empty_results_rejected(self):
        with pytest.raises(ProtocolError):
            latent.recon_scatter([])
