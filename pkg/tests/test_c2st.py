import numpy as np
import pytest
import torch

from starshape import c2st, data, models
from starshape.errors import ConfigError, ProtocolError


def synth_pair(count=60, seed=0, noise=0.08):
    spec = data.SynthSpec(
        recipes=(
            data.ClassRecipe("tips", "tips", noise=noise),
            data.ClassRecipe("ring", "ring", noise=noise),
        ),
        count=count,
        seed=seed,
    )
    ds = data.synth_generate(spec)
    return data.split_train_test(ds, 0.5, seed=seed)


def tiny_cfg(**kw):
    defaults = dict(
        flavor="wgan-gp",
        n_splits=3,
        train_steps=30,
        batch_size=16,
        disc_base_width=16,
        seed=5,
    )
    defaults.update(kw)
    return c2st.C2STConfig(**defaults)


class TestMedianMad:
    def test_small_examples(self):
        assert c2st.median_mad([1, 2, 100]) == (2.0, 1.0)
        assert c2st.median_mad([5]) == (5.0, 0.0)

    def test_normal_draws_match_mad_constant(self):
        draws = np.random.default_rng(0).normal(size=1000)
        med, mad = c2st.median_mad(draws)
        assert abs(med) < 0.1
        assert mad == pytest.approx(0.6745, abs=0.05)

    def test_empty_errors(self):
        with pytest.raises(ProtocolError):
            c2st.median_mad([])


class TestConfig:
    def test_protocol_defaults(self):
        cfg = c2st.C2STConfig()
        assert cfg.n_splits == 10
        assert cfg.train_steps == 5000

    def test_rejects_unknown_flavor(self):
        with pytest.raises(ConfigError):
            c2st.C2STConfig(flavor="mmd")


class TestScoreProtocol:
    def test_sign_contract_xent(self):
        ds = synth_pair(count=30)
        a = ds.stack(split=data.TRAIN, class_label="tips")
        b = ds.subset(class_label="ring")
        report = c2st.c2st_score(a, b, tiny_cfg(flavor="xent"))
        assert all(s <= 0 for s in report.per_split_scores)

    def test_sign_contract_wgan(self):
        ds = synth_pair(count=30)
        a = ds.stack(split=data.TRAIN, class_label="tips")
        b = ds.subset(class_label="tips")
        report = c2st.c2st_score(a, b, tiny_cfg(flavor="wgan"))
        assert all(s >= 0 for s in report.per_split_scores)

    def test_deterministic_given_seed(self):
        ds = synth_pair(count=30)
        a = ds.stack(split=data.TRAIN, class_label="tips")
        b = ds.subset(class_label="ring")
        r1 = c2st.c2st_score(a, b, tiny_cfg())
        r2 = c2st.c2st_score(a, b, tiny_cfg())
        assert r1.per_split_scores == r2.per_split_scores

    def test_median_mad_recomputable(self):
        ds = synth_pair(count=30)
        a = ds.stack(split=data.TRAIN, class_label="tips")
        report = c2st.c2st_score(a, ds.subset(class_label="ring"), tiny_cfg())
        med, mad = c2st.median_mad(report.per_split_scores)
        assert report.median == med and report.mad == mad

    def test_excludes_non_finite_splits(self, monkeypatch):
        real = _score = c2st._score_split

        def flaky(source, images, cfg, i):
            if i == 1:
                return float("nan")
            return real(source, images, cfg, i)

        monkeypatch.setattr(c2st, "_score_split", flaky)
        ds = synth_pair(count=30)
        a = ds.stack(split=data.TRAIN, class_label="tips")
        report = c2st.c2st_score(a, ds.subset(class_label="ring"), tiny_cfg())
        assert report.excluded_splits == [1]
        assert len(report.per_split_scores) == 2

    def test_too_few_test_items(self):
        a = np.zeros((10, 2, 48, 80), dtype=np.float32)
        with pytest.raises(ProtocolError):
            c2st.c2st_score(a, a[:1], tiny_cfg())

    def test_channel_mismatch(self):
        a = np.zeros((10, 3, 48, 80), dtype=np.float32)
        b = np.zeros((10, 2, 48, 80), dtype=np.float32)
        with pytest.raises(ConfigError):
            c2st.c2st_score(a, b, tiny_cfg(train_steps=1))

    def test_json_round_trip(self):
        ds = synth_pair(count=30)
        a = ds.stack(split=data.TRAIN, class_label="tips")
        report = c2st.c2st_score(a, ds.subset(class_label="ring"), tiny_cfg(n_splits=2))
        back = c2st.C2STReport.from_dict(__import__("json").loads(report.to_json()))
        assert back.per_split_scores == report.per_split_scores


class TestGeneratorEvaluation:
    def small_gen(self, kind, c=1, seed=0):
        towers = 1 if kind in ("dcgan", "multichannel") else (2 if kind == "separable" else c + 1)
        spec = models.GeneratorSpec(kind, c=c, base_width=16 * towers, latent_dim_per_tower=8)
        torch.manual_seed(seed)
        return models.build_generator(spec)

    def test_separable_single_report(self):
        g = self.small_gen("separable")
        ds = synth_pair(count=20)
        report = c2st.c2st_generator(g, ds.subset(class_label="tips"), tiny_cfg(n_splits=2, train_steps=10))
        assert report.sub_reports is None
        assert len(report.per_split_scores) == 2

    def test_star_c3_has_three_sub_reports(self):
        g = self.small_gen("star", c=3)
        spec = data.SynthSpec(
            recipes=(
                data.ClassRecipe("a", "tips", noise=0.05),
                data.ClassRecipe("b", "ring", noise=0.05),
                data.ClassRecipe("c", "cap", noise=0.05),
            ),
            count=16,
            seed=1,
        )
        ds = data.split_train_test(data.synth_generate(spec), 0.5, seed=1)
        report = c2st.c2st_generator(g, ds, tiny_cfg(n_splits=2, train_steps=10))
        assert report.sub_reports is not None and len(report.sub_reports) == 3
        assert len(report.per_split_scores) == 6

    def test_multichannel_pairs_against_class_sets(self):
        g = self.small_gen("multichannel", c=2)
        rng = np.random.default_rng(0)
        arrays = {
            "a": rng.uniform(-1, 1, (16, 2, 48, 80)).astype(np.float32),
            "b": rng.uniform(-1, 1, (16, 2, 48, 80)).astype(np.float32),
        }
        report = c2st.c2st_generator(g, arrays, tiny_cfg(n_splits=2, train_steps=10))
        assert set(report.sub_reports) == {"a", "b"}

    def test_class_count_mismatch(self):
        g = self.small_gen("star", c=3)
        ds = synth_pair(count=16)  # only two classes
        with pytest.raises(ConfigError):
            c2st.c2st_generator(g, ds, tiny_cfg(train_steps=1))

    def test_pair_index_required_for_multi_output(self):
        g = self.small_gen("star", c=2)
        with pytest.raises(ConfigError):
            c2st.GeneratorSource(g)


class TestRealMatrix:
    def test_two_class_matrix_shape(self):
        ds = synth_pair(count=24)
        classes, med, mad = c2st.c2st_real_matrix(ds, tiny_cfg(n_splits=2, train_steps=10))
        assert classes == ["tips", "ring"]
        assert med.shape == (2, 2) and mad.shape == (2, 2)
        assert np.isfinite(med).all()
