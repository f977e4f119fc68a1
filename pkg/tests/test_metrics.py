import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ptasyn import data, metrics
from ptasyn.errors import ConfigurationError

from conftest import random_slice


@pytest.fixture(scope="module")
def tiny_extractor():
    cfg = metrics.ExtractorConfig(steps=20, volumes_per_class=1,
                                  slices_per_volume=3, num_classes=4)
    return metrics.train_feature_extractor(cfg)


class TestMatrixSqrt:
    def test_identity(self):
        assert np.allclose(metrics.matrix_sqrt_psd(np.eye(5)), np.eye(5), atol=1e-12)

    def test_diagonal(self):
        out = metrics.matrix_sqrt_psd(np.diag([4.0, 9.0]))
        assert np.allclose(out, np.diag([2.0, 3.0]), atol=1e-12)

    def test_reconstruction_up_to_d64(self):
        rng = np.random.default_rng(0)
        for d in (2, 8, 32, 64):
            a = rng.standard_normal((d, d))
            m = a.T @ a
            root = metrics.matrix_sqrt_psd(m)
            err = np.linalg.norm(root @ root - m) / max(1.0, np.linalg.norm(m))
            assert err <= 1e-5

    def test_asymmetric_rejected(self):
        m = np.array([[1.0, 0.5], [0.0, 1.0]])
        with pytest.raises(ValueError, match="asymmetric"):
            metrics.matrix_sqrt_psd(m)

    def test_negative_eigenvalues_clamped(self):
        m = np.diag([1.0, -1e-9])
        out = metrics.matrix_sqrt_psd(m)
        assert np.isfinite(out).all()


class TestFid:
    def test_identity_zero(self):
        rng = np.random.default_rng(1)
        f = metrics.FeatureSet(rng.standard_normal((40, 6)), "e")
        assert metrics.fid(f, f) == pytest.approx(0.0, abs=1e-6)

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        a = metrics.FeatureSet(rng.standard_normal((30, 5)), "e")
        b = metrics.FeatureSet(rng.standard_normal((30, 5)) + 0.7, "e")
        assert metrics.fid(a, b) == pytest.approx(metrics.fid(b, a), abs=1e-6)

    def test_gaussian_analytic_value(self):
        # closed form for equal covariances: |mu_a - mu_b|^2
        rng = np.random.default_rng(3)
        mu = np.array([1.0, -0.5, 0.25, 2.0])
        a = metrics.FeatureSet(rng.standard_normal((10000, 4)), "e")
        b = metrics.FeatureSet(rng.standard_normal((10000, 4)) + mu, "e")
        value = metrics.fid(a, b)
        assert value == pytest.approx(float(mu @ mu), rel=0.05)

    def test_extractor_mismatch_rejected(self):
        rng = np.random.default_rng(4)
        a = metrics.FeatureSet(rng.standard_normal((10, 3)), "e1")
        b = metrics.FeatureSet(rng.standard_normal((10, 3)), "e2")
        with pytest.raises(ValueError, match="extractor"):
            metrics.fid(a, b)

    def test_too_few_samples_rejected(self):
        a = metrics.FeatureSet(np.zeros((1, 3)), "e")
        with pytest.raises(ValueError, match="at least 2"):
            metrics.fid(a, a)


class TestInceptionScore:
    def test_uniform_rows_score_one(self):
        mean, std = metrics.inception_score(np.full((20, 7), 1.0 / 7.0), 4)
        assert mean == pytest.approx(1.0, abs=1e-9)
        assert std == pytest.approx(0.0, abs=1e-9)

    def test_balanced_one_hots_score_k(self):
        mean, _ = metrics.inception_score(np.eye(5), 1)
        assert mean == pytest.approx(5.0, abs=1e-6)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_bounds_property(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 40))
        k = int(rng.integers(2, 10))
        probs = rng.dirichlet(np.ones(k) * rng.uniform(0.2, 3.0), size=n)
        splits = int(rng.integers(1, min(4, n) + 1))
        mean, std = metrics.inception_score(probs, splits)
        assert 1.0 - 1e-6 <= mean <= k + 1e-6
        assert std >= 0.0

    def test_row_sum_validation(self):
        with pytest.raises(ValueError, match="sum to 1"):
            metrics.inception_score(np.full((4, 3), 0.5), 2)

    def test_too_few_rows(self):
        with pytest.raises(ValueError, match="at least"):
            metrics.inception_score(np.full((2, 3), 1 / 3), 4)

    def test_negative_probability_rejected(self):
        probs = np.array([[1.2, -0.2], [0.5, 0.5]])
        with pytest.raises(ValueError, match="non-negative"):
            metrics.inception_score(probs, 1)


class TestMsSsim:
    def test_self_similarity_exactly_one(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(size=(64, 64))
        assert metrics.ms_ssim_arrays(x, x, 1.0) == pytest.approx(1.0, abs=1e-6)

    def test_symmetry(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(size=(48, 48))
        y = rng.uniform(size=(48, 48))
        assert metrics.ms_ssim_arrays(x, y, 1.0) == pytest.approx(
            metrics.ms_ssim_arrays(y, x, 1.0), abs=1e-6)

    def test_anticorrelated_checkerboard_near_zero(self):
        cb = (np.indices((64, 64)).sum(axis=0) % 2).astype(np.float64)
        assert metrics.ms_ssim_arrays(cb, 1.0 - cb, 1.0) < 0.2

    def test_too_small_image_rejected(self):
        x = np.zeros((32, 32))
        with pytest.raises(ValueError, match="scales"):
            metrics.ms_ssim_arrays(x, x, 1.0, scales=3)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            metrics.ms_ssim_arrays(np.zeros((64, 64)), np.zeros((64, 32)), 1.0)

    def test_slice_level_uses_declared_range(self):
        rng = np.random.default_rng(7)
        a = random_slice(rng, size=64, tag=data.RANGE_UNIT)
        b = random_slice(rng, size=64, tag=data.RANGE_UNIT, index=1)
        value_unit = metrics.ms_ssim(a, b)
        a2 = data.convert_range(a, data.RANGE_SIGNED)
        b2 = data.convert_range(b, data.RANGE_SIGNED)
        value_signed = metrics.ms_ssim(a2, b2)
        # declared range doubles with the affine map, so the contrast/luminance
        # constants scale consistently and the scores stay close
        assert value_unit == pytest.approx(value_signed, abs=0.02)

    def test_mixed_range_tags_rejected(self):
        rng = np.random.default_rng(8)
        a = random_slice(rng, size=64, tag=data.RANGE_UNIT)
        b = data.convert_range(random_slice(rng, size=64, tag=data.RANGE_UNIT), data.RANGE_SIGNED)
        with pytest.raises(ValueError, match="ranges differ"):
            metrics.ms_ssim(a, b)

    def test_raw_range_rejected(self):
        s = data.make_slice(np.zeros((64, 64)), data.RANGE_RAW, "T1", "v", 0)
        with pytest.raises(ConfigurationError):
            metrics.ms_ssim(s, s)


class TestFeatureExtraction:
    def test_shape_and_determinism(self, tiny_extractor, tiny_pair):
        hf, _, _ = tiny_pair
        a = metrics.extract_features(tiny_extractor, hf)
        b = metrics.extract_features(tiny_extractor, hf)
        assert a.features.shape == (len(hf), tiny_extractor.cfg.feature_dim)
        assert np.array_equal(a.features, b.features)
        assert a.extractor_id == b.extractor_id

    def test_extractor_id_tracks_weights(self, tiny_extractor, tiny_pair):
        hf, _, _ = tiny_pair
        before = metrics.extract_features(tiny_extractor, hf).extractor_id
        with torch.no_grad():
            next(tiny_extractor.parameters()).add_(0.01)
        after = metrics.extract_features(tiny_extractor, hf).extractor_id
        assert before != after
        with torch.no_grad():
            next(tiny_extractor.parameters()).sub_(0.01)

    def test_recipe_is_deterministic(self):
        cfg = metrics.ExtractorConfig(steps=5, volumes_per_class=1,
                                      slices_per_volume=2, num_classes=3)
        a = metrics.train_feature_extractor(cfg)
        b = metrics.train_feature_extractor(cfg)
        assert a.fingerprint() == b.fingerprint()

    def test_cache_round_trip(self, tmp_path):
        cfg = metrics.ExtractorConfig(steps=5, volumes_per_class=1,
                                      slices_per_volume=2, num_classes=3)
        a = metrics.default_extractor(cache_dir=tmp_path, cfg=cfg)
        files = list(tmp_path.glob("extractor_*.ckpt"))
        assert len(files) == 1
        b = metrics.default_extractor(cache_dir=tmp_path, cfg=cfg)
        assert a.fingerprint() == b.fingerprint()

    def test_class_probabilities_are_distributions(self, tiny_extractor, tiny_pair):
        hf, _, _ = tiny_pair
        probs = metrics.class_probabilities(tiny_extractor, hf)
        assert probs.shape == (len(hf), tiny_extractor.cfg.num_classes)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-5)


class TestEvaluate:
    def test_identical_sets(self, tiny_extractor, tiny_pair):
        hf, _, pairing = tiny_pair
        report = metrics.evaluate(hf, hf, pairing=pairing, extractor=tiny_extractor,
                                  is_splits=2)
        assert report.fid == pytest.approx(0.0, abs=1e-6)
        assert report.msssim_mean == pytest.approx(1.0, abs=1e-6)
        assert report.msssim_mode == "paired"
        assert report.n_generated == len(hf)
        assert report.n_reference == len(hf)

    def test_diversity_mode_on_identical_slices(self, tiny_extractor, tiny_pair):
        hf, _, _ = tiny_pair
        clone = data.SliceDataset(
            slices=[data.make_slice(hf.slices[0].pixels, hf.normalization, "T1", f"v{i}", 0)
                    for i in range(6)],
            field_strength="HF", normalization=hf.normalization, contrast="T1", seed=0)
        report = metrics.evaluate(clone, hf, extractor=tiny_extractor, is_splits=2)
        assert report.msssim_mode == "diversity"
        assert report.msssim_mean == pytest.approx(1.0, abs=1e-6)

    def test_degraded_set_scores_worse_than_reference(self, tiny_extractor, tiny_pair):
        hf, lf, pairing = tiny_pair
        paired = metrics.evaluate(lf, hf, pairing=pairing, extractor=tiny_extractor,
                                  is_splits=2)
        self_paired = metrics.evaluate(hf, hf, pairing=pairing, extractor=tiny_extractor,
                                       is_splits=2)
        assert paired.fid > self_paired.fid
        assert paired.msssim_mean < self_paired.msssim_mean

    def test_missing_pairing_entry_rejected(self, tiny_extractor, tiny_pair):
        hf, lf, _ = tiny_pair
        bogus = [{"lf": {"volume_id": "nope", "slice_index": 0},
                  "hf": {"volume_id": "nope", "slice_index": 0}}]
        with pytest.raises(ConfigurationError, match="pairing"):
            metrics.evaluate(lf, hf, pairing=bogus, extractor=tiny_extractor)

    def test_report_serialization_agrees(self, tiny_extractor, tiny_pair):
        hf, _, _ = tiny_pair
        report = metrics.evaluate(hf, hf, extractor=tiny_extractor, is_splits=2)
        doc = report.to_dict()
        row = dict(zip(report.csv_columns(), report.csv_row()))
        for key, value in row.items():
            assert doc[key] == value
