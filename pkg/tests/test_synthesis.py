import dataclasses
import hashlib

import numpy as np
import pytest

from rainrobust import metrics as M
from rainrobust.synthesis import (
    DatasetFormatError,
    PairedSample,
    RainParams,
    SceneParams,
    apply_rain,
    calibrate_rain,
    corpus_mean_psnr,
    load_dataset,
    make_dataset,
    rain_coverage,
    read_manifest,
    save_dataset,
    synth_rain_layer,
    synth_scene,
)


class TestSynthScene:
    def test_deterministic_given_seed(self):
        params = SceneParams(height=32, width=32, num_classes=5, shapes_per_image=3, seed=7)
        img1, lab1 = synth_scene(params)
        img2, lab2 = synth_scene(params)
        assert np.array_equal(img1, img2) and np.array_equal(lab1, lab2)

    def test_zero_shapes_is_all_background(self):
        img, lab = synth_scene(SceneParams(height=32, width=32, shapes_per_image=0, seed=1))
        assert (lab == 0).all()
        assert img.min() >= 0 and img.max() <= 1

    def test_three_shapes_give_at_most_four_label_ids(self):
        img, lab = synth_scene(SceneParams(height=64, width=64, num_classes=5, shapes_per_image=3, seed=3))
        assert len(np.unique(lab)) <= 4

    def test_rejects_bad_dimensions(self):
        with pytest.raises(ValueError, match="divisible by 8"):
            synth_scene(SceneParams(height=30, width=32))
        with pytest.raises(ValueError, match="divisible by 8"):
            synth_scene(SceneParams(height=32, width=12))

    def test_label_ids_in_range(self):
        _, lab = synth_scene(SceneParams(height=32, width=32, num_classes=4, shapes_per_image=8, seed=5))
        assert lab.max() < 4


class TestRainLayer:
    def test_zero_density_is_zero(self):
        r = synth_rain_layer(32, 32, RainParams(density=0.0, seed=0))
        assert not r.any()

    def test_zero_intensity_is_zero(self):
        r = synth_rain_layer(32, 32, RainParams(intensity=0.0, seed=0))
        assert not r.any()

    def test_bounds_and_channel_broadcast(self):
        p = RainParams(seed=2)
        r = synth_rain_layer(48, 48, p)
        assert r.shape == (48, 48, 3)
        assert r.min() >= 0 and r.max() <= p.intensity + 1e-7
        assert np.array_equal(r[..., 0], r[..., 1]) and np.array_equal(r[..., 0], r[..., 2])

    def test_sparsity_within_streak_dilation_bound(self):
        p = RainParams(seed=3)
        frac = rain_coverage(synth_rain_layer(64, 64, p))
        assert p.density / 2 <= frac <= min(1.0, p.density * p.streak_length * 3)

    def test_default_calibration_hits_target_severity(self):
        scene = SceneParams(seed=11)
        rain = RainParams(seed=11)
        mean_psnr = corpus_mean_psnr(make_dataset(scene, rain, 48))
        assert abs(mean_psnr - 17.45) <= 1.5

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            synth_rain_layer(32, 32, RainParams(density=1.5))
        with pytest.raises(ValueError):
            synth_rain_layer(32, 32, RainParams(angle_low=90, angle_high=10))
        with pytest.raises(ValueError):
            synth_rain_layer(32, 32, RainParams(streak_length=0))


class TestApplyRain:
    def test_zero_rain_is_identity(self):
        clean = np.random.default_rng(0).random((8, 8, 3)).astype(np.float32)
        assert np.array_equal(apply_rain(clean, np.zeros_like(clean)), clean)

    def test_clips_at_upper_box(self):
        clean = np.ones((4, 4, 3), np.float32)
        rain = np.full_like(clean, 0.3)
        assert (apply_rain(clean, rain) == 1.0).all()

    def test_elementwise_sum(self):
        clean = np.full((4, 4, 3), 0.5, np.float32)
        rain = np.full_like(clean, 0.3)
        assert np.allclose(apply_rain(clean, rain), 0.8)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            apply_rain(np.zeros((4, 4, 3)), np.zeros((5, 5, 3)))


class TestMakeDataset:
    def test_deterministic(self):
        scene, rain = SceneParams(height=32, width=32, seed=4), RainParams(seed=4)
        a = make_dataset(scene, rain, 2)
        b = make_dataset(scene, rain, 2)
        for s, t in zip(a, b):
            assert np.array_equal(s.rainy, t.rainy) and np.array_equal(s.labels, t.labels)

    def test_invariants_hold_on_sweep(self):
        scene = SceneParams(height=32, width=32, num_classes=5, seed=21)
        samples = make_dataset(scene, RainParams(seed=21), 100)
        for s in samples:
            s.validate(num_classes=scene.num_classes)

    def test_disjoint_base_seeds_share_no_images(self):
        scene, rain = SceneParams(height=32, width=32, seed=0), RainParams(seed=0)
        a = make_dataset(scene, rain, 20)
        scene2 = dataclasses.replace(scene, seed=1000)
        rain2 = dataclasses.replace(rain, seed=1000)
        b = make_dataset(scene2, rain2, 20)
        digest = lambda s: hashlib.sha256(s.rainy.tobytes()).hexdigest()
        assert not ({digest(s) for s in a} & {digest(s) for s in b})

    def test_rejects_nonpositive_count(self):
        with pytest.raises(ValueError):
            make_dataset(SceneParams(), RainParams(), 0)


class TestDatasetIO:
    def test_round_trip_within_quantization(self, tmp_path, tiny_corpus, tiny_scene, tiny_rain):
        save_dataset(tmp_path, tiny_corpus[:4], tiny_scene, tiny_rain)
        loaded = load_dataset(tmp_path)
        assert len(loaded) == 4
        for orig, back in zip(tiny_corpus, loaded):
            for f in ("clean", "rainy", "rain"):
                assert np.abs(getattr(orig, f) - getattr(back, f)).max() <= 1.0 / 255.0 + 1e-7
            assert np.array_equal(orig.labels, back.labels)

    def test_manifest_records_params(self, tmp_path, tiny_corpus, tiny_scene, tiny_rain):
        save_dataset(tmp_path, tiny_corpus[:2], tiny_scene, tiny_rain)
        manifest = read_manifest(tmp_path)
        assert manifest["count"] == "2"
        assert manifest["scene.num_classes"] == str(tiny_scene.num_classes)
        assert manifest["rain.streak_length"] == str(tiny_rain.streak_length)

    def test_empty_dir_reports_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetFormatError, match="missing manifest"):
            load_dataset(tmp_path)

    def test_count_mismatch_names_missing_file(self, tmp_path, tiny_corpus, tiny_scene, tiny_rain):
        save_dataset(tmp_path, tiny_corpus[:3], tiny_scene, tiny_rain)
        victim = tmp_path / "rainy_00002.png"
        victim.unlink()
        with pytest.raises(DatasetFormatError, match="rainy_00002"):
            load_dataset(tmp_path)

    def test_corrupt_raster_names_offending_path(self, tmp_path, tiny_corpus):
        save_dataset(tmp_path, tiny_corpus[:2])
        victim = tmp_path / "clean_00001.png"
        victim.write_bytes(b"not a png")
        with pytest.raises(DatasetFormatError, match="clean_00001"):
            load_dataset(tmp_path)


class TestPairedSampleValidation:
    def test_detects_broken_additive_identity(self, tiny_corpus):
        s = tiny_corpus[0]
        broken = PairedSample(clean=s.clean, rainy=np.clip(s.rainy + 0.2, 0, 1), rain=s.rain, labels=s.labels)
        with pytest.raises(ValueError, match="clip"):
            broken.validate()

    def test_detects_negative_rain(self, tiny_corpus):
        s = tiny_corpus[0]
        broken = PairedSample(clean=s.clean, rainy=s.rainy, rain=s.rain - 0.5, labels=s.labels)
        with pytest.raises(ValueError, match="negative"):
            broken.validate()


def test_calibration_moves_toward_target():
    scene = SceneParams(height=32, width=32, seed=5)
    start = RainParams(intensity=0.95, seed=5)
    calibrated, achieved = calibrate_rain(scene, start, target_psnr=19.0, n=12, tol=0.3)
    assert abs(achieved - 19.0) <= 0.5
    assert calibrated.intensity < start.intensity
