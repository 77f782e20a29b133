"""Synthetic scene generation, degradation, and dataset format tests."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from evlume.events import EventStream, simulate_events
from evlume.synth import (DegradeConfig, Manifest, SceneConfig, degrade,
                          generate_scene, load_external_sequence, load_frames,
                          load_image, load_sample, make_dataset, save_image)


class TestGenerateScene:
    def test_deterministic_per_seed(self):
        cfg = SceneConfig(seed=5)
        a, ta = generate_scene(cfg)
        b, tb = generate_scene(cfg)
        assert np.array_equal(a, b)
        assert np.array_equal(ta, tb)

    def test_different_seeds_differ(self):
        a, _ = generate_scene(SceneConfig(seed=1))
        b, _ = generate_scene(SceneConfig(seed=2))
        assert not np.array_equal(a, b)

    def test_zero_shapes_static_background_emits_no_events(self):
        frames, ts = generate_scene(SceneConfig(num_shapes=0, texture="flat"))
        stream = simulate_events(frames, ts, threshold=0.2, noise_rate=0.0)
        assert len(stream) == 0

    def test_values_in_unit_interval(self):
        frames, _ = generate_scene(SceneConfig(texture="noise", seed=3))
        assert frames.min() >= 0.0 and frames.max() <= 1.0

    def test_mean_brightness_in_band(self):
        for seed in range(5):
            frames, _ = generate_scene(SceneConfig(seed=seed))
            assert 0.15 <= frames.mean() <= 0.85

    def test_timestamps_follow_fps(self):
        frames, ts = generate_scene(SceneConfig(fps=50.0, frames=5))
        assert np.array_equal(ts, [0, 20_000, 40_000, 60_000, 80_000])

    def test_config_validation(self):
        with pytest.raises(ValueError, match="resolution"):
            SceneConfig(width=16)
        with pytest.raises(ValueError, match="frames"):
            SceneConfig(frames=2)
        with pytest.raises(ValueError, match="texture"):
            SceneConfig(texture="plaid")


class TestDegrade:
    def test_scale_only_arithmetic(self):
        cfg = DegradeConfig(scale=0.25, gamma=1.0, read_noise=0.0, shot_gain=0.0)
        frames = np.full((2, 4, 4, 3), 0.8, dtype=np.float32)
        out = degrade(frames, cfg)
        assert np.allclose(out, 0.2, atol=1e-7)

    def test_identity_settings(self):
        cfg = DegradeConfig(scale=1.0, gamma=1.0, read_noise=0.0, shot_gain=0.0)
        frames = np.random.default_rng(0).random((2, 8, 8, 3)).astype(np.float32)
        assert np.allclose(degrade(frames, cfg), frames, atol=1e-7)

    def test_noise_statistics_match_model(self):
        # over 10^4+ pixels the sample mean/variance must match the
        # gaussian approximation: var = shot_gain * signal + read_noise^2
        cfg = DegradeConfig(scale=0.5, gamma=1.0, read_noise=0.03,
                            shot_gain=0.004, seed=7)
        level = 0.5
        frames = np.full((1, 128, 128, 3), level, dtype=np.float32)
        out = degrade(frames, cfg).astype(np.float64)
        signal = cfg.scale * level
        resid = out - signal
        expected_var = cfg.shot_gain * signal + cfg.read_noise ** 2
        assert abs(resid.mean()) < 3e-3
        assert resid.var() == pytest.approx(expected_var, rel=0.05)

    def test_smaller_scale_darker(self):
        frames, _ = generate_scene(SceneConfig(seed=4))
        dark = degrade(frames, DegradeConfig(scale=0.1, read_noise=0.0, shot_gain=0.0))
        brighter = degrade(frames, DegradeConfig(scale=0.3, read_noise=0.0, shot_gain=0.0))
        assert dark.mean() < brighter.mean()

    def test_deterministic_per_seed(self):
        frames, _ = generate_scene(SceneConfig(seed=4))
        a = degrade(frames, DegradeConfig(seed=9))
        b = degrade(frames, DegradeConfig(seed=9))
        assert np.array_equal(a, b)

    def test_config_validation(self):
        with pytest.raises(ValueError, match="scale"):
            DegradeConfig(scale=0.0)
        with pytest.raises(ValueError, match="gamma"):
            DegradeConfig(gamma=0.5)


class TestImageIo:
    def test_png_round_trip_quantized(self, tmp_path):
        img = np.random.default_rng(1).random((16, 16, 3)).astype(np.float32)
        path = tmp_path / "img.png"
        save_image(path, img)
        loaded = load_image(path)
        assert np.abs(loaded - img).max() <= 0.5 / 255 + 1e-6


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    scenes = [SceneConfig(width=48, height=48, frames=5, seed=i)
              for i in range(3)]
    manifest = make_dataset(scenes, DegradeConfig(), out,
                            event_threshold=0.2, test_fraction=0.34)
    return manifest, out


class TestMakeDataset:

    def test_manifest_lists_all_samples(self, dataset):
        manifest, _ = dataset
        assert len(manifest.samples) == 3
        assert len(manifest.split("train")) == 2
        assert len(manifest.split("test")) == 1

    def test_all_referenced_files_exist_and_parse(self, dataset):
        manifest, out = dataset
        reloaded = Manifest.load(out / "manifest.json")
        for sample in reloaded.samples:
            data = load_sample(reloaded, sample)
            assert data.normal.shape == (5, 48, 48, 3)
            assert data.low.shape == (5, 48, 48, 3)
            assert data.timestamps.shape == (5,)
            assert isinstance(data.events, EventStream)

    def test_moving_scenes_emit_events(self, dataset):
        manifest, _ = dataset
        for sample in manifest.samples:
            data = load_sample(manifest, sample)
            assert len(data.events) > 0

    def test_event_timestamps_within_frame_range(self, dataset):
        manifest, _ = dataset
        for sample in manifest.samples:
            data = load_sample(manifest, sample)
            assert data.events.t.min() >= data.timestamps[0]
            assert data.events.t.max() <= data.timestamps[-1]

    def test_low_light_is_darker(self, dataset):
        manifest, _ = dataset
        data = load_sample(manifest, manifest.samples[0])
        assert data.low.mean() < data.normal.mean()

    def test_manifest_metadata_documents_generation(self, dataset):
        manifest, out = dataset
        payload = json.loads((out / "manifest.json").read_text())
        meta = payload["metadata"]
        assert meta["events_from"] == "low"
        assert meta["noise_model"] == "poisson-gaussian stand-in"
        assert meta["event_threshold"] == 0.2

    def test_byte_identical_reproduction(self, tmp_path):
        scenes = [SceneConfig(width=48, height=48, frames=4, seed=11)]
        make_dataset(scenes, DegradeConfig(seed=1), tmp_path / "a")
        make_dataset(scenes, DegradeConfig(seed=1), tmp_path / "b")
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_events_from_normal_flag(self, tmp_path):
        scenes = [SceneConfig(width=48, height=48, frames=4, seed=2)]
        m_low = make_dataset(scenes, DegradeConfig(), tmp_path / "low_ev")
        m_norm = make_dataset(scenes, DegradeConfig(), tmp_path / "norm_ev",
                              events_from="normal")
        ev_low = load_sample(m_low, m_low.samples[0]).events
        ev_norm = load_sample(m_norm, m_norm.samples[0]).events
        assert len(ev_low) != len(ev_norm)

    def test_empty_scene_list_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="at least one scene"):
            make_dataset([], DegradeConfig(), tmp_path / "x")

    def test_external_sequence_loader(self, dataset):
        manifest, out = dataset
        sample_dir = Path(out) / manifest.samples[0].sample_id
        frames, ts, events = load_external_sequence(sample_dir / "low")
        assert frames.shape == (5, 48, 48, 3)
        assert ts is None and events is None
        loaded = load_frames(sample_dir / "low")
        assert np.array_equal(frames, loaded)
