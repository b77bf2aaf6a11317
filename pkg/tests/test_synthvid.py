import json

import numpy as np
import pytest

from d2st.backbone import InsertionPolicy, ToyBackbone, assemble
from d2st.adapter import AdapterConfig
from d2st.errors import ConfigurationError
from d2st.rng import SeededRng
from d2st.synthvid import (EpisodeSampler, SynthClassSpec, export_episodes, keyframe_order, render_video,
                           sample_episode, spatial_pool, temporal_pool)
from d2st.training import evaluate


def frame_multiset(frames):
    return sorted(f.tobytes() for f in frames)


class TestRender:
    def test_static_noise_free_frames_identical(self):
        clip = render_video(SynthClassSpec("spatial", "square", "static", 0.0), SeededRng(0)).frames
        assert all(np.array_equal(clip[0], f) for f in clip)

    @pytest.mark.parametrize("spec", spatial_pool() + temporal_pool(), ids=repr)
    def test_range_and_shape(self, spec):
        clip = render_video(spec, SeededRng(1)).frames
        assert clip.shape == (8, 32, 32, 3)
        assert clip.min() >= 0.0 and clip.max() <= 1.0

    def test_deterministic(self):
        spec = SynthClassSpec("spatial", "bar", "up", 0.05)
        assert render_video(spec, SeededRng(4)).frames.tobytes() == render_video(spec, SeededRng(4)).frames.tobytes()
        assert render_video(spec, SeededRng(4)).frames.tobytes() != render_video(spec, SeededRng(5)).frames.tobytes()

    @pytest.mark.parametrize("variant", range(5))
    def test_reorder_pair_same_multiset(self, variant):
        a = render_video(SynthClassSpec("temporal", "disk", "reorder-A", 0.0, variant), SeededRng(3)).frames
        b = render_video(SynthClassSpec("temporal", "disk", "reorder-B", 0.0, variant), SeededRng(3)).frames
        assert frame_multiset(a) == frame_multiset(b)
        assert not np.array_equal(a, b)

    def test_temporal_family_shares_frames(self):
        clips = [render_video(s, SeededRng(0)).frames for s in temporal_pool(0.0, range(3))]
        ref = frame_multiset(clips[0])
        assert all(frame_multiset(c) == ref for c in clips[1:])
        assert len({c.tobytes() for c in clips}) == len(clips)

    def test_orders_are_permutations(self):
        for motion in ("left", "right", "reorder-A", "reorder-B"):
            assert sorted(keyframe_order(motion, 3, 8).tolist()) == list(range(8))
        assert keyframe_order("right", 0, 8).tolist() == list(range(8))

    def test_spatial_motion_moves_the_shape(self):
        clip = render_video(SynthClassSpec("spatial", "disk", "right", 0.0), SeededRng(2)).frames
        cols = [np.nonzero(f.max(axis=(0, 2)) > 0.5)[0].mean() for f in clip]
        assert all(b > a for a, b in zip(cols, cols[1:]))

    @pytest.mark.parametrize("kw", [dict(family="audio"), dict(family="spatial", shape_id="star"),
                                    dict(family="spatial", motion_id="spin"),
                                    dict(family="temporal", motion_id="up"),
                                    dict(family="spatial", noise_sigma=-0.1)])
    def test_unknown_ids(self, kw):
        with pytest.raises(ConfigurationError):
            SynthClassSpec(**kw)


class TestEpisodes:
    def test_counts(self):
        ep = sample_episode(spatial_pool(), 5, 1, 5, SeededRng(0))
        assert ep.support.shape[0] == 5 and ep.query.shape[0] == 25
        assert ep.support_labels.tolist() == [0, 1, 2, 3, 4]
        assert len(set(ep.classes)) == 5

    def test_seeds_disjoint(self):
        ep = sample_episode(temporal_pool(), 5, 2, 3, SeededRng(1))
        assert not set(ep.support_seeds) & set(ep.query_seeds)
        assert len(set(ep.support_seeds + ep.query_seeds)) == 25

    def test_pool_too_small(self):
        with pytest.raises(ConfigurationError):
            sample_episode(spatial_pool()[:3], 5, 1, 1, SeededRng(0))

    def test_sampler_determinism(self):
        a, b = EpisodeSampler(temporal_pool(), seed=9), EpisodeSampler(temporal_pool(), seed=9)
        assert a.episode(3).query.tobytes() == b.episode(3).query.tobytes()
        first = next(iter(a))
        assert first.support.tobytes() == a.episode(0).support.tobytes()

    def test_export(self, tmp_path):
        out = export_episodes(EpisodeSampler(spatial_pool(), 3, 1, 2, seed=4, size=16), 2, tmp_path / "eps")
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["way"] == 3 and len(manifest["episodes"]) == 2
        entry = manifest["episodes"][1]
        assert np.load(out / entry["query"]).shape == (6, 8, 16, 16, 3)
        assert entry["query_labels"] == [0, 0, 1, 1, 2, 2]


class TestFamilies:
    def test_order_blind_classifier_is_at_chance(self):
        sampler = EpisodeSampler(temporal_pool(0.05, range(10, 20)), 5, 1, 5, seed=11)
        rng = np.random.default_rng(0)

        def bag_features(clips):
            return clips.mean(axis=1).reshape(len(clips), -1)

        perm = rng.permutation(8)
        probe = sampler.episode(0).query
        assert np.allclose(bag_features(probe), bag_features(probe[:, perm]))

        def predict(ep):
            s, q = bag_features(ep.support), bag_features(ep.query)
            d = ((q[:, None] - s[None]) ** 2).sum(axis=-1)
            return np.argmin(d, axis=1)
        res = evaluate(None, sampler, 500, predictor=predict)
        assert abs(res.accuracy - 0.2) <= 0.03

    def test_spatial_family_is_separable_without_adapters(self):
        model = assemble(ToyBackbone(4, 16, 8, 32, 4), InsertionPolicy("none"), AdapterConfig())
        res = evaluate(model, EpisodeSampler(spatial_pool(0.05), 5, 1, 5, seed=12), 30)
        assert res.accuracy > 0.2 + 2 * res.ci95
