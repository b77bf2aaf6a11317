import numpy as np
import pytest

from d2st.adapter import AdapterConfig
from d2st.adsta import AdstaConfig
from d2st.backbone import (InsertionPolicy, ToyBackbone, assemble, backbone_digest, forward_video,
                           frozen_snapshot, partition_parameters, verify_frozen)
from d2st.errors import ConfigurationError, DimensionError
from d2st.rng import SeededRng
from d2st.tensor import backward, tsum
from d2st.training import Adam, OptimizerConfig

SMALL = dict(stage_count=4, channels=8, frames=4, image_size=8, tokens=4)
CFG = AdapterConfig(0.5, "adsta", AdstaConfig.spatial((2, 4, 4)), AdstaConfig.temporal((4, 2, 2)))


def video(seed, frames=4, size=8):
    return SeededRng(seed).uniform(0.0, 1.0, (frames, size, size, 3))


class TestPolicy:
    @pytest.mark.parametrize("kind, expected", [
        ("early", (1, 2, 3, 4, 5, 6)),
        ("late", (7, 8, 9, 10, 11, 12)),
        ("skip", (1, 3, 5, 7, 9, 11)),
        ("full", tuple(range(1, 13))),
        ("none", ()),
    ])
    def test_twelve_stages(self, kind, expected):
        assert InsertionPolicy(kind).resolve(12) == expected

    def test_custom_and_errors(self):
        assert InsertionPolicy("custom", (4, 2)).resolve(4) == (2, 4)
        with pytest.raises(ConfigurationError):
            InsertionPolicy("custom", (2, 2)).resolve(4)
        with pytest.raises(ConfigurationError):
            InsertionPolicy("custom", (5,)).resolve(4)
        with pytest.raises(ConfigurationError):
            InsertionPolicy("middle").resolve(4)

    def test_full_assembly_has_twelve_adapters(self):
        asm = assemble(ToyBackbone(12, 8, 4, 8, 4), InsertionPolicy("full"), CFG)
        assert sorted(asm.adapters) == list(range(1, 13))


class TestForward:
    @pytest.mark.parametrize("kind", ["early", "late", "skip", "full"])
    def test_identity_at_init_bitwise(self, kind):
        frames = video(0)
        bare = forward_video(assemble(ToyBackbone(**SMALL), InsertionPolicy("none"), CFG), frames).data
        out = forward_video(assemble(ToyBackbone(**SMALL), InsertionPolicy(kind), CFG), frames).data
        assert np.array_equal(out, bare)

    def test_output_shape_and_determinism(self):
        asm = assemble(ToyBackbone(**SMALL), InsertionPolicy("full"), CFG)
        a, b = forward_video(asm, video(1)).data, forward_video(asm, video(1)).data
        assert a.shape == (4, 8)
        assert a.tobytes() == b.tobytes()

    def test_batched_matches_single(self):
        asm = assemble(ToyBackbone(**SMALL), InsertionPolicy("full"), CFG)
        for p in asm.tunable_parameters():
            p.assign(SeededRng(7).normal(p.shape, 0.2))
        batch = np.stack([video(2), video(3)])
        out = forward_video(asm, batch).data
        np.testing.assert_allclose(out[1], forward_video(asm, video(3)).data, atol=1e-12)

    def test_wrong_frame_count(self):
        asm = assemble(ToyBackbone(**SMALL), InsertionPolicy("none"), CFG)
        with pytest.raises(DimensionError):
            forward_video(asm, video(0, frames=5))

    def test_frame_permutation_equivariance_without_temporal_mixing(self):
        cfg = AdapterConfig(0.5, "adsta", AdstaConfig.spatial((2, 4, 4), use_dpe=False, frame_local=True),
                            temporal_path=False)
        asm = assemble(ToyBackbone(**SMALL), InsertionPolicy("full"), cfg)
        for p in asm.tunable_parameters():
            p.assign(SeededRng(4).normal(p.shape, 0.3))
        frames = video(5)
        perm = np.array([2, 0, 3, 1])
        np.testing.assert_allclose(forward_video(asm, frames[perm]).data, forward_video(asm, frames).data[perm],
                                   atol=1e-12)

    def test_temporal_pathway_breaks_equivariance(self):
        asm = assemble(ToyBackbone(**SMALL), InsertionPolicy("full"), CFG)
        for p in asm.tunable_parameters():
            p.assign(SeededRng(4).normal(p.shape, 0.3))
        frames = video(5)
        perm = np.array([2, 0, 3, 1])
        assert not np.allclose(forward_video(asm, frames[perm]).data, forward_video(asm, frames).data[perm])

    def test_image_size_must_tile(self):
        with pytest.raises(ConfigurationError):
            ToyBackbone(4, 8, 4, 10, 4)


class TestPartition:
    def test_no_adapters(self):
        part = partition_parameters(assemble(ToyBackbone(**SMALL), InsertionPolicy("none"), CFG))
        assert part.tunable_count == 0 and part.tunable_percent == 0.0

    def test_disjoint_and_exhaustive(self):
        asm = assemble(ToyBackbone(**SMALL), InsertionPolicy("skip"), CFG)
        part = partition_parameters(asm)
        frozen, tunable = {n for n, _ in part.frozen}, {n for n, _ in part.tunable}
        assert not frozen & tunable
        assert frozen | tunable == {n for n, _ in asm.named_parameters()}
        assert all(n.startswith("adapters.") for n in tunable)
        assert all(n.startswith("backbone.") for n in frozen)

    def test_counts_by_policy(self):
        counts = {k: partition_parameters(assemble(ToyBackbone(**SMALL), InsertionPolicy(k), CFG)).tunable_count
                  for k in ("early", "late", "full")}
        assert counts["full"] >= counts["late"] == counts["early"]
        assert counts["full"] == 2 * counts["early"]

    def test_percentage_identity(self):
        part = partition_parameters(assemble(ToyBackbone(**SMALL), InsertionPolicy("full"), CFG))
        expected = 100.0 * part.tunable_count / (part.tunable_count + part.frozen_count)
        assert abs(part.tunable_percent - expected) < 1e-12


class TestFrozen:
    def test_training_steps_leave_backbone_untouched(self):
        asm = assemble(ToyBackbone(**SMALL), InsertionPolicy("full"), CFG)
        before = frozen_snapshot(asm)
        digest = backbone_digest(asm.backbone)
        opt = Adam(asm.tunable_parameters(), OptimizerConfig(lr=1e-2))
        target = SeededRng(9).normal((4, 8))
        for step in range(5):
            opt.zero_grad()
            backward(tsum((forward_video(asm, video(step)) - target) * (forward_video(asm, video(step)) - target)))
            opt.step()
            assert verify_frozen(asm, before)
        assert backbone_digest(asm.backbone) == digest
        assert any(np.any(p.data) for p in (a.up.weight for a in asm.adapters.values()))

    def test_corruption_detected(self):
        asm = assemble(ToyBackbone(**SMALL), InsertionPolicy("full"), CFG)
        before = frozen_snapshot(asm)
        w = asm.backbone.stages[0].mixer.weight
        w.assign(w.data + np.eye(8) * 1e-12)
        assert not verify_frozen(asm, before)

    def test_backbone_parameters_not_trainable(self):
        bb = ToyBackbone(**SMALL)
        assert all(not p.trainable for p in bb.parameters())

    def test_backbone_reproducible_from_seed(self):
        assert backbone_digest(ToyBackbone(**SMALL)) == backbone_digest(ToyBackbone(**SMALL))
        assert backbone_digest(ToyBackbone(**SMALL)) != backbone_digest(ToyBackbone(**SMALL, seed=1))
