import json
import subprocess
import sys

import numpy as np
import pytest

from d2st import cli
from d2st.checkpoint import MAGIC, load_checkpoint, restore, save_checkpoint
from d2st.config import RunConfig
from d2st.errors import NumericError, SchemaError

TINY = dict(stages=2, channels=8, frames=8, image_size=16, tokens=4, way=3, shot=1, queries=2,
            eval_episodes=4, steps=3, lr=1e-2)


@pytest.fixture
def config_file(tmp_path):
    def write(**kw):
        path = tmp_path / f"cfg_{len(list(tmp_path.glob('cfg_*')))}.json"
        path.write_text(json.dumps({**TINY, **kw}))
        return str(path)
    return write


def run(*argv):
    return cli.main([str(a) for a in argv])


class TestConfig:
    def test_round_trip(self):
        cfg = RunConfig(**TINY)
        assert RunConfig.from_dict(json.loads(cfg.to_json())) == cfg

    def test_unknown_key_rejected(self, config_file, tmp_path):
        assert run("eval", "--config", config_file(colour="red"), "--out", tmp_path / "o") == 1

    def test_wrong_type_rejected(self):
        with pytest.raises(SchemaError):
            RunConfig.from_dict({"stages": "four"})

    def test_invalid_kernel_rejected(self, config_file, tmp_path):
        assert run("train", "--config", config_file(spatial_kernel=[8, 2, 2]), "--out", tmp_path / "o") == 1

    def test_env_out_dir(self, monkeypatch, tmp_path):
        monkeypatch.setenv("D2ST_OUT_DIR", str(tmp_path / "env"))
        assert RunConfig().resolve_out_dir() == tmp_path / "env"
        assert RunConfig(out_dir=str(tmp_path / "x")).resolve_out_dir() == tmp_path / "x"
        monkeypatch.delenv("D2ST_OUT_DIR")
        assert str(RunConfig().resolve_out_dir()) == "runs"


class TestTrainEval:
    def test_train_twice_bitwise(self, config_file, tmp_path):
        cfg = config_file()
        assert run("train", "--config", cfg, "--out", tmp_path / "a") == 0
        assert run("train", "--config", cfg, "--out", tmp_path / "b") == 0
        a, b = (tmp_path / d / "checkpoint.d2st" for d in "ab")
        assert a.read_bytes().startswith(MAGIC)
        assert a.read_bytes() == b.read_bytes()
        assert (tmp_path / "a" / "loss_trace.csv").read_text() == (tmp_path / "b" / "loss_trace.csv").read_text()
        rec = json.loads((tmp_path / "a" / "train_record.json").read_text())
        assert rec["frozen_unchanged"] and rec["steps"] == 3
        assert len(rec["code_digest"]) == 64 and "out_dir" not in rec["config"]

    def test_eval_twice_identical(self, config_file, tmp_path):
        cfg = config_file()
        run("train", "--config", cfg, "--out", tmp_path / "t")
        ckpt = tmp_path / "t" / "checkpoint.d2st"
        for d in "ab":
            assert run("eval", "--config", cfg, "--checkpoint", ckpt, "--out", tmp_path / d) == 0
        ra, rb = ((tmp_path / d / "eval_record.json").read_text() for d in "ab")
        assert ra == rb
        assert json.loads(ra)["episode_count"] == 4

    def test_steps_zero_checkpoint_is_initialization(self, config_file, tmp_path):
        cfg = config_file(steps=0)
        assert run("train", "--config", cfg, "--out", tmp_path / "z") == 0
        model = RunConfig.load(cfg).build_model()
        ckpt = load_checkpoint(tmp_path / "z" / "checkpoint.d2st")
        init = dict(model.named_parameters())
        assert ckpt.tensors and all(np.array_equal(v, init[k].data) for k, v in ckpt.tensors.items())
        assert ckpt.header["backbone_digest"] == json.loads(
            (tmp_path / "z" / "train_record.json").read_text())["backbone_digest"]

    def test_identity_init_matches_bare_backbone(self, config_file, tmp_path):
        assert run("eval", "--config", config_file(), "--out", tmp_path / "a") == 0
        assert run("eval", "--config", config_file(policy="none"), "--out", tmp_path / "b") == 0
        acc = [json.loads((tmp_path / d / "eval_record.json").read_text())["accuracy"] for d in "ab"]
        assert acc[0] == acc[1]

    def test_single_episode_degenerate(self, config_file, tmp_path):
        assert run("eval", "--config", config_file(), "--episodes", 1, "--out", tmp_path / "e") == 0
        rec = json.loads((tmp_path / "e" / "eval_record.json").read_text())
        assert rec["degenerate"] and rec["ci95"] == 0.0

    def test_worker_count_does_not_change_record(self, config_file, tmp_path):
        cfg = config_file()
        run("eval", "--config", cfg, "--out", tmp_path / "a")
        run("eval", "--config", cfg, "--workers", 2, "--out", tmp_path / "b")
        rec = [json.loads((tmp_path / d / "eval_record.json").read_text()) for d in "ab"]
        assert rec[0]["accuracy"] == rec[1]["accuracy"]

    def test_checkpoint_config_mismatch(self, config_file, tmp_path):
        run("train", "--config", config_file(), "--out", tmp_path / "t")
        ckpt = tmp_path / "t" / "checkpoint.d2st"
        assert run("eval", "--config", config_file(bottleneck_ratio=0.5), "--checkpoint", ckpt,
                   "--out", tmp_path / "e") == 1
        assert run("eval", "--config", config_file(backbone_seed=3), "--checkpoint", ckpt,
                   "--out", tmp_path / "e") == 1

    def test_numeric_failure_exit_code(self, monkeypatch, tmp_path):
        def boom(cfg):
            raise NumericError("non-finite loss nan at step 0")
        monkeypatch.setattr(cli, "cmd_train", boom)
        assert run("train", "--out", tmp_path) == 2

    def test_missing_checkpoint(self, config_file, tmp_path):
        assert run("eval", "--config", config_file(), "--checkpoint", tmp_path / "nope", "--out", tmp_path) == 1


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = RunConfig(**TINY)
        model = cfg.build_model()
        for p in model.tunable_parameters():
            p.assign(np.random.default_rng(p.size).normal(size=p.shape))
        path = save_checkpoint(tmp_path / "c.d2st", model, cli.recorded_config(cfg))
        fresh = cfg.build_model()
        restore(fresh, load_checkpoint(path), cli.recorded_config(cfg))
        for (n, a), (_, b) in zip(model.named_parameters(), fresh.named_parameters()):
            assert np.array_equal(a.data, b.data), n

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "junk").write_bytes(b"hello")
        with pytest.raises(SchemaError):
            load_checkpoint(tmp_path / "junk")

    def test_truncated(self, tmp_path):
        cfg = RunConfig(**TINY)
        path = save_checkpoint(tmp_path / "c.d2st", cfg.build_model(), cli.recorded_config(cfg))
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(SchemaError):
            load_checkpoint(path)

    def test_layout_mismatch(self, tmp_path):
        cfg = RunConfig(**TINY)
        path = save_checkpoint(tmp_path / "c.d2st", cfg.build_model(), cli.recorded_config(cfg))
        other = cfg.replace(policy="early").build_model()
        with pytest.raises(SchemaError):
            restore(other, load_checkpoint(path))


class TestOtherCommands:
    def test_gradcheck(self, tmp_path):
        assert run("gradcheck", "--out", tmp_path) == 0
        table = (tmp_path / "gradcheck.csv").read_text()
        assert "matmul" in table and "dwconv3d" in table

    def test_bench(self, config_file, tmp_path):
        assert run("bench", "--config", config_file(), "--repeats", 1, "--out", tmp_path) == 0
        summary = json.loads((tmp_path / "bench_summary.json").read_text())
        assert summary["dense_equivalence_max_abs_error"] < 1e-8
        assert (tmp_path / "bench.csv").read_text().startswith("shape,")

    def test_viz(self, config_file, tmp_path):
        cfg = config_file()
        assert run("viz", "--config", cfg, "--topk", 5, "--out", tmp_path / "v") == 0
        summary = json.loads((tmp_path / "v" / "viz_summary.json").read_text())
        assert all(abs(v - summary["token_count"]) < 1e-4 for v in summary["importance_totals"].values())
        lines = (tmp_path / "v" / "points.csv").read_text().splitlines()
        assert len(lines) == 1 + 2 * 2 * 5

    def test_viz_from_file(self, config_file, tmp_path):
        clip = np.random.default_rng(0).random((8, 16, 16, 3))
        np.save(tmp_path / "clip.npy", clip)
        assert run("viz", "--config", config_file(), "--input", tmp_path / "clip.npy", "--out", tmp_path) == 0
        bad = tmp_path / "bad.npy"
        np.save(bad, clip[:4])
        assert run("viz", "--config", config_file(), "--input", bad, "--out", tmp_path) == 1

    def test_gen_data(self, config_file, tmp_path):
        assert run("gen-data", "--config", config_file(), "--episodes", 2, "--out", tmp_path) == 0
        manifest = json.loads((tmp_path / "episodes" / "manifest.json").read_text())
        assert len(manifest["episodes"]) == 2

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "d2st", "--version"], capture_output=True, text=True)
        assert proc.returncode == 0 and "d2st" in proc.stdout

    def test_unknown_command(self):
        with pytest.raises(SystemExit):
            cli.main(["fly"])
