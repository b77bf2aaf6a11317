"""Command-line entry point: ``d2st {train,eval,gradcheck,bench,viz,gen-data}``.

Exit codes: 0 success, 1 validation failure (bad configuration, schema or
contract violation, failed gradient check), 2 numeric failure.

Each command writes into ``--out`` (or ``$D2ST_OUT_DIR``, else ``./runs``).
Records are JSON with sorted keys and embed the resolved configuration and a
digest of the package source.  Wall-clock timings go to separate
``*_timing.json`` files so that records of identical runs are byte-identical.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .backbone import backbone_digest, frozen_snapshot, partition_parameters, verify_frozen
from .bench import dense_equivalence_error, parameter_table, rows_to_csv, run_bench
from .checkpoint import load_checkpoint, restore, save_checkpoint
from .config import RunConfig
from .errors import ContractError, D2STError, NumericError
from .gradcheck import run_gradcheck
from .rng import SeededRng
from .synthvid import export_episodes, render_video
from .training import OptimizerConfig, evaluate, train_episodes
from .viz import export_points, records_to_csv

log = logging.getLogger("d2st")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


def code_digest() -> str:
    """SHA-256 over the package's Python sources, in file-name order."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def recorded_config(cfg: RunConfig) -> dict:
    """The configuration as embedded in artifacts (the output location is not
    part of a run's identity)."""
    d = cfg.to_dict()
    d.pop("out_dir")
    return d


def _write_json(path: Path, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return path


def _model_from(cfg: RunConfig, checkpoint: str | None):
    model = cfg.build_model()
    if checkpoint:
        restore(model, load_checkpoint(checkpoint), recorded_config(cfg))
    return model


# -- commands --------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> dict:
    out = cfg.resolve_out_dir()
    model = cfg.build_model()
    before = frozen_snapshot(model)
    start = time.perf_counter()
    result = train_episodes(model, iter(cfg.sampler("train")),
                            OptimizerConfig(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps), cfg.steps,
                            cfg.metric, cfg.temperature,
                            on_step=lambda s, v: log.info("step %d loss %.6f", s, v))
    seconds = time.perf_counter() - start
    if not verify_frozen(model, before):
        raise ContractError("a frozen backbone parameter changed during training")
    config = recorded_config(cfg)
    ckpt = save_checkpoint(out / "checkpoint.d2st", model, config, {"steps": cfg.steps})
    (out / "loss_trace.csv").write_text(
        "step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(result.losses)))
    part = partition_parameters(model)
    record = {"command": "train", "config": config, "code_digest": code_digest(),
              "backbone_digest": backbone_digest(model.backbone), "steps": cfg.steps,
              "final_loss": result.losses[-1] if result.losses else None,
              "tunable_params": part.tunable_count, "frozen_params": part.frozen_count,
              "tunable_percent": part.tunable_percent, "frozen_unchanged": True,
              "checkpoint_sha256": hashlib.sha256(ckpt.read_bytes()).hexdigest()}
    _write_json(out / "train_record.json", record)
    _write_json(out / "train_timing.json", {"seconds": seconds})
    return record


def cmd_eval(cfg: RunConfig, checkpoint: str | None = None) -> dict:
    out = cfg.resolve_out_dir()
    model = _model_from(cfg, checkpoint)
    start = time.perf_counter()
    res = evaluate(model, cfg.sampler("eval"), cfg.eval_episodes, cfg.metric, cfg.temperature,
                   workers=cfg.workers)
    seconds = time.perf_counter() - start
    record = {"command": "eval", "config": recorded_config(cfg), "code_digest": code_digest(),
              "checkpoint_sha256": hashlib.sha256(Path(checkpoint).read_bytes()).hexdigest()
              if checkpoint else None,
              "accuracy": res.accuracy, "ci95": res.ci95, "episode_count": res.episode_count,
              "degenerate": res.degenerate}
    _write_json(out / "eval_record.json", record)
    _write_json(out / "eval_timing.json", {"seconds": seconds, "workers": cfg.workers})
    return record


def cmd_gradcheck(cfg: RunConfig) -> dict:
    out = cfg.resolve_out_dir()
    report = run_gradcheck(seed=cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    (out / "gradcheck.csv").write_text(report.table() + "\n")
    print(report.table())
    print(f"gradcheck {'passed' if report.ok else 'FAILED'} in {report.seconds:.1f} s")
    return {"ok": report.ok, "seconds": report.seconds, "rows": report.rows, "missing": report.missing}


def cmd_bench(cfg: RunConfig, repeats: int = 10) -> dict:
    out = cfg.resolve_out_dir()
    channels = cfg.adapter_config().bottleneck(cfg.channels)
    rows = run_bench(channels=channels, repeats=repeats, seed=cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.csv").write_text(rows_to_csv(rows) + "\n")
    summary = {"config": recorded_config(cfg), "bottleneck_channels": channels,
               "dense_equivalence_max_abs_error": dense_equivalence_error(seed=cfg.seed),
               "adapter_params": parameter_table(cfg.channels)}
    _write_json(out / "bench_summary.json", summary)
    print(rows_to_csv(rows))
    return {"rows": rows, **summary}


def cmd_viz(cfg: RunConfig, checkpoint: str | None = None, input_video: str | None = None,
            topk: int = 50) -> dict:
    out = cfg.resolve_out_dir()
    model = _model_from(cfg, checkpoint)
    if input_video:
        frames = np.load(input_video)
    else:
        spec = cfg.class_pool("eval")[0]
        frames = render_video(spec, SeededRng(cfg.viz_seed()), 0, cfg.frames, cfg.image_size).frames
    records, totals = export_points(model, frames, topk)
    out.mkdir(parents=True, exist_ok=True)
    (out / "points.csv").write_text(records_to_csv(records))
    summary = {"config": recorded_config(cfg), "topk": topk,
               "importance_totals": {f"{s}:{p}": v for (s, p), v in totals.items()},
               "token_count": int(np.prod(model.backbone.feature_shape))}
    _write_json(out / "viz_summary.json", summary)
    return {"records": records, **summary}


def cmd_gen_data(cfg: RunConfig, count: int | None = None) -> dict:
    out = cfg.resolve_out_dir() / "episodes"
    n = count if count is not None else cfg.eval_episodes
    export_episodes(cfg.sampler("eval"), n, out)
    return {"dir": str(out), "episodes": n}


# -- argument handling -----------------------------------------------------

COMMANDS = ("train", "eval", "gradcheck", "bench", "viz", "gen-data")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="d2st", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    p.add_argument("--episodes", type=int, help="evaluation / export episode count")
    p.add_argument("--steps", type=int, help="training steps")
    p.add_argument("--metric", choices=("bimhm", "otam"))
    p.add_argument("--out", help="output directory")
    p.add_argument("--checkpoint", help="adapters-only checkpoint to load")
    p.add_argument("--topk", type=int, default=50, help="points kept per pathway by viz")
    p.add_argument("--input", help="viz input clip as a .npy array (T, H, W, 3)")
    p.add_argument("--workers", type=int, help="evaluation threads")
    p.add_argument("--repeats", type=int, default=10, help="bench timing repeats")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {"seed": args.seed, "eval_episodes": args.episodes, "steps": args.steps,
                 "metric": args.metric, "out_dir": args.out, "workers": args.workers}
    cfg = cfg.replace(**{k: v for k, v in overrides.items() if v is not None})
    if not 0 <= cfg.seed < 2 ** 64:
        raise D2STError("seed must be an unsigned 64-bit integer")
    return cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "train":
            rec = cmd_train(cfg)
            print(f"trained {rec['steps']} steps, final loss {rec['final_loss']}")
        elif args.command == "eval":
            rec = cmd_eval(cfg, args.checkpoint)
            print(f"accuracy {100 * rec['accuracy']:.2f} +- {100 * rec['ci95']:.2f} "
                  f"over {rec['episode_count']} episodes")
        elif args.command == "gradcheck":
            if not cmd_gradcheck(cfg)["ok"]:
                return EXIT_INVALID
        elif args.command == "bench":
            cmd_bench(cfg, args.repeats)
        elif args.command == "viz":
            rec = cmd_viz(cfg, args.checkpoint, args.input, args.topk)
            print(f"exported {len(rec['records'])} points")
        elif args.command == "gen-data":
            rec = cmd_gen_data(cfg, args.episodes)
            print(f"wrote {rec['episodes']} episodes to {rec['dir']}")
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (D2STError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
