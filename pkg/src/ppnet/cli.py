"""Command-line entry point: ``ppnet <command> ...``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric abort.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import FLAT_KEYS, TrainConfig, profile
from .data import (SequenceSet, frame_variation, gen_moving_shapes, load_dataset, read_frames,
                   write_frame_dir)
from .exceptions import ConfigError, DivergenceError, PPNetError
from .metrics import evaluate_rollout
from .network import ABSENT, HOLDS, PREDICTS, schedule_counts, schedule_trace
from .train import (evaluate_next_frame, load_checkpoint, model_from_checkpoint, sweep_p,
                    sweep_seq_len, train)

logger = logging.getLogger("ppnet")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
TRACE_SYMBOLS = {PREDICTS: "P", HOLDS: "H", ABSENT: "·"}


class UsageError(PPNetError):
    pass


def _limit_threads():
    return threadpool_limits(max(1, int(os.environ.get("PPNET_THREADS", "1"))))


def load_config(path) -> TrainConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a flat JSON object")
    return TrainConfig.from_flat(raw)


def write_manifest(out_dir, command, argv, config=None, seed=None, artifacts=None, extra=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": None if config is None else json.loads(config.canonical_json()),
        "seed": seed,
        "artifacts": {k: str(v) for k, v in (artifacts or {}).items()},
        "version": __version__,
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def synthetic_data(config: TrainConfig, count=None, seq_len=None, seed=None) -> SequenceSet:
    d = config.data
    return gen_moving_shapes(
        d.seed if seed is None else seed,
        d.count + d.heldout if count is None else count,
        d.seq_len if seq_len is None else seq_len,
        config.net.input_size,
        num_shapes=d.num_shapes,
        speed_range=(d.speed_min, d.speed_max),
        shape_size=(d.shape_min, d.shape_max),
        channels=config.net.input_channels,
    )


def _dataset(config: TrainConfig, source: str):
    if source == "synthetic":
        data = synthetic_data(config)
    else:
        d = config.data
        data = load_dataset(source, d.center_crop, config.net.input_size, d.stride, d.seq_len)
        if data.frame_shape[0] != config.net.input_channels:
            raise ConfigError(f"data has {data.frame_shape[0]} channels, config says {config.net.input_channels}")
    n_train = len(data) - config.data.heldout
    if n_train < 1:
        raise ConfigError(f"only {len(data)} sequences available, {config.data.heldout} requested for held-out")
    return data.split(n_train)


# ---------------------------------------------------------------------------
# commands


def cmd_config(args):
    cfg = profile(args.profile)
    text = json.dumps(cfg.to_flat(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_train(args):
    config = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, heldout = _dataset(config, args.data)
    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt_path = out / "checkpoint.ppnc"
    log_path = out / "train_log.csv"
    artifacts = {"checkpoint": ckpt_path, "log": log_path}
    try:
        ckpt, log = train(config, train_set, resume=resume, checkpoint_path=ckpt_path)
    except DivergenceError as exc:
        write_manifest(out, "train", args.argv, config, config.seed, artifacts,
                       {"data": args.data, "status": "diverged", "error": str(exc)})
        raise
    log_path.write_text(log.to_csv())
    extra = {"data": args.data, "status": "ok", "data_meta": train_set.meta}
    if len(heldout):
        scores = evaluate_next_frame(model_from_checkpoint(ckpt), heldout)
        extra["heldout"] = scores
        print(f"held-out next-frame ssim {scores['ssim']:.4f}  mean error {scores['mean_error']:.6g}")
    write_manifest(out, "train", args.argv, config, config.seed, artifacts, extra)
    print(f"trained {ckpt.step} steps, final loss {log.rows[-1].loss:.6g}; checkpoint {ckpt_path}")
    return EXIT_OK


def _read_video(path, config: TrainConfig) -> np.ndarray:
    frames = read_frames(path)
    net = config.net
    if frames.shape[1] != net.input_channels:
        raise ConfigError(f"{path}: frames have {frames.shape[1]} channels, network expects {net.input_channels}")
    if tuple(frames.shape[2:]) != net.input_size:
        frames = read_frames(path, resize=net.input_size)
    return frames


def cmd_predict(args):
    ckpt = load_checkpoint(args.ckpt)
    if args.horizon < 1:
        raise UsageError("--horizon must be >= 1")
    context = _read_video(args.context, ckpt.config)
    if len(context) < 2:
        raise UsageError("context needs at least two frames")
    model = model_from_checkpoint(ckpt)
    pred = model.rollout(context[:, None], args.horizon)[:, 0]
    paths = write_frame_dir(args.out, pred)
    write_manifest(args.out, "predict", args.argv, ckpt.config, ckpt.config.seed,
                   {"checkpoint": args.ckpt, "context": args.context, "frames": args.out},
                   {"horizon": args.horizon, "context_frames": len(context), "outputs": len(paths)})
    print(f"wrote {len(paths)} frames to {args.out}")
    return EXIT_OK


def cmd_eval(args):
    pred = read_frames(args.pred)
    truth = read_frames(args.truth)
    if len(pred) != len(truth):
        raise UsageError(f"frame count mismatch: {len(pred)} predicted vs {len(truth)} ground truth")
    if pred.shape != truth.shape:
        raise UsageError(f"frame shape mismatch: {pred.shape[1:]} vs {truth.shape[1:]}")
    windows = [int(w) for w in args.windows.split(",") if w.strip()]
    report = evaluate_rollout(pred, truth, windows)
    sys.stdout.write(report.to_csv())
    sys.stdout.write(report.windows_csv())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.csv").write_text(report.to_csv())
        (out / "eval_windows.csv").write_text(report.windows_csv())
        write_manifest(out, "eval", args.argv, artifacts={"per_step": out / "eval.csv",
                                                          "windows": out / "eval_windows.csv"},
                       extra={"pred": args.pred, "truth": args.truth, "windows": windows})
    return EXIT_OK


def format_trace(table, num_layers: int, steps: int) -> str:
    """Text activity table: one row per layer (top first), one column per step."""
    counts = schedule_counts(table, num_layers)
    width = len(str(steps - 1))
    lines = ["t".ljust(4) + " ".join(str(t).rjust(width) for t in range(steps)) + "  updates"]
    for l in reversed(range(num_layers)):
        cells = " ".join(TRACE_SYMBOLS[table[(t, l)]].rjust(width) for t in range(steps))
        lines.append(f"l{l}".ljust(4) + cells + f"  {counts[l]}")
    return "\n".join(lines) + "\n"


def cmd_trace(args):
    table = schedule_trace(args.layers, args.steps, args.schedule)
    text = format_trace(table, args.layers, args.steps)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "trace.txt").write_text(text)
        rows = [(t, l, TRACE_SYMBOLS[table[(t, l)]]) for t in range(args.steps) for l in range(args.layers)]
        _write_csv(out / "trace.csv", ["t", "layer", "state"], rows)
        counts = schedule_counts(table, args.layers)
        _write_csv(out / "updates.csv", ["layer", "updates"], list(enumerate(counts)))
        write_manifest(out, "trace", args.argv,
                       artifacts={"text": out / "trace.txt", "table": out / "trace.csv",
                                  "updates": out / "updates.csv"},
                       extra={"layers": args.layers, "steps": args.steps, "schedule": args.schedule})
    return EXIT_OK


def cmd_variation(args):
    frames = read_frames(args.seq)
    if len(frames) < 2:
        raise UsageError("need at least two frames")
    pos, neg = frame_variation(frames)
    out = Path(args.out)
    write_frame_dir(out / "positive", pos)
    write_frame_dir(out / "negative", neg)
    write_manifest(out, "variation", args.argv,
                   artifacts={"positive": out / "positive", "negative": out / "negative"},
                   extra={"seq": args.seq, "pairs": len(pos)})
    print(f"wrote {len(pos)} positive/negative variation pairs to {out}")
    return EXIT_OK


def cmd_sweep(args):
    config = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "p":
        train_set, heldout = _dataset(config, "synthetic")
        values = [float(v) for v in args.p_values.split(",")]
        rows = sweep_p(config, train_set, heldout, values, include_baseline=True)
        header = ["p", "mean_error", "ssim", "final_loss", "baseline"]
        path = out / "sweep_p.csv"
    else:
        lengths = [int(v) for v in args.lengths.split(",")]
        longest = max(lengths)
        budget = config.data.count * config.data.seq_len
        long_set = synthetic_data(config, count=max(1, budget // longest), seq_len=longest)
        heldout = synthetic_data(config, count=max(1, config.data.heldout), seq_len=longest,
                                 seed=config.data.seed + 1)
        rows = sweep_seq_len(config, long_set, heldout, lengths)
        header = ["T", "epoch_time_s", "ssim", "mean_error", "sequences"]
        path = out / "sweep_seqlen.csv"
    _write_csv(path, header, [[r[h] for h in header] for r in rows])
    sys.stdout.write(path.read_text())
    write_manifest(out, "sweep", args.argv, config, config.seed, {"table": path}, {"kind": args.kind})
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ppnet", description="Pyramidal predictive network for video frames.")
    parser.add_argument("--version", action="version", version=f"ppnet {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("config", help="print a complete config for a named profile")
    p.add_argument("--profile", default="desk", choices=["desk", "full"])
    p.add_argument("--out", help="write to this file instead of stdout")
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("train", help="train a network")
    p.add_argument("--config", required=True)
    p.add_argument("--data", default="synthetic", help="'synthetic' or a frame directory")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="closed-loop prediction from context frames")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--context", required=True)
    p.add_argument("--horizon", type=int, default=30)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="SSIM/PSNR of predicted frames against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--windows", default="10,30")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("trace", help="print the layer activity schedule")
    p.add_argument("--layers", type=int, default=6)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--schedule", default="pyramidal", choices=["pyramidal", "synchronous"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("variation", help="positive/negative inter-frame variation")
    p.add_argument("--seq", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_variation)

    p = sub.add_parser("sweep", help="p or sequence-length sweep on synthetic data")
    p.add_argument("--kind", required=True, choices=["p", "seqlen"])
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--p-values", default="5,10,100,1000,10000")
    p.add_argument("--lengths", default="5,10,20")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        limiter = _limit_threads()
    except ValueError:
        print("error: PPNET_THREADS must be an integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PPNetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    finally:
        limiter.unregister()


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
