"""``tmnet`` command-line entry point.

Subcommands: synth, train, interp, eval, gradcheck, ablate.  Every command
exits 0 on success, 1 with a one-line ``error:`` diagnostic on failure and 2
on usage errors.  ``TMNET_THREADS`` caps BLAS worker threads.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from tmnet.model import ModelConfig
from tmnet.tensor import ConfigError, ShapeError, Tensor, no_grad
from tmnet.train import TrainConfig

log = logging.getLogger("tmnet")

PATH_KEYS = ("data_dir", "ckpt_path", "out_dir")
STEP_NAMES = {"1": "two_step1", "2": "two_step2", "one": "one"}


@dataclass
class RunConfig:
    """Model + training configuration plus paths, from one flat JSON document."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict, overrides: Optional[dict] = None) -> "RunConfig":
        doc = dict(doc)
        doc.update(overrides or {})
        model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
        train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = set(doc) - model_keys - train_keys - set(PATH_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        model = ModelConfig.from_dict({k: v for k, v in doc.items() if k in model_keys})
        train = TrainConfig.from_dict({k: v for k, v in doc.items() if k in train_keys})
        return cls(model, train, {k: doc[k] for k in PATH_KEYS if k in doc})

    @classmethod
    def load(cls, path: Optional[str], overrides: Optional[dict] = None) -> "RunConfig":
        doc = {}
        if path is not None:
            try:
                doc = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(doc, dict):
                raise ConfigError(f"config {path} must hold a JSON object")
        for k, v in (overrides or {}).items():
            log.info("override %s=%s", k, json.dumps(v))
        return cls.from_dict(doc, overrides)


def _parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def parse_t_list(text: str) -> list:
    """``"0.3,0.5"`` -> ``[0.3, 0.5]`` for every gap; ``"0.5;0.25,0.75"`` -> per-gap lists."""
    try:
        groups = [[float(v) for v in part.split(",") if v.strip()] for part in text.split(";")]
    except ValueError as exc:
        raise ConfigError(f"cannot parse t list {text!r}: {exc}") from exc
    if not groups or any(not g for g in groups):
        raise ConfigError(f"empty t list in {text!r}")
    for g in groups:
        for t in g:
            if not 0.0 < t < 1.0:
                raise ConfigError(f"every t must lie strictly between 0 and 1, got {t}")
    return groups[0] if len(groups) == 1 else groups


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


# --- commands ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    from tmnet.synth import generate_corpus, write_corpus

    corpus = generate_corpus(args.seed, args.clips, n_val=args.val, n_test=args.test, hr_size=args.hr_size,
                             frame_count=args.frames, scale_factor=args.scale)
    out_dir = write_corpus(args.out, corpus)
    counts = {k: len(v) for k, v in corpus.specs.items()}
    print(f"wrote {args.clips} clips ({', '.join(f'{k}={v}' for k, v in counts.items())}) "
          f"of {args.frames} frames at {args.hr_size}x{args.hr_size} to {out_dir}")
    return 0


def _load_data(path):
    from tmnet.synth import load_corpus

    if path is None:
        raise ConfigError("no corpus given (use --data or data_dir in the config)")
    return load_corpus(path)


def cmd_train(args) -> int:
    from tmnet.train import Checkpoint, train_one_step, train_step1, train_step2

    overrides = dict(args.set or [])
    if args.iters is not None:
        overrides["total_iters"] = args.iters
    if args.seed is not None:
        overrides["seed"] = args.seed
    run = RunConfig.load(args.config, overrides)
    data = args.data or run.paths.get("data_dir")
    out = args.ckpt_out or run.paths.get("ckpt_path")
    if out is None:
        raise ConfigError("no checkpoint output path (use --ckpt-out)")
    corpus = _load_data(data)
    step = STEP_NAMES[args.step]
    log_path = args.log or f"{out}.log.csv"
    tcfg = run.train.replace(step=step)

    def progress(row):
        if row["val_psnr_db"] is not None:
            log.info("iter %d loss=%s val_psnr=%.3f dB", row["iter"], row["loss"], row["val_psnr_db"])

    if step == "two_step1":
        result = train_step1(run.model, corpus, tcfg, log_path, progress)
    elif step == "two_step2":
        result = train_step2(run.model, Checkpoint.load(args.ckpt_in), corpus, tcfg, log_path, progress)
    else:
        result = train_one_step(run.model, corpus, tcfg, log_path, progress)
    result.checkpoint.save(out)
    run_log = {"command": "train", "step": step, "overrides": overrides, "model": run.model.to_dict(),
               "train": tcfg.to_dict(), "data_dir": str(data)}
    Path(f"{out}.run.json").write_text(json.dumps(run_log, indent=1, sort_keys=True) + "\n")
    final = result.log_rows[-1]
    print(f"{step}: {tcfg.iters} iterations, final val PSNR {final['val_psnr_db']:.4f} dB; "
          f"checkpoint {out}, log {log_path}")
    return 0


def _load_frames(paths) -> list[np.ndarray]:
    from tmnet.synth import read_rgb

    frames = [read_rgb(p) for p in paths]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise ShapeError(f"input frames differ in size: {sorted(shapes)}")
    return frames


def cmd_interp(args) -> int:
    from tmnet.model import normalize_t_values
    from tmnet.synth import write_rgb
    from tmnet.train import Checkpoint

    t_values = parse_t_list(args.t)
    if len(args.frames) < 2:
        raise ConfigError("need at least two input frames")
    model = Checkpoint.load(args.ckpt).build_model()
    frames = _load_frames(args.frames)
    per_gap = normalize_t_values(t_values, len(frames) - 1)
    inputs = [Tensor(f[None].astype(model.dtype)) for f in frames]
    with no_grad():
        out, prov = model.forward_stacked(inputs, per_gap)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for img, p in zip(out.data, prov):
        # inputs are (gap i, t=0); names sort in temporal order
        gap, t = (p[1], 0.0) if p[0] == "frame" else (p[1], p[2])
        write_rgb(out_dir / f"frame_g{gap:03d}_t{t:.4f}", np.clip(img.astype(np.float64), 0.0, 1.0))
    print(f"wrote {len(prov)} frames to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    from tmnet.evaluation import (BicubicBlendPredictor, GroundTruthPredictor, ModelPredictor, evaluate,
                                  summarize, write_metrics_csv)
    from tmnet.train import Checkpoint

    if (args.ckpt is None) == (not args.oracle):
        raise ConfigError("give exactly one of --ckpt or --oracle")
    corpus = _load_data(args.data)
    predictor = GroundTruthPredictor() if args.oracle else ModelPredictor(Checkpoint.load(args.ckpt).build_model())
    t = parse_t_list(args.t) if args.t else None
    t_per_gap = None
    if t is not None:
        n_gaps = 3 if args.protocol == "step1" else 1
        t_per_gap = t if isinstance(t[0], list) else [t] * n_gaps
    records = evaluate(predictor, corpus, args.split, args.protocol, t_per_gap)
    baseline = None
    if args.baseline:
        baseline = evaluate(BicubicBlendPredictor(corpus.scale_factor), corpus, args.split, args.protocol,
                            t_per_gap, id_prefix="baseline:")
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(args.report, records, baseline)
    s = summarize(records)
    msg = f"{len(records)} rows; mean PSNR {s['psnr_db']:.4f} dB, SSIM {s['ssim']:.4f}"
    if baseline is not None:
        msg += f"; baseline {summarize(baseline)['psnr_db']:.4f} dB"
    print(msg)
    return 0


def cmd_gradcheck(args) -> int:
    from tmnet.gradcheck import operator_suite

    suite = operator_suite(args.seed)
    if args.only:
        wanted = [w.strip() for w in args.only.split(",") if w.strip()]
        unknown = sorted(set(wanted) - {name for name, _ in suite})
        if unknown:
            raise ConfigError(f"unknown operator(s) {unknown}; known: {[name for name, _ in suite]}")
        suite = [(name, check) for name, check in suite if name in wanted]
    lines, failed = [], 0
    for _, check in suite:
        report = check()
        failed += not report.passed
        lines.append(report.line())
        print(lines[-1], flush=True)
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    if failed:
        print(f"error: {failed} operator(s) failed the gradient check", file=sys.stderr)
        return 1
    return 0


def cmd_ablate(args) -> int:
    from tmnet.train import run_suite

    overrides = dict(args.set or [])
    if args.seed is not None:
        overrides["seed"] = args.seed
    run = RunConfig.load(args.config, overrides)
    corpus = _load_data(args.data or run.paths.get("data_dir"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = run_suite(args.suite, corpus, run.train.replace(total_iters=args.budget), run.model, out)
    for r in rows:
        print(f"{r['suite']} {r['variant']:<12} {r['psnr_db']:.4f} dB")
    return 0


# --- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tmnet", description="Controllable space-time video super-resolution.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic moving-object corpus")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--clips", type=_positive_int, default=240, help="number of clips (>= 1)")
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--hr-size", type=_positive_int, default=64, help="HR frame side in pixels")
    s.add_argument("--frames", type=_positive_int, default=7, help="frames per clip")
    s.add_argument("--scale", type=int, choices=(2, 4), default=4, help="downsampling factor")
    s.add_argument("--val", type=int, default=None, help="validation clips (default clips/12)")
    s.add_argument("--test", type=int, default=None, help="test clips (default clips/12)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="run one training step")
    s.add_argument("--step", required=True, choices=sorted(STEP_NAMES), help="1, 2 or one (joint)")
    s.add_argument("--config", help="JSON file with model/train fields and paths")
    s.add_argument("--data", help="corpus directory (overrides data_dir)")
    s.add_argument("--ckpt-out", help="checkpoint to write (overrides ckpt_path)")
    s.add_argument("--ckpt-in", help="Step-1 checkpoint (required for --step 2)")
    s.add_argument("--log", help="training log CSV (default <ckpt-out>.log.csv)")
    s.add_argument("--iters", type=int, help="override total_iters")
    s.add_argument("--seed", type=int, help="override seed")
    s.add_argument("--set", action="append", type=_parse_override, metavar="KEY=VALUE",
                   help="override any config field (JSON value); repeatable")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("interp", help="interpolate and super-resolve frames at chosen moments")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--frames", required=True, nargs="+", help="LR input frames (PGM triplet stems)")
    s.add_argument("--t", required=True, help='moments, e.g. "0.3,0.5,0.7"; per gap with ";"')
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_interp)

    s = sub.add_parser("eval", help="score a checkpoint on a corpus split")
    s.add_argument("--ckpt", help="checkpoint to evaluate")
    s.add_argument("--oracle", action="store_true", help="evaluate the analytic ground-truth renderer instead")
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True, help="metrics CSV to write")
    s.add_argument("--baseline", action="store_true", help="add bicubic-blend baseline rows")
    s.add_argument("--protocol", choices=("step1", "step2", "dense"), default="step1")
    s.add_argument("--split", choices=("train", "val", "test"), default="test")
    s.add_argument("--t", help="override the protocol's moments")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of every differentiable operator")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="also write the report to this file")
    s.add_argument("--only", help="comma-separated subset of operator names")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("ablate", help="train and compare the variants of an ablation suite")
    s.add_argument("--suite", required=True, choices=("q2", "q3", "q4", "q5"))
    s.add_argument("--data", help="corpus directory")
    s.add_argument("--budget", type=_positive_int, default=2000, help="Step-1 iterations per variant")
    s.add_argument("--out", required=True, help="comparison CSV to write")
    s.add_argument("--config", help="JSON base configuration")
    s.add_argument("--seed", type=int)
    s.add_argument("--set", action="append", type=_parse_override, metavar="KEY=VALUE")
    s.set_defaults(func=cmd_ablate)
    return p


def _limit_threads():
    value = os.environ.get("TMNET_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"TMNET_THREADS must be a positive integer, got {value!r}")
    if n < 1:
        raise ConfigError(f"TMNET_THREADS must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "train" and args.step == "2" and not args.ckpt_in:
        parser.error("train --step 2 requires --ckpt-in")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        limiter = _limit_threads()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except Exception as exc:  # one-line diagnostic, no traceback
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
