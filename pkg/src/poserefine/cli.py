"""Command-line interface: ``poserefine <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Reports go to
stdout, diagnostics to stderr.

Every option may also come from a ``--config`` file of ``key = value``
lines (``#`` starts a comment); keys are the long option names with or
without leading dashes, and options given on the command line win.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import autonet
from .dataset import DEFAULT_POSE_RANGE, PoseDataset, SyntheticConfig, generate_synthetic, make_split
from .errors import PoseRefineError
from .evaluate import (
    ExperimentBase,
    ExperimentSpec,
    IdentityModel,
    OracleModel,
    evaluate,
    run_experiment,
    summary_line,
)
from .refine import Refiner, TrainConfig, build_network, checkpoint_meta, train, write_metrics_log
from .sampler import NoiseConfig

log = logging.getLogger("poserefine")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def read_config(path) -> list[str]:
    """Turn a ``key = value`` file into argv tokens."""
    argv = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = "--" + key.lstrip("-").replace("_", "-")
        if value.lower() in ("true", "yes", "on"):
            argv.append(key)
        elif value.lower() in ("false", "no", "off"):
            argv.append("--no-" + key[2:])
        else:
            argv.extend([key, value])
    return argv


def _counts(text: str) -> tuple[int, int, int]:
    try:
        a, b, c = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected three comma-separated counts, got {text!r}") from exc
    return a, b, c


def _noise(text: str) -> NoiseConfig:
    try:
        return NoiseConfig.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _noise_list(text: str) -> list[NoiseConfig]:
    return [_noise(t) for t in text.split(";") if t.strip()]


def _pose_range(text: str) -> float | None:
    if text.strip().lower() in ("none", "all"):
        return None
    try:
        value = float(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected degrees or 'none', got {text!r}") from exc
    if not 0 < value <= 180:
        raise argparse.ArgumentTypeError("pose range must be in (0, 180] degrees")
    return value


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _add_data_args(p):
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", type=_counts, default=(2000, 500, 500), help="train,val,test counts")
    p.add_argument("--split-seed", type=int, default=0)


def _add_train_args(p):
    p.add_argument("--epochs-mse", type=int, default=5)
    p.add_argument("--epochs-geo", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--noise", type=_noise, default=NoiseConfig.uniform(0, 30), help="U(lo,hi) or N(mean,sd), degrees")
    p.add_argument("--seed", type=int, default=0, help="training seed (noise draws, batch order)")
    p.add_argument("--init-seed", type=int, default=0, help="weight initialization seed")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--redraw-noise", action=argparse.BooleanOptionalAction, default=True,
                   help="draw fresh input noise every epoch")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="poserefine", description="Orientation refinement: data generation, training, evaluation.")
    parser.add_argument("--config", help="key = value option file")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render a synthetic cuboid dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frame-size", type=int, default=80)
    p.add_argument("--margin", type=int, default=8)
    p.add_argument("--max-pose-deg", type=_pose_range, default=DEFAULT_POSE_RANGE,
                   help="poses within this many degrees of the reference view; 'none' for all of SO(3)")

    p = sub.add_parser("train", help="train (or fine-tune) a refiner")
    _add_data_args(p)
    _add_train_args(p)
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--init", help="checkpoint to start from (fine-tuning)")
    p.add_argument("--log", help="write the per-epoch metrics log here")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_data_args(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint")
    g.add_argument("--model", choices=("identity", "oracle"), help="built-in reference model")
    p.add_argument("--noise", type=_noise, default=NoiseConfig.uniform(0, 30))
    p.add_argument("--seed", type=int, default=12345)
    p.add_argument("--resample", type=int, default=1)
    p.add_argument("--subset", choices=("test", "validation", "train", "all"), default="test")
    p.add_argument("--format", choices=("table", "kv"), default="table")
    p.add_argument("--time", action="store_true", help="report wall-clock time per inference")

    p = sub.add_parser("experiment", help="run a training-size, noise-distribution or resampling experiment")
    _add_data_args(p)
    _add_train_args(p)
    p.add_argument("--kind", required=True, choices=("training-size", "noise-distribution", "resampling"))
    p.add_argument("--checkpoint", help="trained model (otherwise one is trained)")
    p.add_argument("--sizes", type=_int_list, default=[500, 2000])
    p.add_argument("--noises", type=_noise_list, default=None, help="';'-separated list, e.g. 'U(0,30);N(30,5)'")
    p.add_argument("--resample", type=int, default=3)
    p.add_argument("--retrain", action="store_true", help="retrain per noise distribution")
    p.add_argument("--eval-seed", type=int, default=12345)
    p.add_argument("--format", choices=("table", "kv"), default="table")

    p = sub.add_parser("inspect-checkpoint", help="print checkpoint metadata and tensor shapes")
    p.add_argument("checkpoint")
    p.add_argument("--format", choices=("table", "kv"), default="table")
    return parser


def parse_args(argv: list[str]):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    if known.config:
        # config values go right after the command so that explicit flags override them
        extra = read_config(known.config)
        cmd_at = next((i for i, tok in enumerate(rest) if tok in COMMANDS), None)
        if cmd_at is not None:
            rest = rest[:cmd_at + 1] + extra + rest[cmd_at + 1:]
    return build_parser().parse_args(rest)


def _train_config(args) -> TrainConfig:
    return TrainConfig(args.epochs_mse, args.epochs_geo, args.batch_size, args.lr, args.noise,
                       args.seed, args.deterministic, args.redraw_noise)


def _load_split(args):
    data = PoseDataset.from_directory(args.data)
    split = make_split(data.q_gt, args.split, args.split_seed)
    return data, split


def cmd_gen_data(args, out):
    cfg = SyntheticConfig(count=args.count, seed=args.seed, frame_size=args.frame_size,
                          margin=args.margin, max_pose_deg=args.max_pose_deg)
    anns = generate_synthetic(args.out, cfg)
    print(f"wrote {len(anns)} samples to {args.out}", file=out)


def cmd_train(args, out):
    data, split = _load_split(args)
    cfg = _train_config(args)
    model = Refiner.load(args.init) if args.init else build_network(args.init_seed, data.images.shape[-1])
    with threadpool_limits(1 if cfg.deterministic else None):
        model, metrics = train(model, data, split, cfg, progress=lambda m: log.info(m.line()))
    model.save(args.out, {"train_config": cfg.digest(), "epochs": len(metrics)})
    if args.log:
        write_metrics_log(args.log, metrics)
    for m in metrics:
        print(m.line(), file=out)


def _eval_indices(args, data, split):
    if args.subset == "all":
        return list(range(len(data)))
    return {"test": split.test, "validation": split.validation, "train": split.train}[args.subset]


def cmd_eval(args, out):
    data = PoseDataset.from_directory(args.data)
    if args.subset == "all":
        split = None
        indices = list(range(len(data)))
    else:
        split = make_split(data.q_gt, args.split, args.split_seed)
        indices = _eval_indices(args, data, split)
    if args.checkpoint:
        model = Refiner.load(args.checkpoint)
    elif args.model == "oracle":
        model = OracleModel(data)
    else:
        model = IdentityModel()
    noise = NoiseConfig(args.noise.kind, args.noise.a, args.noise.b, resample=args.resample)
    report = evaluate(model, data, indices, noise, args.seed, timed=args.time)
    out.write(report.format(args.format))


def cmd_experiment(args, out):
    data, split = _load_split(args)
    cfg = _train_config(args)
    model = Refiner.load(args.checkpoint) if args.checkpoint else None
    spec_kwargs = dict(kind=args.kind, sizes=tuple(args.sizes), resample=args.resample, retrain=args.retrain)
    if args.noises:
        spec_kwargs["noises"] = tuple(args.noises)
    spec = ExperimentSpec(**spec_kwargs)
    base = ExperimentBase(data, split, cfg, model, args.eval_seed, args.init_seed,
                          progress=lambda m: log.info(m.line()))
    with threadpool_limits(1 if cfg.deterministic else None):
        result = run_experiment(spec, base)
    out.write(result.format(args.format))
    print(summary_line(result), file=out)


def cmd_inspect(args, out):
    with open(args.checkpoint, "rb") as fh:
        entries = autonet.read_checkpoint(fh)
    meta = checkpoint_meta(entries)
    total = 0
    for key in sorted(meta):
        print(f"meta.{key}={meta[key]}" if args.format == "kv" else f"{key:<16} {meta[key]}", file=out)
    for name, arr in entries.items():
        if name.startswith("__"):
            continue
        total += arr.size
        shape = "x".join(str(d) for d in arr.shape)
        print(f"tensor={name} shape={shape}" if args.format == "kv" else f"{name:<24} {shape}", file=out)
    print(f"parameters={total}" if args.format == "kv" else f"{'total values':<24} {total}", file=out)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
    "inspect-checkpoint": cmd_inspect,
}


def main(argv: list[str] | None = None, out=None, err=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=err)
        return 1
    except OSError as exc:
        print(f"poserefine: cannot read config: {exc}", file=err)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=err,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        COMMANDS[args.command](args, out)
    except (PoseRefineError, OSError, ValueError) as exc:
        print(f"poserefine {args.command}: error: {exc}", file=err)
        return 2
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
