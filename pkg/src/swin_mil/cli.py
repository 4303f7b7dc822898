"""``swin-mil`` command line: gen-data, train, eval, predict.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import generate_synthetic, load_manifest, load_pgm, save_pgm
from .exceptions import ConfigError, FormatError, NonFiniteError, ShapeError
from .head import predict_mask
from .metrics import evaluate
from .model import ModelConfig
from .tensor import save_smt1
from .training import TrainConfig, load_checkpoint, make_checkpoint, restore, save_checkpoint, train, write_loss_log
from .validation import check_image_size

log = logging.getLogger("swin_mil")


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


def _thread_limit():
    raw = os.environ.get("SWIN_MIL_THREADS")
    if not raw:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SWIN_MIL_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"SWIN_MIL_THREADS must be >= 1, got {n}")
    return threadpool_limits(limits=n)


# -- gen-data ---------------------------------------------------------------------
def cmd_gen_data(args) -> int:
    try:
        check_image_size(args.size, ModelConfig().encoder)
    except ShapeError as exc:
        raise UsageError(f"--size {args.size}: {exc}") from None
    if args.num_pos < 0 or args.num_neg < 0:
        raise UsageError("--num-pos and --num-neg must be nonnegative")
    try:
        manifest = generate_synthetic(args.out, args.num_pos, args.num_neg, args.size, args.seed, args.test_fraction)
    except OSError as exc:
        raise RuntimeFailure(f"cannot write dataset: {exc}") from exc
    print(manifest.root / "manifest.tsv")
    return 0


# -- train ------------------------------------------------------------------------
def build_run_config(args) -> RunConfig:
    base = RunConfig()
    if args.paper_faithful:
        base = RunConfig(model=ModelConfig(), train=TrainConfig.full_schedule())
    if args.config:
        base = RunConfig.from_file(args.config, base)
    overrides: dict[str, object] = {}
    if args.stages is not None:
        desk = ModelConfig.desk(args.stages)
        overrides.update(depths=desk.depths, num_heads=desk.num_heads)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.lr is not None:
        overrides["global_lr"] = args.lr
    return RunConfig.from_values(overrides, base)


def cmd_train(args) -> int:
    try:
        run = build_run_config(args)
    except (ConfigError, OSError) as exc:
        raise UsageError(str(exc)) from None
    try:
        manifest = load_manifest(args.data)
    except (OSError, FormatError) as exc:
        raise RuntimeFailure(f"cannot load dataset: {exc}") from exc
    bags = manifest.training_bags(args.split)
    if not bags:
        raise RuntimeFailure(f"split {args.split!r} of {args.data} is empty")
    out = Path(args.out)
    try:
        check_image_size(bags[0].image.shape[0], run.model.encoder)
    except ShapeError as exc:
        raise RuntimeFailure(str(exc)) from None
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(run.to_text(), encoding="utf-8")
    try:
        result = train(bags, run.model, run.train, out_dir=out)
    except NonFiniteError as exc:
        write_loss_log(out / "loss_log.csv", getattr(exc, "log", []), run.model.num_stages)
        raise RuntimeFailure(f"training diverged: {exc}") from exc
    except (ShapeError, ValueError) as exc:
        raise RuntimeFailure(str(exc)) from exc
    write_loss_log(out / "loss_log.csv", result.log, run.model.num_stages)
    if result.checkpoints:
        shutil.copyfile(result.checkpoints[-1], out / "final.smc")
    else:
        # zero epochs still leave a loadable checkpoint of the initial weights
        ckpt = make_checkpoint(result.model, result.optimizer, run.train, 0, result.rng or np.random.default_rng(run.train.seed))
        save_checkpoint(out / "final.smc", ckpt)
    if result.log:
        print(f"initial L={result.log[0]['L']:.6f} final L={result.log[-1]['L']:.6f}")
    print(out / "final.smc")
    return 0


# -- eval -------------------------------------------------------------------------
def _load_model(path):
    try:
        ckpt = load_checkpoint(path)
    except (OSError, FormatError) as exc:
        raise RuntimeFailure(f"cannot load checkpoint {path}: {exc}") from exc
    return restore(ckpt)[0]


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    if args.side not in ("fuse", *map(str, range(1, model.config.num_stages + 1))):
        raise UsageError(f"--side must be fuse or 1..{model.config.num_stages}, got {args.side}")
    try:
        manifest = load_manifest(args.data)
        bags = manifest.load_bags(args.split, require_masks=True)
    except FileNotFoundError as exc:
        raise RuntimeFailure(f"missing ground truth: {exc}") from exc
    except (OSError, FormatError, ValueError) as exc:
        raise RuntimeFailure(f"cannot load dataset: {exc}") from exc
    threshold = model.config.threshold if args.threshold is None else args.threshold
    try:
        report = evaluate(model, bags, threshold=threshold, side=args.side)
    except ShapeError as exc:
        raise RuntimeFailure(str(exc)) from exc
    text = report.to_text()
    Path(args.report).write_text(text, encoding="utf-8")
    sys.stdout.write(text[text.index("[metrics]") :])
    return 0


# -- predict ----------------------------------------------------------------------
def cmd_predict(args) -> int:
    model = _load_model(args.checkpoint)
    try:
        image = load_pgm(args.image)
    except (OSError, FormatError) as exc:
        raise RuntimeFailure(f"cannot read image: {exc}") from exc
    try:
        stages, fused, score = model.predict(image[None, ..., None])
    except ShapeError as exc:
        raise RuntimeFailure(str(exc)) from exc
    threshold = model.config.threshold if args.threshold is None else args.threshold
    prefix = str(args.out)
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    save_smt1(prefix + ".prob.smt", fused[0])
    save_pgm(prefix + ".mask.pgm", predict_mask(fused[0], threshold))
    written = [prefix + ".prob.smt", prefix + ".mask.pgm"]
    if args.dump_sides:
        for t, m in enumerate(stages, 1):
            save_smt1(f"{prefix}.side{t}.smt", m[0])
            written.append(f"{prefix}.side{t}.smt")
    print(f"bag_score={float(score[0])!r}")
    for w in written:
        print(w)
    return 0


# -- entry point ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swin-mil", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a seeded synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-pos", type=int, required=True)
    p.add_argument("--num-neg", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train from image-level labels")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--stages", type=int, choices=(2, 3, 4))
    p.add_argument("--paper-faithful", action="store_true")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint against pixel masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--side", default="fuse", choices=("1", "2", "3", "4", "fuse"))
    p.add_argument("--threshold", type=float)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="probability map and mask for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--dump-sides", action="store_true")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"swin-mil: error: {exc}", file=sys.stderr)
        return 2
    except RuntimeFailure as exc:
        print(f"swin-mil: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
