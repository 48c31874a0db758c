# -*- coding: utf-8 -*-
"""Command line entry point for the targeted perceptual loss SR toolkit."""

import argparse
import json
import logging
import sys
from typing import Any, Callable, Dict, List, Optional

import torch

from .core.config import (
    ALPHA,
    APP_NAME,
    BACKGROUND_CLASSES,
    BATCH_SIZE,
    BENCH_REPEATS,
    BENCH_WARMUP,
    BETA,
    BORDER_SHAVE,
    D1,
    DECAY_EVERY,
    DECAY_FACTOR,
    DEFAULT_SEED,
    GAMMA,
    LR0,
    MAIN_EPOCHS,
    PRETRAIN_EPOCHS,
    VERSION,
    W_ADV,
    W_MSE,
    XGA_LR_SIZE,
    get_default_config_path,
    get_default_log_level,
    get_default_vgg_weights,
    load_config_file,
    section_for,
)
from .core.errors import TpsrError, UsageError
from .core.utils import parse_size, seed_everything

logger = logging.getLogger("tpsr")

GLOBAL_KEYS = ("seed", "threads", "log_level", "config")
COMMANDS = ("make-obb", "gen-synth", "train", "sr", "eval", "bench", "export-vgg")


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError (exit 1) instead of exiting with 2."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _require(args: argparse.Namespace, *names: str) -> None:
    missing = [f"--{name.replace('_', '-')}" for name in names if getattr(args, name, None) in (None, "", [])]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s): {', '.join(missing)}")


def _class_names(text: Any) -> List[str]:
    if isinstance(text, (list, tuple)):
        return [str(name) for name in text]
    return [name.strip() for name in str(text).split(",") if name.strip()]


# -- subcommands --------------------------------------------------------------

def cmd_make_obb(args: argparse.Namespace) -> int:
    from .services.obb_labeler import BackgroundClassSet, OBBLabeler

    _require(args, "seg_dir", "out_dir")
    labeler = OBBLabeler(
        background=BackgroundClassSet(frozenset(_class_names(args.bg_classes))),
        d1=args.d1,
        two_sided=not args.one_sided,
    )
    written = labeler.label_directory(args.seg_dir, args.out_dir, args.class_map)
    logger.info(f"make-obb: {len(written)} labels")
    return 0


def cmd_gen_synth(args: argparse.Namespace) -> int:
    from .services.obb_labeler import BackgroundClassSet, OBBLabeler
    from .services.synthetic import SceneSpec, generate_corpus

    _require(args, "out_dir")
    template = SceneSpec(
        size=args.size,
        seed=args.seed,
        horizon=args.horizon,
        n_objects=args.n_objects,
        shape_family=args.shape_family,
    )
    labeler = OBBLabeler(BackgroundClassSet(frozenset(_class_names(args.bg_classes))), d1=args.d1)
    manifest = generate_corpus(args.n, template, args.out_dir, labeler)
    print(manifest)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    from .networks.features import FeatureTap, load_extractor
    from .networks.objectives import LossWeights
    from .networks.srgan import GeneratorConfig
    from .services.trainer import TrainSchedule, run

    _require(args, "manifest", "out_dir")
    schedule = TrainSchedule(
        pretrain_epochs=args.pretrain_epochs,
        main_epochs=args.main_epochs,
        lr0=args.lr,
        decay_every=args.decay_every,
        decay_factor=args.decay_factor,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    weights = LossWeights(
        alpha=args.alpha,
        beta=args.beta,
        gamma=args.gamma,
        w_mse=args.w_mse,
        w_adv=args.w_adv,
        boundary_tap=FeatureTap.parse(args.boundary_tap),
        background_tap=FeatureTap.parse(args.background_tap),
        object_tap=FeatureTap.parse(args.object_tap) if args.object_tap else None,
    )
    generator_cfg = GeneratorConfig(n_residual_blocks=args.residual_blocks, skip=args.skip)
    fx = load_extractor(args.extractor, args.vgg_weights, seed=args.seed)

    result = run(
        schedule,
        args.manifest,
        args.out_dir,
        weights,
        fx,
        generator_cfg=generator_cfg,
        resume=args.resume,
        stop_after=args.stop_after,
    )
    logger.info(
        f"train: {result['epochs_completed']} epochs, {result['global_step']} steps, "
        f"{result['elapsed_sec']}s -> {result['checkpoint']}"
    )
    print(result["checkpoint"])
    return 0


def cmd_sr(args: argparse.Namespace) -> int:
    from .services.trainer import super_resolve

    _require(args, "checkpoint", "out_dir", "inputs")
    super_resolve(args.checkpoint, args.inputs, args.out_dir)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from .services.evaluator import MetricConvention, evaluate_directory

    _require(args, "sr_dir", "hr_dir", "out")
    conv = MetricConvention(color=args.color, border_shave=args.shave)
    evaluate_directory(args.sr_dir, args.hr_dir, args.obb_dir, conv, out_csv=args.out)
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    from .services.evaluator import benchmark_throughput, write_bench_report

    _require(args, "checkpoint")
    try:
        size = parse_size(args.size)
    except ValueError as e:
        raise UsageError(str(e)) from e
    report = benchmark_throughput(args.checkpoint, size, repeats=args.repeats, warmup=args.warmup)
    if args.out:
        write_bench_report(report, args.out)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_export_vgg(args: argparse.Namespace) -> int:
    from .networks.features import export_vgg16_archive

    _require(args, "out")
    export_vgg16_archive(args.out)
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> CliParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = CliParser(prog="tpsr", description=f"{APP_NAME} {VERSION}: x4 SR with a targeted perceptual loss", formatter_class=fmt)
    parser.add_argument("--seed", type=int, default=DEFAULT_SEED, help="seed for data sampling, init and synthesis")
    parser.add_argument("--threads", type=int, default=1, help="torch intra-op thread cap")
    parser.add_argument("--log-level", default=get_default_log_level(), help="logging level (DEBUG, INFO, WARNING, ERROR)")
    parser.add_argument("--config", default=get_default_config_path(), help="JSON config file; flags override its values")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("make-obb", help="segmentation labels -> OBB labels", formatter_class=fmt)
    p.add_argument("--seg-dir", help="directory of segmentation PNGs")
    p.add_argument("--out-dir", help="directory for the OBB PNGs")
    p.add_argument("--class-map", default=None, help="class map JSON (default: <seg-dir>/classes.json)")
    p.add_argument("--bg-classes", default=",".join(BACKGROUND_CLASSES), help="comma separated background class names")
    p.add_argument("--d1", type=float, default=D1, help="boundary disk diameter in pixels")
    p.add_argument("--one-sided", action="store_true", help="mark only one pixel of each class change")
    p.set_defaults(handler=cmd_make_obb)

    p = sub.add_parser("gen-synth", help="write a synthetic corpus and manifest", formatter_class=fmt)
    p.add_argument("--out-dir", help="corpus directory")
    p.add_argument("--n", type=int, default=16, help="number of scenes")
    p.add_argument("--size", type=int, default=128, help="scene side length in pixels")
    p.add_argument("--n-objects", type=int, default=3, help="objects per scene")
    p.add_argument("--shape-family", choices=("rectangles", "ellipses", "mixed"), default="mixed", help="object shapes")
    p.add_argument("--horizon", type=float, default=0.4, help="horizon row as a fraction of the height")
    p.add_argument("--bg-classes", default=",".join(BACKGROUND_CLASSES), help="comma separated background class names")
    p.add_argument("--d1", type=float, default=D1, help="boundary disk diameter in pixels")
    p.set_defaults(handler=cmd_gen_synth)

    p = sub.add_parser("train", help="two-phase training from a manifest", formatter_class=fmt)
    p.add_argument("--manifest", help="JSON-lines manifest of {hr, obb} paths")
    p.add_argument("--out-dir", help="directory for checkpoints and the training log")
    p.add_argument("--pretrain-epochs", type=int, default=PRETRAIN_EPOCHS, help="MSE-only epochs")
    p.add_argument("--main-epochs", type=int, default=MAIN_EPOCHS, help="adversarial epochs")
    p.add_argument("--lr", type=float, default=LR0, help="initial learning rate")
    p.add_argument("--decay-every", type=int, default=DECAY_EVERY, help="epochs between learning rate decays")
    p.add_argument("--decay-factor", type=float, default=DECAY_FACTOR, help="learning rate decay factor")
    p.add_argument("--batch-size", type=int, default=BATCH_SIZE, help="patches per batch")
    p.add_argument("--alpha", type=float, default=ALPHA, help="boundary perceptual weight")
    p.add_argument("--beta", type=float, default=BETA, help="background perceptual weight")
    p.add_argument("--gamma", type=float, default=GAMMA, help="object perceptual weight")
    p.add_argument("--w-mse", type=float, default=W_MSE, help="pixel MSE weight")
    p.add_argument("--w-adv", type=float, default=W_ADV, help="adversarial weight")
    p.add_argument("--boundary-tap", default="relu2_2", help="VGG tap for the boundary term")
    p.add_argument("--background-tap", default="relu4_3", help="VGG tap for the background term")
    p.add_argument("--object-tap", default=None, help="VGG tap for the object term (needed when gamma > 0)")
    p.add_argument("--residual-blocks", type=int, default=16, help="generator residual blocks")
    p.add_argument("--skip", choices=("add", "concat"), default="add", help="generator long skip merge")
    p.add_argument("--extractor", choices=("pretrained", "surrogate"), default="pretrained", help="VGG weight source")
    p.add_argument("--vgg-weights", default=get_default_vgg_weights(), help="pretrained VGG-16 archive (see export-vgg)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--stop-after", type=int, default=None, help="stop once this many epochs are complete")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("sr", help="super-resolve LR PNGs with a checkpoint", formatter_class=fmt)
    p.add_argument("--checkpoint", help="trained checkpoint")
    p.add_argument("--out-dir", help="directory for the SR PNGs")
    p.add_argument("--inputs", nargs="+", default=None, help="LR PNG files")
    p.set_defaults(handler=cmd_sr)

    p = sub.add_parser("eval", help="PSNR/SSIM (+ region PSNR) of SR vs HR images", formatter_class=fmt)
    p.add_argument("--sr-dir", help="directory of SR PNGs")
    p.add_argument("--hr-dir", help="directory of HR PNGs with the same names")
    p.add_argument("--obb-dir", default=None, help="directory of OBB PNGs for region scores")
    p.add_argument("--out", default="eval.csv", help="CSV report path")
    p.add_argument("--color", choices=("rgb", "luma"), default="rgb", help="metric colour convention")
    p.add_argument("--shave", type=int, default=BORDER_SHAVE, help="border pixels excluded from metrics")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("bench", help="generator throughput on random LR input", formatter_class=fmt)
    p.add_argument("--checkpoint", help="trained checkpoint")
    p.add_argument("--size", default=f"{XGA_LR_SIZE[0]}x{XGA_LR_SIZE[1]}", help="LR input size HxW")
    p.add_argument("--repeats", type=int, default=BENCH_REPEATS, help="timed forward passes")
    p.add_argument("--warmup", type=int, default=BENCH_WARMUP, help="untimed warm-up passes")
    p.add_argument("--out", default=None, help="JSON report path")
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("export-vgg", help="write the pretrained VGG-16 archive", formatter_class=fmt)
    p.add_argument("--out", default=get_default_vgg_weights() or "vgg16_taps.pt", help="archive path")
    p.set_defaults(handler=cmd_export_vgg)

    return parser


def _subparsers(parser: argparse.ArgumentParser) -> Dict[str, argparse.ArgumentParser]:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return dict(action.choices)
    return {}


def apply_config(parser: argparse.ArgumentParser, config: Dict[str, Any], command: Optional[str]) -> None:
    """Install config values as parser defaults so that explicit flags still win."""
    values = section_for(config, command)
    values.pop("handler", None)
    values.pop("command", None)
    parser.set_defaults(**{k: v for k, v in values.items() if k in GLOBAL_KEYS})
    if command in _subparsers(parser):
        _subparsers(parser)[command].set_defaults(**{k: v for k, v in values.items() if k not in GLOBAL_KEYS})


def _setup_logging(level_name: str) -> None:
    level = logging.getLevelName(str(level_name).upper())
    if not isinstance(level, int):
        raise UsageError(f"Unknown log level '{level_name}'")
    logging.basicConfig(level=level, format="%(asctime)s [%(levelname)s] %(message)s", force=True)


def parse_args(argv: List[str]) -> argparse.Namespace:
    parser = build_parser()
    pre, _ = parser.parse_known_args(argv)
    if pre.config:
        apply_config(parser, load_config_file(pre.config), pre.command)
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage(sys.stderr)
        raise UsageError(f"A command is required: {', '.join(COMMANDS)}")
    return args


def dispatch(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; 0 ok, 1 usage/config, 2 data, 3 runtime failure."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        _setup_logging(args.log_level)
        if args.threads < 1:
            raise UsageError(f"--threads must be >= 1, got {args.threads}")
        torch.set_num_threads(args.threads)
        seed_everything(args.seed)

        effective = {k: v for k, v in sorted(vars(args).items()) if k != "handler"}
        logger.info(f"Effective config: {json.dumps(effective, sort_keys=True, default=str)}")

        handler: Callable[[argparse.Namespace], int] = args.handler
        return handler(args)
    except SystemExit as e:
        # --help / --version
        return int(e.code or 0)
    except TpsrError as e:
        logger.error(str(e))
        if isinstance(e, UsageError):
            print(str(e), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected failure: {e}")
        return 3


def main() -> int:
    return dispatch()


if __name__ == "__main__":
    sys.exit(main())
