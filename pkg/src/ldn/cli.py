"""Command-line front end.

Exit codes: 0 on success, 1 for usage errors (bad flags, inputs that do not
fit the model), 2 for runtime failures (unreadable files, failed parity).
Every command echoes its resolved flags first so logs are reproducible.
"""

from __future__ import annotations

import argparse
import os
import sys
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import deploy
from .data import NoiseModel, load_pairs, read_image, synth_dataset, write_image
from .errors import FormatError
from .losses import LossWeights
from .metrics import evaluate_set
from .models import ArchConfig, load_weights, model_macs, network, param_count, save_weights
from .train import FrozenTeacher, TrainConfig, train

STUDENT_PARAM_TARGET = 1.96e6
STUDENT_GMAC_TARGET = 14.13
TEACHER_PARAM_TARGET = 41.6e6


class UsageError(Exception):
    pass


@dataclass
class CommandResult:
    exit_code: int
    summary: str
    artifacts: dict[str, str] = field(default_factory=dict)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _has_default(action) -> bool:
    return not any(action.default is v for v in (None, False, argparse.SUPPRESS))


class _Formatter(argparse.RawDescriptionHelpFormatter):
    """Show ``(default: ...)`` on every option that has a meaningful default."""

    def _get_help_string(self, action):
        text = (action.help or "").strip()
        if action.option_strings and _has_default(action) \
                and "default" not in text:
            text = f"{text} (default: %(default)s)".strip()
        return text


def _fill_help(parser: argparse.ArgumentParser) -> None:
    # argparse skips the help column for options without help text
    for action in parser._actions:
        if action.help is None and _has_default(action):
            action.help = "default: %(default)s"


# --- flag parsing helpers -----------------------------------------------------

def _int_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def parse_resolution(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        h, w = (int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like HxW (e.g. 1088x1920), got {text!r}") from None
    if h <= 0 or w <= 0:
        raise argparse.ArgumentTypeError(f"resolution must be positive, got {text!r}")
    return h, w


def parse_crop_schedule(text: str) -> tuple[tuple[int, int], ...]:
    """``"0:32,150:64"`` -> ``((0, 32), (150, 64))``."""
    out = []
    for item in text.split(","):
        try:
            start, size = item.split(":")
            out.append((int(start), int(size)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"crop schedule entries look like EPOCH:SIZE, got {item!r}") from None
    return tuple(out)


def _add_arch(p: argparse.ArgumentParser, prefix: str = "", default_kind: Optional[str] = "student"):
    dash = f"--{prefix}-" if prefix else "--"
    group = p.add_argument_group(f"{prefix or 'model'} architecture")
    if not prefix:
        group.add_argument("--arch", choices=("student", "teacher"), default=default_kind)
    group.add_argument(f"{dash}widths", type=_int_list, default=None,
                       help="encoder level widths, e.g. 8,16,32,64 (default: preset for the kind)")
    group.add_argument(f"{dash}bottleneck", type=int, default=None, help="bottleneck width (default: preset)")
    group.add_argument(f"{dash}blocks", type=_int_list, default=None,
                       help="blocks per encoder stage, bottleneck, decoder stage (default: preset)")


def _arch(args, prefix: str = "", kind: Optional[str] = None) -> ArchConfig:
    key = f"{prefix}_" if prefix else ""
    kind = kind or args.arch
    base = ArchConfig.student() if kind == "student" else ArchConfig.teacher()
    widths = getattr(args, f"{key}widths") or base.level_widths
    bottleneck = getattr(args, f"{key}bottleneck") or base.bottleneck_width
    blocks = getattr(args, f"{key}blocks") or base.blocks
    try:
        return ArchConfig(kind, widths, bottleneck, blocks)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _resolve(args) -> None:
    if getattr(args, "epochs", None) is not None and args.t_max is None:
        args.t_max = max(1, args.epochs)


def _echo(args, out) -> None:
    for key, value in sorted(vars(args).items()):
        if key != "func":
            print(f"# {key} = {value}", file=out)
    if getattr(args, "arch", None) and getattr(args, "command", "") != "membudget":
        try:
            print(f"# resolved arch = {_arch(args).as_dict()}", file=out)
        except UsageError:
            pass


# --- commands ---------------------------------------------------------------

def cmd_denoise(args, out) -> CommandResult:
    config = _arch(args)
    params = load_weights(args.weights)
    network(config).check_params(params)
    x = read_image(args.input)
    if args.fp16:
        params = deploy.export_fp16(params).params
    if args.tile:
        th, tw = args.tile
        plan = deploy.make_plan(config, x.shape[1], x.shape[2], (th, tw), args.halo)
        print(f"tiling: {len(plan.tiles)} tiles of {th}x{tw}, halo {plan.halo} "
              f"(padded {plan.padded_halo}, receptive radius {deploy.receptive_radius(config)})", file=out)
        y = deploy.tiled_forward(config, params, x, plan, impl=args.impl)
    else:
        y = network(config).forward(params, x, impl=args.impl)
    write_image(args.output, y)
    return CommandResult(0, f"wrote {args.output} ({x.shape[1]}x{x.shape[2]})", {"output": str(args.output)})


def cmd_eval(args, out) -> CommandResult:
    config = _arch(args)
    params = load_weights(args.weights)
    pairs = load_pairs(args.noisy_dir, args.clean_dir)
    report = evaluate_set(config, params, pairs, impl=args.impl)
    print(report.table(), file=out)
    artifacts = {}
    if args.csv:
        report.write_csv(args.csv)
        artifacts["csv"] = str(args.csv)
    return CommandResult(0, f"{len(report.per_image)} images: PSNR {report.psnr_db:.4f} dB, SSIM {report.ssim:.5f}",
                         artifacts)


def _datasets(args):
    if args.noisy_dir or args.clean_dir:
        if not (args.noisy_dir and args.clean_dir):
            raise UsageError("--noisy-dir and --clean-dir must be given together")
        pairs = load_pairs(args.noisy_dir, args.clean_dir)
        if args.val_noisy_dir or args.val_clean_dir:
            if not (args.val_noisy_dir and args.val_clean_dir):
                raise UsageError("--val-noisy-dir and --val-clean-dir must be given together")
            return pairs, load_pairs(args.val_noisy_dir, args.val_clean_dir)
        return pairs, []
    noise = NoiseModel(args.noise_a, args.noise_b, args.data_seed)
    pairs = synth_dataset(args.synthetic + args.synthetic_val, args.synthetic_size, noise)
    return pairs[: args.synthetic], pairs[args.synthetic :]


def _train_config(args) -> TrainConfig:
    try:
        return TrainConfig(epochs=args.epochs, lr_max=args.lr_max, lr_min=args.lr_min,
                           t_max=args.t_max, clip_norm=args.clip_norm,
                           batch_size=args.batch_size, crop_schedule=args.crop_schedule,
                           finetune_epochs=args.finetune_epochs, seed=args.seed,
                           steps_per_epoch=args.steps_per_epoch, init_residual_gain=args.init_gain,
                           impl=args.impl)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _run_training(args, out, weights: LossWeights, teacher=None) -> CommandResult:
    config = _arch(args)
    cfg = _train_config(args)
    train_pairs, val_pairs = _datasets(args)
    print(f"alpha = {weights.alpha:.4f}; {len(train_pairs)} train / {len(val_pairs)} val pairs", file=out)

    def progress(r):
        print(f"epoch {r.epoch:4d} lr {r.lr:.3e} crop {r.crop} loss {r.l_total:.6f} val_psnr {r.val_psnr:.4f}",
              file=out, flush=True)

    result = train(config, train_pairs, cfg, weights, teacher, val_pairs or None,
                   checkpoint_dir=args.out, on_epoch=progress)
    out_dir = Path(args.out)
    return CommandResult(0, f"best epoch {result.best_epoch} val PSNR {result.best_psnr:.4f} dB; "
                            f"checkpoints in {out_dir}",
                         {"best": str(out_dir / "best.ldnw"), "last": str(out_dir / "last.ldnw"),
                          "log": str(out_dir / "train_log.txt")})


def cmd_train(args, out) -> CommandResult:
    if args.lambda_distill:
        raise UsageError("train is supervised-only; use the distill command for lambda_distill > 0")
    return _run_training(args, out, LossWeights(args.lambda_gt, 0.0, args.lambda_l1))


def cmd_distill(args, out) -> CommandResult:
    if not args.teacher_weights:
        raise UsageError("distill needs --teacher-weights")
    teacher_cfg = _arch(args, "teacher", kind="teacher")
    teacher = FrozenTeacher(teacher_cfg, load_weights(args.teacher_weights), impl=args.impl)
    weights = LossWeights(args.lambda_gt, args.lambda_distill, args.lambda_l1)
    return _run_training(args, out, weights, teacher)


def cmd_count(args, out) -> CommandResult:
    config = _arch(args)
    h, w = args.res
    n = param_count(config)
    macs = model_macs(config, h, w)
    print(f"architecture: {config.kind} widths={list(config.level_widths)} bottleneck={config.bottleneck_width} "
          f"blocks={list(config.blocks)}", file=out)
    print(f"parameters:   {n:,} ({n / 1e6:.3f}M)", file=out)
    print(f"MACs @ {h}x{w}: {macs / 1e9:.3f} G", file=out)
    if config.kind == "student":
        print(f"target params 1.96M: deviation {100 * (n / STUDENT_PARAM_TARGET - 1):+.2f}%", file=out)
        print(f"target GMACs 14.13 (1088x1920): deviation "
              f"{100 * (model_macs(config, 1088, 1920) / 1e9 / STUDENT_GMAC_TARGET - 1):+.2f}%", file=out)
    else:
        print(f"target params 41.6M: deviation {100 * (n / TEACHER_PARAM_TARGET - 1):+.2f}%", file=out)
    return CommandResult(0, f"{n} parameters, {macs} MACs")


def cmd_parity(args, out) -> CommandResult:
    config = _arch(args)
    if args.weights:
        params = load_weights(args.weights)
    else:
        params = network(config).init(args.seed, args.init_gain)
    h, w = args.size
    rng = np.random.default_rng(args.seed)
    inputs = [rng.random((1, h, w, config.input_channels), dtype=np.float32) for _ in range(args.inputs)]
    report = deploy.parity_check(config, params, inputs, args.path_a, args.path_b, args.tolerance)
    print(report.text(), file=out)
    artifacts = {}
    if args.csv:
        report.write_csv(args.csv)
        artifacts["csv"] = str(args.csv)
    verdict = "PASS" if report.passed else "FAIL"
    summary = f"parity {args.path_a} vs {args.path_b}: {verdict} (max dev {report.max_abs_dev:.3e})"
    if not report.passed:
        return _failure(2, f"{summary}, tolerance {report.tolerance:g}")
    return CommandResult(0, summary, artifacts)


def _parse_budget(text: str) -> float:
    units = {"k": 2 ** 10, "m": 2 ** 20, "g": 2 ** 30}
    t = text.strip().lower().removesuffix("ib").removesuffix("b")
    scale = units.get(t[-1:], None)
    try:
        return float(t[:-1]) * scale if scale else float(t) * 2 ** 20
    except ValueError:
        raise argparse.ArgumentTypeError(f"budget must be a number of MiB or carry a K/M/G suffix, got {text!r}") from None


def cmd_membudget(args, out) -> CommandResult:
    h, w = args.res
    dtype = np.float16 if args.dtype == "f16" else np.float32
    student, teacher = _arch(args, "student", kind="student"), _arch(args, "teacher", kind="teacher")
    verdicts = []
    for config in (student, teacher):
        plan = deploy.make_plan(config, h, w, args.tile) if args.tile else None
        est = deploy.estimate_memory(config, h, w, dtype, plan)
        if args.table:
            print(est.table(), file=out)
        ok = args.budget is None or deploy.fits(est, args.budget)
        print(f"{config.kind}: peak {est.peak_mib:.2f} MiB at {est.peak_layer}", file=out)
        verdicts.append(f"{config.kind}: {'FITS' if ok else 'OOM'}")
    if args.budget is not None:
        print(f"budget {args.budget / 2 ** 20:.2f} MiB", file=out)
    return CommandResult(0, ", ".join(verdicts) if args.budget is not None else "memory estimated")


def cmd_export_fp16(args, out) -> CommandResult:
    params = load_weights(args.weights)
    if args.check_arch:
        network(_arch(args)).check_params(params)
    res = deploy.export_fp16(params)
    save_weights(args.output, res.params)
    src, dst = os.path.getsize(args.weights), os.path.getsize(args.output)
    print(f"tensors: {len(params)}, values: {sum(p.size for p in params.values()):,}", file=out)
    print(f"saturated values: {res.saturated}", file=out)
    print(f"file size: {src:,} -> {dst:,} bytes ({dst / src:.3f}x)", file=out)
    return CommandResult(0, f"wrote {args.output}", {"output": str(args.output)})


# --- parser -------------------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser, distill: bool):
    loss = p.add_argument_group(
        "loss weights",
        "total = lambda_gt * MSE(s, gt) + lambda_distill * MSE(s, teacher) + lambda_l1 * L1(s, gt); "
        "alpha = lambda_distill / (lambda_distill + lambda_gt) = 900 / (900 + 100) = 0.9 at the defaults")
    loss.add_argument("--lambda-gt", type=float, default=100.0)
    loss.add_argument("--lambda-distill", type=float, default=900.0 if distill else 0.0,
                      help="teacher-matching weight" + ("" if distill else " (must stay 0 for train)"))
    loss.add_argument("--lambda-l1", type=float, default=50.0)

    opt = p.add_argument_group("optimizer and schedule")
    opt.add_argument("--epochs", type=int, default=200)
    opt.add_argument("--finetune-epochs", type=int, default=0,
                     help="extra epochs after --epochs with a restarted cosine schedule")
    opt.add_argument("--lr-max", type=float, default=1e-3)
    opt.add_argument("--lr-min", type=float, default=1e-5)
    opt.add_argument("--t-max", type=int, default=None, help="cosine period in epochs (default: --epochs)")
    opt.add_argument("--clip-norm", type=float, default=0.1, help="joint L2 gradient clip")
    opt.add_argument("--batch-size", type=int, default=8)
    opt.add_argument("--steps-per-epoch", type=int, default=None, help="default: one pass over the training set")
    opt.add_argument("--crop-schedule", type=parse_crop_schedule, default=((0, 32),),
                     help="EPOCH:SIZE list, e.g. 0:32,150:64")
    opt.add_argument("--init-gain", type=float, default=0.1, help="init std gain on residual-closing convs")
    opt.add_argument("--seed", type=int, default=0)
    opt.add_argument("--impl", choices=("gemm", "direct"), default="gemm")

    data = p.add_argument_group("data", "paired directories, or a seeded synthetic set when none are given")
    data.add_argument("--noisy-dir")
    data.add_argument("--clean-dir")
    data.add_argument("--val-noisy-dir")
    data.add_argument("--val-clean-dir")
    data.add_argument("--synthetic", type=int, default=200, help="synthetic training pairs")
    data.add_argument("--synthetic-val", type=int, default=50, help="synthetic validation pairs")
    data.add_argument("--synthetic-size", type=int, default=64)
    data.add_argument("--noise-a", type=float, default=0.01, help="signal-dependent noise variance")
    data.add_argument("--noise-b", type=float, default=0.0004, help="constant noise variance")
    data.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint directory")
    if distill:
        p.add_argument("--teacher-weights", help="LDNW file of the frozen teacher (required)")
        _add_arch(p, "teacher")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ldn", description="Lightweight image denoiser: inference, training, deployment checks.",
                     formatter_class=_Formatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    parsers = []

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=_Formatter)
        p.set_defaults(func=func)
        parsers.append(p)
        return p

    p = command("denoise", cmd_denoise, "restore one image")
    _add_arch(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--tile", type=parse_resolution, default=None, help="tile size HxW for halo-tiled inference")
    p.add_argument("--halo", type=int, default=None, help="halo in pixels (default: receptive radius)")
    p.add_argument("--fp16", action="store_true", help="cast weights to float16 first")
    p.add_argument("--impl", choices=("gemm", "direct"), default="direct",
                   help="direct is shape-independent, so tiled and untiled files match byte for byte")

    p = command("eval", cmd_eval, "score a model on paired directories")
    _add_arch(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--noisy-dir", required=True)
    p.add_argument("--clean-dir", required=True)
    p.add_argument("--csv", default=None, help="per-image report path")
    p.add_argument("--impl", choices=("gemm", "direct"), default="gemm")

    p = command("train", cmd_train, "supervised training (no teacher)")
    _add_arch(p)
    _add_train_flags(p, distill=False)

    p = command("distill", cmd_distill, "train a student against ground truth and a frozen teacher")
    _add_arch(p)
    _add_train_flags(p, distill=True)

    p = command("count", cmd_count, "parameter and MAC counts")
    _add_arch(p)
    p.add_argument("--res", type=parse_resolution, default=(1088, 1920), help="HxW for the MAC count")

    p = command("parity", cmd_parity, "compare two execution paths")
    _add_arch(p)
    p.add_argument("--weights", default=None, help="LDNW file (default: fresh random weights from --seed)")
    p.add_argument("--path-a", choices=deploy.PATHS, default="reference-F32")
    p.add_argument("--path-b", choices=deploy.PATHS, default="optimized-F32")
    p.add_argument("--tolerance", type=float, default=None,
                   help=f"default {deploy.PARITY_TOL:g}, or {deploy.FP16_TOL:g} when a path uses FP16 weights")
    p.add_argument("--inputs", type=int, default=10, help="number of random inputs")
    p.add_argument("--size", type=parse_resolution, default=(64, 64))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init-gain", type=float, default=0.1, help="init std gain on residual-closing convs")
    p.add_argument("--csv", default=None)

    p = command("membudget", cmd_membudget, "activation memory of the student and teacher")
    p.set_defaults(arch="student")
    _add_arch(p, "student")
    _add_arch(p, "teacher")
    p.add_argument("--res", type=parse_resolution, default=(2432, 3200))
    p.add_argument("--dtype", choices=("f16", "f32"), default="f16")
    p.add_argument("--budget", type=_parse_budget, default=None, help="MiB, or a number with K/M/G suffix")
    p.add_argument("--tile", type=parse_resolution, default=None, help="estimate per tile instead")
    p.add_argument("--table", action="store_true", help="print the per-layer table")

    p = command("export-fp16", cmd_export_fp16, "cast an LDNW file to float16")
    _add_arch(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--check-arch", action="store_true", help="validate against the architecture flags first")
    for p in parsers:
        _fill_help(p)
    return parser


def _thread_limit():
    if "LDN_THREADS" not in os.environ:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=deploy.worker_threads())


def run(argv: Optional[Sequence[str]] = None, out=None) -> CommandResult:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else 1
        return CommandResult(code, "")
    _resolve(args)
    _echo(args, out)
    print(f"# LDN_THREADS = {deploy.worker_threads()}", file=out)
    try:
        with _thread_limit():
            return args.func(args, out)
    except UsageError as exc:
        return _failure(1, str(exc))
    except (FormatError, OSError) as exc:
        return _failure(2, str(exc))
    except ValueError as exc:  # shape, alignment, weight and dataset mismatches
        return _failure(1, str(exc))
    except Exception as exc:  # noqa: BLE001 - the exit code contract needs a catch-all
        return _failure(2, f"{type(exc).__name__}: {exc}")


def _failure(code: int, message: str) -> CommandResult:
    print(f"error: {message}", file=sys.stderr)
    return CommandResult(code, f"error: {message}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    result = run(argv)
    if result.exit_code == 0 and result.summary:
        print(result.summary)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
