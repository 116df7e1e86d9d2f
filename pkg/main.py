import argparse
import os
import re
import sys
import time

from dotenv import load_dotenv

# Add src directory to Python path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

load_dotenv()

# BLAS pools read these once, when numpy is first imported
_threads = os.getenv("CASCADE_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

from src.managers.cascade_manager import plan
from src.managers.experiment_manager import export_groups, run_compare, run_eval, run_sample, run_train
from src.utils.config import CODE_VERSION, config_hash, load_config
from src.utils.error_handler import (EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, ErrorContext, ErrorHandler,
                                     exit_code_for)
from src.utils.invariant_checks import run_checks
from src.utils.report_generator import format_table
from src.utils.run_logger import get_run_logger


def _progress() -> bool:
    return sys.stdout.isatty()


def _config(args, *extra_overrides):
    return load_config(args.config, (args.override or []) + list(extra_overrides), getattr(args, 'arm', None))


def train(args):
    seed_override = [f"train.seed={args.seed}"] if args.seed is not None else []
    config = _config(args, *seed_override)
    run_id = config_hash(config)
    get_run_logger().log_run_started("train", run_id, {"arm": config.arm.name, "steps": config.train.steps})

    with ErrorContext("train", run_id=run_id, additional_info={"arm": config.arm.name}):
        result = run_train(config, args.out, progress=_progress())

    print(f"✓ Trained arm '{result.arm}' for {result.steps} steps")
    print(f"  Checkpoint: {result.checkpoint_path}")
    print(f"  SHA-256:    {result.checkpoint_sha256}")
    print(f"  Metrics:    {result.metrics_path}")
    print(f"  Trainable parameters: {result.census.get('trainable', 0):,}")
    print(f"  Wall clock: {result.wall_clock_seconds:.1f}s")


def sample(args):
    config = _config(args)
    if not args.checkpoint:
        raise ValueError("sample requires --checkpoint")
    run_id = config_hash(config)
    out_dir = args.out or os.path.join(config.output_dir, "samples")
    get_run_logger().log_run_started("sample", run_id, {"n": args.n, "seed": args.seed})

    with ErrorContext("sample", run_id=run_id, additional_info={"checkpoint": args.checkpoint}):
        written = run_sample(config, args.checkpoint, args.n, args.seed, out_dir, args.label)

    finals = [path for path in written if path.endswith("_final.png")]
    print(f"✓ Wrote {len(finals)} samples ({len(written)} PNG files) to {out_dir}")
    for path in finals:
        print(f"  • {os.path.basename(path)}")


def evaluate(args):
    config = _config(args)
    if not args.checkpoint:
        raise ValueError("eval requires --checkpoint")
    run_id = config_hash(config)
    get_run_logger().log_run_started("eval", run_id, {"checkpoint": args.checkpoint})

    with ErrorContext("eval", run_id=run_id, additional_info={"checkpoint": args.checkpoint}):
        report = run_eval(config, args.checkpoint, args.out, args.n, args.seed)

    rows = [{"metric": name, "value": getattr(report, name)}
            for name in ("proxy_fid_r", "proxy_kid_r", "proxy_pfid_r", "proxy_pkid_r", "proxy_fid_b",
                         "count_accuracy", "count_mae")]
    print(format_table(rows, ["metric", "value"], title=f"Evaluation: {report.arm}",
                       footer=[f"report hash {report.report_hash()} | code {CODE_VERSION}"]))


def compare(args):
    if not args.config:
        raise ValueError("compare requires --config <experiment.json>")

    with ErrorContext("compare", additional_info={"descriptor": args.config}):
        result = run_compare(args.config, progress=_progress(), overrides=args.override)

    print(result.text)
    print(f"\nTable written to {result.csv_path} and {result.text_path}")


def show_plan(args):
    config = _config(args)
    cascade_plan = plan(config.cascade.base, config.cascade.target)
    print(cascade_plan.describe())


def export(args):
    if not args.checkpoint or not args.out:
        raise ValueError("export requires --checkpoint and --out")

    with ErrorContext("export", additional_info={"groups": args.group}):
        digest = export_groups(args.checkpoint, args.group, args.out)

    print(f"✓ Exported {', '.join(args.group)} to {args.out}")
    print(f"  SHA-256: {digest}")


def check(args):
    started = time.perf_counter()
    results = run_checks(quick=args.quick)
    rows = [{"check": r.name, "result": "PASS" if r.passed else "FAIL", "value": f"{r.value:.3g}",
             "threshold": f"{r.threshold:.3g}", "seconds": f"{r.seconds:.2f}", "detail": r.detail}
            for r in results]
    failed = [r for r in results if not r.passed]
    footer = f"{len(results) - len(failed)}/{len(results)} passed in {time.perf_counter() - started:.1f}s"
    print(format_table(rows, ["check", "result", "value", "threshold", "seconds", "detail"],
                       title="Invariant checks" + (" (quick)" if args.quick else ""), footer=[footer]))
    return EXIT_RUNTIME if failed else EXIT_OK


class CascadeArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with the usage code and suggest close command names"""

    def error(self, message):
        unknown = re.search(r"argument command: invalid choice: '?([^' ]*)'?", message)
        if unknown:
            sys.stderr.write(ErrorHandler.handle_command_not_found(unknown.group(1)))
        else:
            self.print_usage(sys.stderr)
            sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(EXIT_USAGE)


def _add_config_flags(subparser, with_arm: bool = True):
    subparser.add_argument("--config", type=str, help="Run config JSON (omitted fields take defaults)")
    subparser.add_argument(
        "--override",
        action="append",
        metavar="KEY=VALUE",
        help="Override one config field, e.g. train.steps=100 (repeatable)"
    )
    if with_arm:
        subparser.add_argument(
            "--arm",
            type=str,
            choices=["base", "ours_tf", "ours_t", "direct", "full_ft", "lowrank"],
            help="Arm to run (overrides arm.name)"
        )


def parse_args(argv=None):
    parser = CascadeArgumentParser(
        description="Self-cascade diffusion: reuse a low-resolution denoiser to sample at higher resolutions",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python main.py plan --config configs/default.json
  python main.py train --config configs/default.json --arm ours_t
  python main.py sample --config configs/default.json --checkpoint runs/default/checkpoints/step_002000.ckpt --n 4
  python main.py eval --config configs/default.json --checkpoint runs/default/checkpoints/step_002000.ckpt
  python main.py compare --config configs/reference_experiment.json
  python main.py check --quick

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
        """
    )
    subparsers = parser.add_subparsers(dest='command', help='Available commands')

    # train command
    train_parser = subparsers.add_parser(
        'train',
        help="Train the configured arm",
        description="Pretrain the base model, tune the feature upsamplers, or run a baseline arm"
    )
    _add_config_flags(train_parser)
    train_parser.add_argument("--out", type=str, help="Output directory (default: config output_dir)")
    train_parser.add_argument("--seed", type=int, help="Training seed (shorthand for --override train.seed=N)")
    train_parser.set_defaults(func=train)

    # sample command
    sample_parser = subparsers.add_parser(
        'sample',
        help="Generate images with a trained arm",
        description="Write final images and per-stage pivots as PNG with a provenance sidecar"
    )
    _add_config_flags(sample_parser)
    sample_parser.add_argument("--checkpoint", type=str, help="Checkpoint file")
    sample_parser.add_argument("--n", type=int, default=1, help="Number of images")
    sample_parser.add_argument("--seed", type=int, default=0, help="Sampling seed")
    sample_parser.add_argument("--label", type=int, help="Class label for every image")
    sample_parser.add_argument("--out", type=str, help="Output directory")
    sample_parser.set_defaults(func=sample)

    # eval command
    eval_parser = subparsers.add_parser(
        'eval',
        help="Score an arm against the held-out split",
        description="Compute proxy FID/KID, patch metrics, base consistency and count statistics"
    )
    _add_config_flags(eval_parser)
    eval_parser.add_argument("--checkpoint", type=str, help="Checkpoint file")
    eval_parser.add_argument("--n", type=int, help="Number of generated images (default: eval.n_samples)")
    eval_parser.add_argument("--seed", type=int, help="Sampling seed (default: eval.seed)")
    eval_parser.add_argument("--out", type=str, help="Directory for eval_<arm>.json and eval_reports.csv")
    eval_parser.set_defaults(func=evaluate)

    # compare command
    compare_parser = subparsers.add_parser(
        'compare',
        help="Evaluate several arms and print one table",
        description="Run eval for every arm of an experiment descriptor and write compare.csv / compare.txt"
    )
    compare_parser.add_argument("--config", type=str, help="Experiment descriptor JSON")
    compare_parser.add_argument(
        "--override",
        action="append",
        metavar="KEY=VALUE",
        help="Override one config field for every arm (repeatable)"
    )
    compare_parser.set_defaults(func=compare)

    # plan command
    plan_parser = subparsers.add_parser(
        'plan',
        help="Print the stage resolutions for the configured cascade",
        description="Show how the base resolution reaches the target resolution"
    )
    _add_config_flags(plan_parser, with_arm=False)
    plan_parser.set_defaults(func=show_plan)

    # export command
    export_parser = subparsers.add_parser(
        'export',
        help="Copy selected parameter groups into a standalone checkpoint",
        description="Export e.g. upsampler_stage_1 without the base weights"
    )
    export_parser.add_argument("--checkpoint", type=str, help="Source checkpoint")
    export_parser.add_argument("--group", action="append", required=True,
                               help="Group to export: base, upsampler_stage_<r> or adapter (repeatable)")
    export_parser.add_argument("--out", type=str, help="Destination file")
    export_parser.set_defaults(func=export)

    # check command
    check_parser = subparsers.add_parser(
        'check',
        help="Run the invariant suite",
        description="Gradient checks, schedule checks, zero-init equivalence and the freeze contract"
    )
    check_parser.add_argument("--quick", action="store_true", help="Fewer seeds and steps")
    check_parser.set_defaults(func=check)

    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)

    if not hasattr(args, 'func'):
        print("Self-cascade diffusion")
        print("=" * 50)
        print("No command provided. Use one of the following:")
        print()
        print("  python main.py plan --config configs/default.json")
        print("  python main.py train --config configs/default.json")
        print("  python main.py check --quick")
        print()
        print("For detailed help: python main.py <command> --help")
        return EXIT_USAGE

    try:
        code = args.func(args)
    except KeyboardInterrupt:
        print("\n\n⚠️  Operation interrupted by user")
        return EXIT_RUNTIME
    except Exception as e:
        sys.stderr.write(f"\n❌ Error executing command '{args.command}':\n")
        sys.stderr.write(ErrorHandler.format_error(e))
        if type(e) is ValueError:
            return EXIT_USAGE
        return exit_code_for(e)
    return code or EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
