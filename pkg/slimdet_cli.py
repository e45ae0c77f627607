import sys
import json
import logging
import argparse
import textwrap
import colorama
import pandas as pd
from colorama import Fore, Style

from slimdet.checkpoint import atomic_write, dump_json, load_checkpoint, save_checkpoint
from slimdet.config import RunConfig, SlimDetConfig, load_config
from slimdet.dataset import load_dataset, generate_dataset
from slimdet.errors import ConfigError, SlimDetError, UsageError
from slimdet.optim import encode_train_log
from slimdet.pipeline import SlimmingPipeline
from slimdet.slimming import count_params

# Initialize colorama
colorama.init()

LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR"]
DEFAULT_SPARSITY_LAMBDA = 1e-4
TRAIN_LOG = "train_log.jsonl"
PRUNE_REPORT = "prune_report.json"


class CliArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of exiting."""

    def error(self, message):
        raise UsageError(message)


def status(text, color=Fore.CYAN):
    """Print a coloured status line to stderr."""
    print(f"{color}{text}{Style.RESET_ALL}", file=sys.stderr)


def print_header(text):
    """Print a formatted header."""
    print(f"\n{Fore.CYAN}{Style.BRIGHT}" + "=" * 80, file=sys.stderr)
    print(f" {text}", file=sys.stderr)
    print("=" * 80 + f"{Style.RESET_ALL}\n", file=sys.stderr)


def print_section(title):
    """Print a section title."""
    print(f"\n{Fore.YELLOW}{Style.BRIGHT}{title}{Style.RESET_ALL}", file=sys.stderr)
    print(f"{Fore.YELLOW}" + "-" * len(title) + f"{Style.RESET_ALL}", file=sys.stderr)


def print_score_bar(score, label, width=20):
    """Print a visual score bar; undefined scores are shown as n/a."""
    if score is None:
        print(f"{label.ljust(15)}: n/a", file=sys.stderr)
        return
    filled = int(score * width)
    bar = "█" * filled + "░" * (width - filled)
    print(f"{label.ljust(15)}: [{Fore.CYAN}{bar}{Style.RESET_ALL}] {score:.3f}", file=sys.stderr)


def print_table(frame: pd.DataFrame):
    print(frame.to_string(index=False), file=sys.stderr)


def emit_json(document, output_file=None):
    """Result documents go to stdout and, when requested, to a file."""
    if output_file:
        atomic_write(output_file, dump_json(document))
        status(f"Written to {output_file}", Fore.GREEN)
    print(json.dumps(document, indent=2, sort_keys=True))


def build_parser():
    parser = CliArgumentParser(
        prog="slimdet_cli.py",
        description="Small-object detector training and network slimming",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=textwrap.dedent("""
        Examples:
          # Generate a synthetic training set
          python slimdet_cli.py gen-data --seed 1 --n 2000 --out data/train

          # Baseline training, sparse training, pruning, fine-tuning
          python slimdet_cli.py train --data data/train --config config.json --out runs/base
          python slimdet_cli.py sparsify --data data/train --config config.json --lambda 1e-4 --out runs/sparse
          python slimdet_cli.py prune --ckpt runs/sparse --ratio 0.3 --out runs/pruned
          python slimdet_cli.py finetune --ckpt runs/pruned --data data/train --config config.json --out runs/tuned

          # Evaluate and compare sizes
          python slimdet_cli.py eval --ckpt runs/tuned --data data/test
          python slimdet_cli.py info --ckpt runs/tuned --baseline runs/base
        """)
    )

    common = CliArgumentParser(add_help=False)
    common.add_argument("--log-level", choices=LOG_LEVELS, help="Logging level (config log_level when omitted)")

    training = CliArgumentParser(add_help=False)
    training.add_argument("--data", required=True, help="Dataset directory")
    training.add_argument("--config", help="JSON config file (defaults when omitted)")
    training.add_argument("--out", required=True, help="Output checkpoint directory")
    training.add_argument("--epochs", type=int, help="Override train.epochs")
    training.add_argument("--lr", type=float, help="Override train.base_lr")
    training.add_argument("--batch-size", type=int, help="Override train.batch_size")
    training.add_argument("--seed", type=int, help="Override train.seed")

    subparsers = parser.add_subparsers(dest="command", help="Command to run")

    gen = subparsers.add_parser("gen-data", parents=[common], help="Generate a synthetic shapes dataset")
    gen.add_argument("--seed", type=int, default=0, help="Generator seed")
    gen.add_argument("--n", type=int, required=True, help="Number of images")
    gen.add_argument("--out", required=True, help="Output dataset directory")
    gen.add_argument("--image-size", type=int, default=96, help="Image side length in pixels")
    gen.add_argument("--small-fraction", type=float, default=0.5, help="Share of objects below 32x32 pixels")

    subparsers.add_parser("train", parents=[common, training], help="Train without the sparsity penalty")

    sparsify = subparsers.add_parser("sparsify", parents=[common, training],
                                     help="Train with the L1 penalty on batch-norm scaling factors")
    sparsify.add_argument("--lambda", dest="sparsity_lambda", type=float, help="Sparsity weight (> 0)")
    sparsify.add_argument("--ckpt", help="Start from this checkpoint instead of a fresh model")

    prune = subparsers.add_parser("prune", parents=[common], help="Remove low-|gamma| channels")
    prune.add_argument("--ckpt", required=True, help="Input checkpoint directory")
    amount = prune.add_mutually_exclusive_group(required=True)
    amount.add_argument("--ratio", type=float, help="Share of prunable channels to remove")
    amount.add_argument("--target-reduction", type=float,
                        help="Percent of trainable parameters to remove (picks the ratio)")
    prune.add_argument("--out", required=True, help="Output checkpoint directory")
    prune.add_argument("--iterations", type=int, default=1, help="Number of prune passes")

    tune = subparsers.add_parser("finetune", parents=[common, training], help="Retrain a pruned model")
    tune.add_argument("--ckpt", required=True, help="Pruned checkpoint directory")

    evaluate = subparsers.add_parser("eval", parents=[common], help="Compute mAP and size-bucketed AP")
    evaluate.add_argument("--ckpt", required=True, help="Checkpoint directory")
    evaluate.add_argument("--data", required=True, help="Dataset directory")
    evaluate.add_argument("--iou", type=float, default=0.5, help="IoU threshold")
    evaluate.add_argument("--score-threshold", type=float, default=0.05, help="Minimum detection score")
    evaluate.add_argument("--nms-iou", type=float, default=0.45, help="NMS overlap threshold")
    evaluate.add_argument("--top-k", type=int, default=100, help="Detections kept per image")
    evaluate.add_argument("--output-file", help="Also write the result document here")

    info = subparsers.add_parser("info", parents=[common], help="Parameter report of a checkpoint")
    info.add_argument("--ckpt", required=True, help="Checkpoint directory")
    info.add_argument("--baseline", help="Checkpoint to compare against")

    return parser


def make_config(args, run: RunConfig = None) -> SlimDetConfig:
    level = args.log_level or (run.log_level if run else "INFO")
    return SlimDetConfig(work_dir=getattr(args, "out", None) or ".", run=run,
                         log_level=getattr(logging, level))


def load_run_config(args, **extra) -> RunConfig:
    overrides = {
        "train.epochs": args.epochs,
        "train.base_lr": args.lr,
        "train.batch_size": args.batch_size,
        "train.seed": args.seed,
    }
    overrides.update(extra)
    return load_config(args.config, overrides)


def check_resolution(dataset, input_size):
    if dataset.image_size != input_size:
        raise ConfigError(f"arch.input_size is {input_size} but the dataset images are {dataset.image_size} pixels")


def save_training_output(args, pipeline, graph, result, stage):
    metadata = pipeline.metadata(stage, epochs=len(result.log), steps=result.steps,
                                 final_loss=result.log[-1]["loss"] if result.log else None)
    save_checkpoint(args.out, graph, result.params, metadata,
                    extra_files={TRAIN_LOG: encode_train_log(result.log)})
    if result.log:
        print_section("TRAINING LOG")
        print_table(pd.DataFrame(result.log)[["epoch", "loss", "penalty", "lr", "gamma_median"]])
    status(f"Checkpoint written to {args.out}", Fore.GREEN)
    emit_json({"checkpoint": args.out, "stage": stage, "steps": result.steps, "log": result.log})


def cmd_gen_data(args):
    make_config(args)
    status(f"Generating {args.n} images with seed {args.seed}...")
    manifest = generate_dataset(args.out, args.seed, args.n, args.image_size, args.small_fraction)
    areas = [(o["box"][2] - o["box"][0]) * (o["box"][3] - o["box"][1])
             for r in manifest.records for o in r["objects"]]
    small = sum(1 for a in areas if a < 32 * 32)
    emit_json({
        "path": args.out,
        "count": manifest.count,
        "objects": len(areas),
        "small_share": small / len(areas),
        "images_sha256": manifest.images_sha256,
    })
    return 0


def cmd_train(args, sparse=False):
    extra = {}
    if sparse:
        lam = args.sparsity_lambda
        if lam is not None and lam <= 0:
            raise UsageError("--lambda must be > 0")
        extra["train.sparsity_lambda"] = lam
    run = load_run_config(args, **extra)
    if sparse and run.train.sparsity_lambda <= 0:
        run.train.sparsity_lambda = DEFAULT_SPARSITY_LAMBDA
    config = make_config(args, run)
    pipeline = SlimmingPipeline(config)
    dataset = load_dataset(args.data)

    graph = params = None
    if sparse and args.ckpt:
        checkpoint = load_checkpoint(args.ckpt)
        graph, params = checkpoint.graph, checkpoint.params
    check_resolution(dataset, graph.input_size if graph else run.arch.input_size)

    stage = "sparsify" if sparse else "train"
    print_header(f"{stage.upper()} on {args.data}")
    lam = run.train.sparsity_lambda if sparse else 0.0
    graph, result = pipeline.train(dataset, graph, params, sparsity_lambda=lam)
    save_training_output(args, pipeline, graph, result, stage)
    return 0


def cmd_prune(args):
    config = make_config(args)
    checkpoint = load_checkpoint(args.ckpt)
    pipeline = SlimmingPipeline(config)
    target = f"ratio {args.ratio}" if args.ratio is not None else f"-{args.target_reduction:g}% parameters"
    print_header(f"PRUNE {args.ckpt} at {target}")
    outcome = pipeline.prune(checkpoint.graph, checkpoint.params, args.ratio, args.iterations,
                             args.target_reduction)

    metadata = dict(checkpoint.metadata)
    metadata.update({"stage": "prune", "source": args.ckpt, "prune": {
        "requested_ratio": outcome.report["requested_ratio"],
        "realized_ratio": outcome.report["realized_ratio"],
        "iterations": args.iterations,
        "target_reduction_pct": args.target_reduction,
    }})
    save_checkpoint(args.out, outcome.graph, outcome.params, metadata,
                    extra_files={PRUNE_REPORT: dump_json(outcome.report)})

    print_section("CHANNELS")
    print_table(pd.DataFrame(
        [(node, counts["kept"], counts["dropped"]) for node, counts in outcome.report["nodes"].items()],
        columns=["node", "kept", "dropped"]))
    status(f"Pruned checkpoint written to {args.out}", Fore.GREEN)
    emit_json(outcome.report)
    return 0


def cmd_finetune(args):
    run = load_run_config(args)
    config = make_config(args, run)
    pipeline = SlimmingPipeline(config)
    checkpoint = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    check_resolution(dataset, checkpoint.graph.input_size)
    print_header(f"FINETUNE {args.ckpt}")
    result = pipeline.finetune(checkpoint.graph, checkpoint.params, dataset)
    save_training_output(args, pipeline, checkpoint.graph, result, "finetune")
    return 0


def cmd_eval(args):
    config = make_config(args)
    pipeline = SlimmingPipeline(config)
    checkpoint = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    check_resolution(dataset, checkpoint.graph.input_size)
    print_header(f"EVAL {args.ckpt} on {args.data}")
    summary = pipeline.evaluate(checkpoint.graph, checkpoint.params, dataset, args.iou,
                                args.score_threshold, args.nms_iou, args.top_k)

    print_section("AVERAGE PRECISION")
    print_score_bar(summary["map"], f"mAP@{args.iou:g}")
    for name, ap in summary["per_class"].items():
        print_score_bar(ap, name)
    for bucket in ("small", "medium", "large"):
        print_score_bar(summary[f"ap_{bucket}"], f"AP {bucket}")
    emit_json(summary, args.output_file)
    return 0


def cmd_info(args):
    make_config(args)
    checkpoint = load_checkpoint(args.ckpt)
    report = count_params(checkpoint.graph, checkpoint.params)
    document = {
        "checkpoint": args.ckpt,
        "stage": checkpoint.metadata.get("stage"),
        "trainable": report.trainable,
        "buffers": report.buffers,
        "byte_size": report.byte_size,
        "size_mb": report.byte_size / 2 ** 20,
    }
    rows = [("checkpoint", report.trainable, document["size_mb"])]
    if args.baseline:
        base = count_params(load_checkpoint(args.baseline).graph)
        document["baseline_trainable"] = base.trainable
        document["param_reduction_pct"] = 100.0 * (1.0 - report.trainable / base.trainable)
        document["byte_reduction_pct"] = 100.0 * (1.0 - report.byte_size / base.byte_size)
        rows.insert(0, ("baseline", base.trainable, base.byte_size / 2 ** 20))

    print_header(f"INFO {args.ckpt}")
    print_section("PARAMETERS PER NODE")
    print_table(report.to_frame())
    print_section("SUMMARY")
    print_table(pd.DataFrame(rows, columns=["model", "parameters", "size_mb"]))
    emit_json(document)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sparsify": lambda args: cmd_train(args, sparse=True),
    "prune": cmd_prune,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "info": cmd_info,
}


def report_error(kind, code, message):
    """Single machine-parsable error line on stderr."""
    print(f"error kind={kind} code={code} message={json.dumps(message)}", file=sys.stderr)


def run(argv=None):
    """
    Execute one subcommand.

    Args:
        argv: Arguments without the program name (sys.argv[1:] when None)

    Returns:
        Exit status: 0 success, 1 usage/config error, 2 data or format error, 3 numerical failure
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        return COMMANDS[args.command](args)
    except SlimDetError as e:
        logging.getLogger("SlimDet").debug("command failed", exc_info=True)
        report_error(type(e).__name__, e.exit_code, str(e))
        return e.exit_code
    except OSError as e:
        report_error(type(e).__name__, 2, str(e))
        return 2


def main():
    """Main function for command-line usage."""
    sys.exit(run())


if __name__ == "__main__":
    main()
