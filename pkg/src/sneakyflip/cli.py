"""Command-line front end.

Subcommands cover the whole pipeline: train a toy victim, quantize it, run
the attack (optionally over several seeds with a best-of summary), recount
the one-flip census from persisted records, evaluate transfer of recorded
flips onto other tasks, and regenerate the delimited exports plus figures
for an existing run directory.

Exit codes: 0 the attack drove accuracy below the threshold (or the
subcommand simply succeeded), 2 the iteration budget ran out first, 3 a
numerical failure ended the run, 64 usage errors, 65 unreadable or corrupt
input files.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .attack import (
    EXIT_CODES,
    AttackConfig,
    AttackReport,
    Ranker,
    best_report,
    census_count,
    census_label,
    distribution_rows,
    run_attack,
    transfer_eval,
)
from .bitcodec import get_format
from .bundle import AttackMode, BundleFormatError, load_bundle, quantize_int8, save_bundle
from .nnet import TRAIN_PRESETS, TaskSpec, arch_input_dim, make_task, train_toy
from .report import (
    REPORT_NAME,
    export_run,
    regenerate,
    render_figures,
    save_transfer,
    write_census_csv,
    write_transfer_csv,
)

log = logging.getLogger("sneakyflip")

EXIT_USAGE = 64
EXIT_IO = 65

CSV_SCHEMAS = """\
output files (all delimited files start with '# key=value' provenance lines):
  report.json       full audit trail of one run (deterministic given config+seed)
  flips.csv         iteration, tensor, flat_index, bit_position, old_raw, new_raw,
                    old_value, new_value, delta, grad, score, in_range,
                    range_low, range_high, accuracy_after
  census.csv        tensor, flat_index, bit_position, score, accuracy,
                    critical, skipped, error_tensor   (first-iteration sweep)
  distribution.csv  layer_index, param_kind, count    (critical flips per group)
  timings.csv       phase, seconds                    (volatile; from timings.json)
  transfer.csv      task, pre_acc, post_acc
  summary.json      per-seed outcomes and the best run (multi-seed attacks)
"""

_ATTACK_DEFAULTS = {
    "mode": "float",
    "ranker": "sneaky",
    "k": 100,
    "grad_samples": 200,
    "eval_samples": 100,
    "threshold": None,
    "max_iterations": 500,
    "seeds": "1,2,3",
    "exclude": [],
    "freeze_range": False,
    "fast_eval": 0,
    "workers": 1,
}


def _default_out() -> str:
    return os.environ.get("SNEAKYFLIP_OUT", "out")


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise ValueError(f"seeds must be a comma-separated integer list, got {text!r}")
    if not seeds:
        raise ValueError("at least one seed is required")
    return seeds


def _load_task(name_or_path: str, input_dim: int) -> TaskSpec:
    if name_or_path.endswith(".json"):
        task = TaskSpec.from_json(name_or_path)
        if task.input_dim != input_dim:
            raise ValueError(
                f"task file {name_or_path!r} has input dim {task.input_dim}, "
                f"the model expects {input_dim}"
            )
        return task
    return make_task(name_or_path, input_dim)


def _merge_attack_config(args: argparse.Namespace) -> AttackConfig:
    """Explicit flags override config-file values, which override defaults."""
    merged = dict(_ATTACK_DEFAULTS)
    if args.config:
        file_cfg = json.loads(Path(args.config).read_text())
        unknown = set(file_cfg) - set(merged)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_cfg)
    for key in merged:
        value = getattr(args, key, None)
        if value is not None and value != []:
            merged[key] = value
    seeds = merged["seeds"]
    if isinstance(seeds, str):
        seeds = _parse_seeds(seeds)
    return AttackConfig(
        mode=AttackMode(merged["mode"]),
        ranker=Ranker(merged["ranker"]),
        k=int(merged["k"]),
        grad_samples=int(merged["grad_samples"]),
        eval_samples=int(merged["eval_samples"]),
        critical_threshold=(
            None if merged["threshold"] is None else float(merged["threshold"])
        ),
        max_iterations=int(merged["max_iterations"]),
        seeds=tuple(int(s) for s in seeds),
        exclusions=tuple(merged["exclude"]),
        freeze_range=bool(merged["freeze_range"]),
        fast_eval=int(merged["fast_eval"]),
        workers=int(merged["workers"]),
    )


# ---------------------------------------------------------------------------
# Subcommands


def cmd_train_toy(args) -> int:
    from .nnet import build_arch

    arch = build_arch(args.arch)
    task = _load_task(args.task, arch_input_dim(arch))
    fmt = get_format(args.format)
    config = TRAIN_PRESETS.get(args.arch)
    if args.epochs is not None or args.lr is not None:
        config = config or TRAIN_PRESETS["mlp"]
        config = replace(
            config,
            epochs=args.epochs if args.epochs is not None else config.epochs,
            lr=args.lr if args.lr is not None else config.lr,
        )
    bundle, info = train_toy(args.arch, task, args.seed, fmt, config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_bundle(bundle, out)
    print(
        f"trained {args.arch} on {task.name} (seed {args.seed}, {fmt.name}): "
        f"eval accuracy {info['eval_accuracy']:.4f}, "
        f"final train loss {info['train_loss'][-1]:.4f}"
    )
    print(f"wrote {out}")
    return 0


def cmd_quantize(args) -> int:
    bundle = load_bundle(args.bundle)
    quantized = quantize_int8(bundle)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_bundle(quantized, out)
    n = sum(1 for m in quantized.metas if m.quantized)
    print(f"quantized {n} of {len(quantized.metas)} tensors to int8")
    print(f"wrote {out}")
    return 0


def cmd_attack(args) -> int:
    config = _merge_attack_config(args)
    bundle = load_bundle(args.bundle)
    task = _load_task(args.task, arch_input_dim(bundle.arch))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    reports = []
    for seed in config.seeds:
        report = run_attack(bundle.copy(), task, config, seed=seed)
        reports.append(report)
        run_dir = out_dir / f"seed-{seed}"
        export_run(report, run_dir)
        print(
            f"seed {seed}: pre {report.pre_acc} -> post {report.post_acc} "
            f"with {report.num_flips} flips "
            f"({report.termination.value}"
            + (f": {report.termination_detail}" if report.termination_detail else "")
            + f"), census {report.crit_1flip_label or 'n/a'}"
        )
        if args.verbose:
            for f in report.applied_flips:
                print(
                    f"    flip {f.iteration}: {f.tensor}[{f.flat_index}] "
                    f"bit {f.bit_position} {f.old_value:+.6g} -> {f.new_value:+.6g} "
                    f"accuracy {f.accuracy_after}"
                )

    best = best_report(reports)
    summary = {
        "seeds": list(config.seeds),
        "per_seed": [
            {
                "seed": r.seed,
                "pre_acc": r.pre_acc,
                "post_acc": r.post_acc,
                "num_flips": r.num_flips,
                "termination": r.termination.value,
                "exit_code": r.exit_code,
                "crit_1flip_count": r.crit_1flip_count,
                "report": f"seed-{r.seed}/{REPORT_NAME}",
            }
            for r in reports
        ],
        "best_seed": best.seed,
    }
    (out_dir / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n"
    )
    print(
        f"best: seed {best.seed}, post accuracy {best.post_acc} "
        f"after {best.num_flips} flips"
    )
    return best.exit_code


def _report_path(args) -> Path:
    if args.report:
        return Path(args.report)
    return Path(args.run) / REPORT_NAME


def cmd_census(args) -> int:
    report = AttackReport.load(_report_path(args))
    if not report.iterations:
        print("run ended before any candidate sweep; census unavailable")
        return EXIT_IO
    if args.threshold is not None:
        report.threshold = args.threshold
        report.crit_1flip_count = census_count(
            report.iterations[0].evaluated, args.threshold
        )
    table = report.iterations[0].evaluated
    count = census_count(table, report.threshold)
    if count != report.crit_1flip_count:
        print(
            f"recount mismatch: table gives {count}, "
            f"report claims {report.crit_1flip_count}"
        )
        return EXIT_IO
    print(
        f"crit_1flip_count={count} ({census_label(count)}) "
        f"at threshold {report.threshold} over {len(table)} candidates"
    )
    taxonomy = {
        name: (li, kind) for name, (li, kind) in report.config["tensors"].items()
    }
    for li, kind, n in distribution_rows(table, taxonomy, report.threshold):
        print(f"  layer {li} {kind}: {n}")
    if args.out:
        path = write_census_csv(report, args.out)
        print(f"wrote {path}")
    return 0


def cmd_transfer(args) -> int:
    report = AttackReport.load(_report_path(args))
    bundle = load_bundle(args.bundle)
    input_dim = arch_input_dim(bundle.arch)
    tasks = [_load_task(name.strip(), input_dim) for name in args.tasks.split(",")]
    results = transfer_eval(bundle, report, tasks)
    for r in results:
        print(f"{r.task}: pre {r.pre_acc} -> post {r.post_acc}")
    out_dir = Path(args.out) if args.out else (
        Path(args.run) if args.run else _report_path(args).parent
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    save_transfer(results, out_dir)
    path = write_transfer_csv(report, results, out_dir / "transfer.csv")
    print(f"wrote {path}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    paths = regenerate(run_dir)
    for key in sorted(paths):
        print(f"wrote {paths[key]}")
    if not args.no_figures:
        report = AttackReport.load(run_dir / REPORT_NAME)
        for fig in render_figures(report, run_dir):
            print(f"wrote {fig}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sneakyflip",
        description="Range-aware bit-flip attacks on toy classifiers.",
        epilog=CSV_SCHEMAS,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="chatty output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-toy", help="train a toy victim and save its bundle")
    p.add_argument("--arch", default="mlp", help="architecture preset (mlp, attn)")
    p.add_argument("--task", default="toy4", help="task name or task-spec JSON path")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--format", default="bf16", help="storage format (bf16, fp16, fp32)")
    p.add_argument("--epochs", type=int, default=None, help="override preset epochs")
    p.add_argument("--lr", type=float, default=None, help="override preset learning rate")
    p.add_argument("--out", required=True, help="manifest path to write")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("quantize", help="int8-quantize a float bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser(
        "attack",
        help="run the bit-flip attack over one or more seeds",
        epilog=CSV_SCHEMAS,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--bundle", required=True, help="victim bundle manifest")
    p.add_argument("--task", default="toy4")
    p.add_argument("--config", default=None, help="JSON config file (flags win)")
    p.add_argument("--mode", choices=[m.value for m in AttackMode], default=None)
    p.add_argument("--ranker", choices=[r.value for r in Ranker], default=None)
    p.add_argument("--k", type=int, default=None, help="candidates ranked per iteration")
    p.add_argument("--grad-samples", dest="grad_samples", type=int, default=None)
    p.add_argument("--eval-samples", dest="eval_samples", type=int, default=None)
    p.add_argument(
        "--threshold", type=float, default=None,
        help="critical accuracy threshold (default: task chance level)",
    )
    p.add_argument("--max-iterations", dest="max_iterations", type=int, default=None)
    p.add_argument("--seeds", default=None, help="comma-separated run seeds")
    p.add_argument(
        "--exclude", action="append", default=[],
        help="tensor-name glob to exclude (repeatable)",
    )
    p.add_argument(
        "--freeze-range", dest="freeze_range",
        action=argparse.BooleanOptionalAction, default=None,
        help="keep pre-attack layer ranges instead of refreshing after each flip",
    )
    p.add_argument(
        "--fast-eval", dest="fast_eval", type=int, default=None,
        help="sweep candidates on this many samples (0 = full eval split)",
    )
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", default=_default_out(), help="output directory")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser(
        "census",
        help="recount critical single flips from a persisted run",
    )
    p.add_argument("--run", default=None, help="run directory containing report.json")
    p.add_argument("--report", default=None, help="explicit report.json path")
    p.add_argument("--threshold", type=float, default=None, help="recount threshold")
    p.add_argument("--out", default=None, help="optional census CSV to write")
    p.set_defaults(func=cmd_census)

    p = sub.add_parser(
        "transfer",
        help="apply recorded flips to a fresh bundle and evaluate other tasks",
    )
    p.add_argument("--bundle", required=True, help="pre-attack victim bundle")
    p.add_argument("--run", default=None, help="run directory containing report.json")
    p.add_argument("--report", default=None, help="explicit report.json path")
    p.add_argument("--tasks", default="toy4,toy2,toy4-held")
    p.add_argument("--out", default=None, help="output directory (default: run dir)")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser(
        "report",
        help="regenerate CSVs and render figures for a run directory",
        epilog=CSV_SCHEMAS,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--run", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        return 0 if code in (0, None) else EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.command in ("census", "transfer") and not (args.run or args.report):
        print("error: one of --run or --report is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except BundleFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
