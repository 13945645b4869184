"""Command-line entry point.

Subcommands: generate | train | eval | gradcheck | report. Exit codes:
0 success, 1 validation/usage error, 2 runtime failure.

A training run directory is self-describing:
    config.json      the exact TrainingConfig used
    manifest.ref     path of the dataset manifest the run consumed
    history.csv      per-epoch loss means and learning rate
    checkpoints/     final/ plus periodic epoch_* checkpoints
    eval/            report.json, confusion.csv, embeddings.csv
    gradcheck/       one JSON report per checked loss
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import evaluation, gradcheck as gradcheck_mod
from .datagen import DatasetSpec, Manifest, PRESET_SUBGROUPS, PRESETS, generate_dataset, get_preset
from .evaluation import SubgroupSpec
from .model import load_checkpoint
from .train import TrainingConfig, read_history, train


class CliError(Exception):
    """Validation problem; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message)


def _parse_subgroups(text: str) -> SubgroupSpec:
    values = {}
    for part in text.split(","):
        if "=" not in part:
            raise CliError(f"bad --subgroups entry {part!r}; expected name=value")
        name, value = part.split("=", 1)
        if name not in ("head", "many", "medium"):
            raise CliError(f"unknown subgroup threshold {name!r}")
        values[name] = float(value)
    return SubgroupSpec(**values)


def cmd_generate(args) -> int:
    if bool(args.preset) == bool(args.spec):
        raise CliError("exactly one of --preset or --spec is required")
    if args.preset:
        spec = get_preset(args.preset, seed=args.seed)
    else:
        with open(args.spec) as fh:
            data = json.load(fh)
        if args.seed is not None:
            data["seed"] = args.seed
        spec = DatasetSpec.from_dict(data)
    out_dir = Path(args.out)
    manifest, stats = generate_dataset(spec, out_dir)
    with open(out_dir / "stats.json", "w") as fh:
        json.dump(stats.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {stats.num_samples} images to {out_dir} "
          f"(imbalance ratio {stats.imbalance_ratio:.1f})")
    return 0


def cmd_train(args) -> int:
    config = TrainingConfig.from_json(args.config) if args.config else TrainingConfig()
    if args.seed is not None:
        config.seed = args.seed
    manifest_path = Path(args.data)
    manifest = Manifest.load(manifest_path)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.ref").write_text(str(manifest_path.resolve()) + "\n")
    result = train(config, manifest, manifest_path.parent, out_dir)
    final = result.history[-1]
    print(f"trained {config.epochs} epochs; final total loss {final['total']:.4f}; "
          f"checkpoint at {result.checkpoint_dir}")
    return 0


def _resolve_checkpoint(path: Path) -> Path:
    if (path / "meta.json").exists():
        return path
    if (path / "checkpoints" / "final" / "meta.json").exists():
        return path / "checkpoints" / "final"
    raise CliError(f"no checkpoint found under {path}")


def cmd_eval(args) -> int:
    ckpt_dir = _resolve_checkpoint(Path(args.checkpoint))
    model, _ = load_checkpoint(ckpt_dir)
    manifest_path = Path(args.data)
    manifest = Manifest.load(manifest_path)
    if args.subgroups:
        spec = _parse_subgroups(args.subgroups)
    elif args.preset_subgroups:
        if args.preset_subgroups not in PRESET_SUBGROUPS:
            raise CliError(f"no subgroup preset named {args.preset_subgroups!r}; "
                           f"available: {sorted(PRESET_SUBGROUPS)}")
        spec = SubgroupSpec(**PRESET_SUBGROUPS[args.preset_subgroups])
    else:
        spec = SubgroupSpec()
    out_dir = Path(args.out) if args.out else Path(args.checkpoint) / "eval"
    report = evaluation.evaluate_model(model, manifest, manifest_path.parent, spec)
    report.save(out_dir)
    evaluation.export_embeddings(model, manifest, manifest_path.parent,
                                 out_dir / "embeddings.csv")
    sub = report.subgroups
    fmt = lambda v: "n/a" if v is None else f"{100 * v:.2f}"
    print(f"top-1 {100 * report.overall_top1:.2f} | head {fmt(sub.head)} "
          f"many {fmt(sub.many)} medium {fmt(sub.medium)} few {fmt(sub.few)} | "
          f"majority {fmt(report.majority)} minority {fmt(report.minority)}")
    print(f"report written to {out_dir}")
    return 0


def cmd_gradcheck(args) -> int:
    if not args.all and not args.loss:
        raise CliError("pass --all or --loss NAME")
    names = sorted(gradcheck_mod.BUILDERS) if args.all else [args.loss]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    all_passed = True
    for name in names:
        report = gradcheck_mod.gradcheck(name, seed=args.seed)
        with open(out_dir / f"{name}.json", "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        status = "PASS" if report["passed"] else "FAIL"
        print(f"{status} {name}: max rel err {report['max_rel_err']:.3e} "
              f"(tolerance {report['tolerance']:.0e})")
        all_passed &= report["passed"]
    return 0 if all_passed else 2


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    lines = [f"# Run report: {run_dir.name}", ""]
    history_path = run_dir / "history.csv"
    if history_path.exists():
        history = read_history(history_path)
        lines += ["## Training", "",
                  "| epoch | lr | arb | hcm | contrastive | center | kd_all | kd_hard | total |",
                  "|---|---|---|---|---|---|---|---|---|"]
        shown = history if len(history) <= 10 else history[:3] + history[-3:]
        for row in shown:
            lines.append(
                "| {epoch} | {lr:.5f} | {arb:.4f} | {hcm:.4f} | {contrastive:.4f} "
                "| {center:.4f} | {kd_all:.4f} | {kd_hard:.4f} | {total:.4f} |".format(**row))
        lines.append("")
    report_path = run_dir / "eval" / "report.json"
    if report_path.exists():
        with open(report_path) as fh:
            rep = json.load(fh)
        fmt = lambda v: "n/a" if v is None else f"{100 * v:.2f}"
        sub = rep["subgroups"]
        lines += ["## Evaluation", "",
                  "| Head | Many | Medium | Few | Avg. |",
                  "|---|---|---|---|---|",
                  f"| {fmt(sub['head'])} | {fmt(sub['many'])} | {fmt(sub['medium'])} "
                  f"| {fmt(sub['few'])} | {fmt(sub['average'])} |",
                  "",
                  f"Majority {fmt(rep['majority'])}, minority {fmt(rep['minority'])} "
                  f"over {rep['num_test_samples']} test samples.",
                  "", "## Per-class accuracy", "",
                  "| class | accuracy |", "|---|---|"]
        for class_id, acc in enumerate(rep["per_class"]):
            lines.append(f"| {class_id} | {fmt(acc)} |")
        lines.append("")
    if len(lines) <= 2:
        raise CliError(f"nothing to report under {run_dir} (no history.csv or eval/report.json)")
    text = "\n".join(lines)
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"report written to {args.out}")
    else:
        print(text)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="remex",
                     description="Train and evaluate multi-expert classifiers on "
                                 "highly imbalanced image data.")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("generate", help="render a synthetic dataset")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named dataset preset")
    p.add_argument("--spec", help="JSON dataset spec file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("--config", help="training config JSON (defaults used if omitted)")
    p.add_argument("--data", required=True, help="manifest.jsonl path")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest's test split")
    p.add_argument("--checkpoint", required=True, help="checkpoint or run directory")
    p.add_argument("--data", required=True, help="manifest.jsonl path")
    p.add_argument("--out", help="output directory (default <checkpoint>/eval)")
    p.add_argument("--subgroups", help="threshold override, e.g. head=10000,many=1000,medium=100")
    p.add_argument("--preset-subgroups", dest="preset_subgroups",
                   help="use the named preset's scaled thresholds")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the loss gradients")
    p.add_argument("--all", action="store_true", help="check every registered loss")
    p.add_argument("--loss", choices=sorted(gradcheck_mod.BUILDERS), help="check one loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="gradcheck", help="directory for JSON reports")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="render a run directory as markdown")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--out", help="write markdown here instead of stdout")
    p.set_defaults(func=cmd_report)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return 1
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 2
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
