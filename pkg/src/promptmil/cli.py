"""Command-line entry point: ``promptmil <subcommand> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 data error,
4 numeric failure (non-finite loss or gradient).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .config import MODE_ALIASES, ConfigError, ExperimentConfig, default_config, load_config, to_text
from .experiment import (
    CHECKPOINT_NAME, REPORT_NAME, NumericError, build_model, format_record, load_data, load_model,
    run_training, seed_fingerprint,
)
from .optim import NonFiniteGradient
from .synth import (
    BagFormatError, SpecError, dataset_fingerprint, generate_dataset, make_bag, write_dataset,
)
from .trainer import PROMPT_MIL, Trainer, bench_strategies

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class Reporter:
    """Writes one JSON record per line to stdout and, optionally, a file."""

    def __init__(self, path=None, stream=None):
        self.stream = stream if stream is not None else sys.stdout
        self.file = open(path, "w") if path is not None else None

    def __call__(self, rec: dict) -> None:
        line = format_record(rec)
        print(line, file=self.stream, flush=True)
        if self.file is not None:
            self.file.write(line + "\n")
            self.file.flush()

    def close(self) -> None:
        if self.file is not None:
            self.file.close()


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if getattr(args, "mode", None):
        cfg = cfg.with_mode(args.mode)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "out", None):
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    cfg.validate()
    return cfg


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_print_config(args) -> int:
    sys.stdout.write(to_text(resolve_config(args)))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    spec = cfg.data
    spec.validate()
    dataset = generate_dataset(spec)
    manifest = write_dataset(dataset, cfg.out_dir, spec)
    print(format_record({"record": "dataset", "manifest": str(manifest),
                         "spec_fingerprint": spec.fingerprint(),
                         "data_fingerprint": dataset_fingerprint(dataset),
                         **{f"n_{k}": len(v) for k, v in dataset.items()}}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(cfg)
    report = Reporter(out / REPORT_NAME)
    try:
        run_training(cfg, out_dir=out, emit=report)
    finally:
        report.close()
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint) if args.checkpoint else None
    if ckpt is None:
        ckpt = Path(resolve_config(args).out_dir) / CHECKPOINT_NAME
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model, cfg = load_model(ckpt)
    if args.config:
        # data location may differ from training time; the model comes from the checkpoint
        given = load_config(args.config)
        cfg = dataclasses.replace(cfg, data=given.data, data_path=given.data_path)
    dataset = load_data(cfg)
    if args.split not in dataset or not dataset[args.split]:
        raise FileNotFoundError(f"split {args.split!r} has no bags")
    stats = Trainer(model, cfg.train).evaluate(dataset[args.split], args.split)
    print(format_record({"record": "eval", "checkpoint": str(ckpt), **stats}))
    return EXIT_OK


def cmd_bench_mem(args) -> int:
    cfg = resolve_config(args)
    model = build_model(cfg)
    spec = cfg.data
    bags = []
    for i, n in enumerate(args.sizes):
        s = dataclasses.replace(spec, n_min=n, n_max=n)
        bags.append(make_bag(s, y=1 % spec.num_classes, bag_id=i))
    report = Reporter()
    report({"record": "census", "mode": cfg.mode, **model.census()})
    for row in bench_strategies(bags, model, cfg.train.instance_batch_size, args.repeats):
        report({"record": "bench", **row.record()})
    return EXIT_OK


def cmd_ablate_k(args) -> int:
    base = resolve_config(args).with_mode(PROMPT_MIL)
    if any(k < 1 for k in args.ks):
        raise ConfigError("ablate-k needs every k >= 1")
    out = _out_dir(base)
    dataset = load_data(base)
    data_fp = dataset_fingerprint(dataset)
    rows = []
    for k in args.ks:
        cfg = dataclasses.replace(base, model=dataclasses.replace(base.model, num_prompts=k),
                                  out_dir=str(out / f"k{k}"))
        sub = _out_dir(cfg)
        report = Reporter(sub / REPORT_NAME, stream=sys.stderr)
        try:
            test = run_training(cfg, dataset=dataset, out_dir=sub, emit=report)
        finally:
            report.close()
        rows.append({"record": "ablate_k", "k": k, "accuracy": test["accuracy"],
                     "auroc": test["auroc"], "loss": test["loss"],
                     "data_fingerprint": data_fp, "seed_fingerprint": seed_fingerprint(cfg)})
    summary = Reporter(out / "ablate_k.jsonl")
    try:
        for row in rows:
            summary(row)
    finally:
        summary.close()
    print(f"{'k':>3} {'accuracy':>9} {'auroc':>7}", file=sys.stderr)
    for row in rows:
        auc = "n/a" if row["auroc"] is None else f"{row['auroc']:.4f}"
        print(f"{row['k']:>3} {row['accuracy']:>9.4f} {auc:>7}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptmil", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, mode=True):
        p.add_argument("--config", metavar="PATH", help="experiment config file")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", metavar="DIR", help="output directory")
        if mode:
            p.add_argument("--mode", choices=sorted(MODE_ALIASES), help="training mode")
        return p

    common(sub.add_parser("print-config", help="print the resolved config"))
    common(sub.add_parser("gen-data", help="write a synthetic dataset"), mode=False)
    common(sub.add_parser("train", help="train and evaluate one model"))
    ev = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    ev.add_argument("--checkpoint", metavar="PATH")
    ev.add_argument("--split", default="test", choices=("train", "val", "test"))
    bm = common(sub.add_parser("bench-mem", help="memory/speed of the two strategies"))
    bm.add_argument("--sizes", type=_int_list, default=[64, 128, 256])
    bm.add_argument("--repeats", type=int, default=1)
    ak = common(sub.add_parser("ablate-k", help="train one model per prompt count"), mode=False)
    ak.add_argument("--ks", type=_int_list, default=[1, 2, 3])
    return parser


COMMANDS = {"print-config": cmd_print_config, "gen-data": cmd_gen_data, "train": cmd_train,
            "eval": cmd_eval, "bench-mem": cmd_bench_mem, "ablate-k": cmd_ablate_k}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, SpecError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, NotADirectoryError, BagFormatError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, NonFiniteGradient, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
