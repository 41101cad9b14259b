"""Command-line entry point: ``insdel {gen-data,train,eval,grad-check}``.

Exit codes: 0 success, 1 usage/config/I-O error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .autodiff import NumericError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, load_config
from .evaluation import (
    MODES,
    DecodeOptions,
    OracleInserter,
    ParamsDeleter,
    ParamsInserter,
    evaluate,
    render_trace_file,
)
from .gradcheck import run_all
from .rng import stream
from .tasks import TASKS, DatasetParseError, TaskConfig, generate, read_dataset, write_dataset
from .training import train_loop

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for numeric failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def cmd_gen_data(args) -> int:
    config = TaskConfig(task=args.task, min_n=args.min_n, max_n=args.max_n, shift=args.shift,
                        count=args.count, seed=args.seed)
    examples = generate(config, stream(args.seed, "data", args.task))
    write_dataset(args.out, examples)
    print(f"wrote {len(examples)} examples (task={args.task}, seed={args.seed}) to {args.out}")
    return EXIT_OK


def _ckpt_name(step: int) -> str:
    return f"ckpt-{step:07d}.idt"


def _truncate_metrics(path: Path, step: int) -> None:
    if not path.exists():
        return
    kept = [line for line in path.read_text(encoding="utf-8").splitlines(keepends=True)
            if json.loads(line)["step"] <= step]
    path.write_text("".join(kept), encoding="utf-8")


def cmd_train(args) -> int:
    run = load_config(args.config)
    dataset = read_dataset(args.train_data)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"

    state = None
    if args.resume:
        model_config, _, state = load_checkpoint(args.resume)
        if model_config != run.model:
            raise ConfigError(f"{args.resume}: model config differs from {args.config or 'defaults'}")
        if state.seed != run.train.seed:
            raise ConfigError(f"{args.resume}: checkpoint seed {state.seed} != train.seed {run.train.seed}")
        _truncate_metrics(metrics_path, state.step)
    else:
        metrics_path.write_text("", encoding="utf-8")
    (out / "config.txt").write_text(run.to_text(), encoding="utf-8")

    with open(metrics_path, "a", encoding="utf-8") as metrics:
        def on_metrics(record):
            metrics.write(json.dumps(record, sort_keys=True) + "\n")
            metrics.flush()

        def on_checkpoint(st):
            save_checkpoint(out / _ckpt_name(st.step), run.model, run.train, st)
            if st.step == run.train.steps:
                save_checkpoint(out / "final.idt", run.model, run.train, st)

        state = train_loop(dataset, run.model, run.train, state, on_metrics, on_checkpoint)
    print(f"trained to step {state.step}; checkpoints in {out}")
    return EXIT_OK


def _never_delete(canvas):
    return np.zeros(len(canvas))


def cmd_eval(args) -> int:
    if args.ckpt is None and not args.oracle:
        raise UsageError("eval: --ckpt is required unless --oracle is given")
    dataset = read_dataset(args.data)
    if not dataset:
        raise UsageError(f"eval: {args.data} has no examples")
    options = DecodeOptions(mode=args.mode, max_iterations=args.max_iterations,
                            deletion_threshold=args.threshold, trace=args.trace is not None)
    model_config = deleter = inserter = None
    if args.ckpt is not None:
        model_config, _, state = load_checkpoint(args.ckpt)
        inserter = ParamsInserter(state.ins, model_config)
        deleter = ParamsDeleter(state.dele, model_config)
    if args.oracle:
        inserter_for = OracleInserter.for_example
        deleter = deleter or _never_delete
    else:
        inserter_for = lambda ex: inserter  # noqa: E731
    traces: list = []
    report = evaluate(dataset, inserter_for, deleter, options, model_config, oracle=args.oracle, traces=traces)
    if args.trace:
        Path(args.trace).write_text(render_trace_file(dataset, traces), encoding="utf-8")
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    failed = []
    for r in run_all(args.seed):
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:34s} rel_err={r.error:.3e} (< {r.tolerance:g})")
        if not r.passed:
            failed.append(r.name)
    if failed:
        print("gradient check failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_NUMERIC
    print("gradient check passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="insdel", description="Insertion-deletion transformer on toy translation tasks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a task dataset (TSV)")
    p.add_argument("--task", required=True, choices=TASKS)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-n", type=int)
    p.add_argument("--max-n", type=int)
    p.add_argument("--shift", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train both decoders jointly")
    p.add_argument("--config", help="key=value run config; defaults when omitted")
    p.add_argument("--train-data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="decode a dataset and print a JSON report")
    p.add_argument("--ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=MODES, default="ins-del")
    p.add_argument("--trace", metavar="FILE", help="write per-example decode traces here")
    p.add_argument("--oracle", action="store_true", help="use the span-centre oracle instead of the insertion model")
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference check of every op and the combined loss")
    p.add_argument("--size", choices=("small",), default="small")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, CheckpointError, DatasetParseError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
