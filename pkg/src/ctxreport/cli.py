"""Command line: ``ctxreport {gen-data,train,generate,evaluate,ablate}``.

Failures print one line ``error: <kind>: <message>`` on stderr and exit
nonzero (2 for usage errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .autodiff import ContractError
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, resolve
from .encoder import FUSIONS
from .model import DECODER_MODES
from .synthetic import DatasetFormatError, DatasetSplit, SyntheticSpec, generate, read_dataset, write_dataset

ABLATION_ORDER = ("none", "sum", "mul", "average", "lstm-context")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {v}")
    return v


def _run_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run settings (override the config file)")
    g.add_argument("--config", help="flat key = value settings file")
    g.add_argument("--embed-dim", dest="embed_dim", type=int)
    g.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--max-len", dest="max_len", type=int)
    g.add_argument("--beam-k", dest="beam_k", type=int)
    g.add_argument("--dropout", type=float)
    g.add_argument("--fusion", choices=FUSIONS)
    g.add_argument("--decoder-mode", dest="decoder_mode", choices=DECODER_MODES)
    g.add_argument("--length-norm", dest="length_norm", action="store_const", const=True)
    g.add_argument("--seed", type=int)


_RUN_KEYS = ("embed_dim", "hidden_dim", "lr", "epochs", "batch_size", "max_len", "beam_k", "dropout",
             "fusion", "decoder_mode", "length_norm", "seed", "data", "out")


def _run_config(args) -> RunConfig:
    cli = {k: getattr(args, k, None) for k in _RUN_KEYS}
    return resolve(cli, getattr(args, "config", None))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctxreport", description="Keyword-conditioned report generation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset (JSONL)")
    d = SyntheticSpec()
    g.add_argument("--out", required=True)
    g.add_argument("--samples", type=_positive, default=d.num_samples)
    g.add_argument("--diseases", type=_positive, default=d.num_diseases)
    g.add_argument("--feature-dim", type=_positive, default=d.feature_dim)
    g.add_argument("--noise-std", type=float, default=d.noise_std)
    g.add_argument("--keyword-coverage", type=float, default=d.keyword_coverage)
    g.add_argument("--keywords-min", type=int, default=d.keywords_per_sample[0])
    g.add_argument("--keywords-max", type=int, default=d.keywords_per_sample[1])
    g.add_argument("--feature-scale", type=float, default=d.feature_scale)
    g.add_argument("--seed", type=int, default=d.seed)

    t = sub.add_parser("train", help="train a model and write checkpoint, vocabularies and loss trace")
    t.add_argument("--data", help="dataset JSONL (or $CTXREPORT_DATA)")
    t.add_argument("--out", help="output directory (or $CTXREPORT_OUT)")
    _run_options(t)

    gen = sub.add_parser("generate", help="write one generated report per sample of a split")
    gen.add_argument("--checkpoint", required=True)
    gen.add_argument("--data", help="dataset JSONL (or $CTXREPORT_DATA)")
    gen.add_argument("--split", choices=("train", "val", "test"), default="test")
    gen.add_argument("--out", required=True, help="candidates JSONL")
    gen.add_argument("--beam-k", dest="beam_k", type=_positive)
    gen.add_argument("--max-len", dest="max_len", type=int)
    gen.add_argument("--greedy", action="store_true", help="arg-max decoding instead of beam search")
    gen.add_argument("--length-norm", dest="length_norm", action="store_const", const=True)

    e = sub.add_parser("evaluate", help="score candidates against a split's reports")
    e.add_argument("--candidates", required=True)
    e.add_argument("--data", help="dataset JSONL (or $CTXREPORT_DATA)")
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--out", help="also write the metrics JSON here")

    a = sub.add_parser("ablate", help="train and score every fusion strategy with one shared seed")
    a.add_argument("--data", help="dataset JSONL (or $CTXREPORT_DATA)")
    a.add_argument("--out", help="output directory (or $CTXREPORT_OUT)")
    a.add_argument("--strategies", default=",".join(ABLATION_ORDER))
    a.add_argument("--jobs", type=_positive, default=1, help="worker processes")
    _run_options(a)
    return parser


def _need(value, what: str):
    if not value:
        raise UsageError(f"{what} is required")
    return value


def _read(path) -> DatasetSplit:
    if not Path(path).exists():
        raise FileNotFoundError(f"dataset {path} not found")
    return read_dataset(path)


def cmd_gen_data(args) -> None:
    spec = SyntheticSpec(args.samples, args.diseases, args.feature_dim, args.noise_std, args.keyword_coverage,
                         (args.keywords_min, args.keywords_max), args.feature_scale, args.seed)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    split = generate(spec)
    write_dataset(split, args.out)
    print(json.dumps(split.manifest, sort_keys=True))


def cmd_train(args) -> None:
    cfg = _run_config(args)
    split = _read(_need(cfg.data, "--data"))
    out = Path(_need(cfg.out, "--out"))
    model = pipeline.train_model(cfg, split.train)
    ckpt = pipeline.save_model(model, cfg, out)
    (out / pipeline.TRACE).write_text(json.dumps(model.trace.to_dict(), indent=2) + "\n")
    print(json.dumps({"checkpoint": str(ckpt), "initial_loss": model.trace.initial_loss,
                      "final_loss": model.trace.epoch_loss[-1], "uniform_loss": model.trace.uniform_loss}))


def cmd_generate(args) -> None:
    model, run = pipeline.load_model(args.checkpoint)
    cfg = resolve({"data": args.data})
    split = _read(_need(cfg.data, "--data"))
    k = args.beam_k or run.get("beam_k", 3)
    max_len = args.max_len or run.get("max_len", 50)
    length_norm = args.length_norm if args.length_norm is not None else run.get("length_norm", False)
    samples = dict(split.items())[args.split]
    records = pipeline.generate_reports(model, samples, k, max_len, args.greedy, length_norm)
    Path(args.out).write_text("".join(json.dumps(r) + "\n" for r in records))


def _read_candidates(path) -> list[dict]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(path, lineno, f"malformed JSON ({exc.msg})") from None
        if not isinstance(rec, dict) or "id" not in rec or "report" not in rec:
            raise DatasetFormatError(path, lineno, "candidate needs 'id' and 'report'")
        out.append(rec)
    return out


def cmd_evaluate(args) -> None:
    cfg = resolve({"data": args.data})
    split = _read(_need(cfg.data, "--data"))
    scores = pipeline.evaluate_reports(_read_candidates(args.candidates), dict(split.items())[args.split])
    text = json.dumps(scores, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


def _ablation_cell(cfg: RunConfig, data_path: str) -> dict:
    split = read_dataset(data_path)
    return pipeline.run_strategy(cfg, split.train, split.test)


def cmd_ablate(args) -> None:
    cfg = _run_config(args)
    data = _need(cfg.data, "--data")
    out = Path(_need(cfg.out, "--out"))
    _read(data)
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    bad = [s for s in strategies if s not in FUSIONS]
    if bad or not strategies:
        raise UsageError(f"unknown fusion strategies {bad}; choose from {FUSIONS}")
    cells = [replace(cfg, fusion=s) for s in strategies]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            rows = list(pool.map(_ablation_cell, cells, [data] * len(cells)))
    else:
        rows = [_ablation_cell(c, data) for c in cells]
    out.mkdir(parents=True, exist_ok=True)
    report = {"settings": cfg.echo(), "rows": rows}
    (out / "ablation.json").write_text(json.dumps(report, indent=2) + "\n")
    table = pipeline.markdown_table(rows)
    (out / "ablation.md").write_text(table)
    print(table, end="")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: usage: {_one_line(exc)}", file=sys.stderr)
        return 2
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: usage: {_one_line(exc)}", file=sys.stderr)
        return 2
    except (FileNotFoundError, DatasetFormatError, CheckpointError) as exc:
        print(f"error: file: {_one_line(exc)}", file=sys.stderr)
        return 1
    except ContractError as exc:
        print(f"error: contract: {_one_line(exc)}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything else still gets the one-line prefix
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
