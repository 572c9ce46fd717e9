"""Command-line front end.

Subcommands: train, eval, predict, bench, validate, gentoy.  Config files
are JSON with up to three sections ("model", "train", "decode") whose keys
mirror the corresponding config dataclasses exactly; unknown sections or
keys are errors rather than silently ignored, so sweep typos surface
immediately.
"""

import argparse
import dataclasses
import json
import struct
import sys
from pathlib import Path

from .bench import bench_latency
from .data import (
    build_vocab,
    default_toy_grammar,
    gen_toy,
    read_tsv,
    validate_tsv,
    write_tsv,
)
from .decoding import DecodeConfig, decode_ar, decode_nar
from .model import AR, NAR, Model, ModelConfig
from .training import TrainConfig, evaluate, fit, write_history

_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "decode": DecodeConfig}


class ConfigError(ValueError):
    pass


def _build_section(cls, data: dict, section: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(
            f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}"
        )
    kwargs = {}
    for key, value in data.items():
        if isinstance(value, list):  # JSON arrays back kernel tuples
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def load_config(path) -> dict:
    """Parse a JSON config file into instantiated config objects."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    out = {}
    for section, cls in _SECTIONS.items():
        if section in raw:
            if not isinstance(raw[section], dict):
                raise ConfigError(f"section [{section}] must be a JSON object")
            out[section] = _build_section(cls, raw[section], section)
    return out


def _emit(payload: dict, out_path) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out_path:
        Path(out_path).write_text(text + "\n", encoding="utf-8")
    print(text)


def _cmd_train(args) -> int:
    sections = load_config(args.config) if args.config else {}
    model_cfg = sections.get("model", ModelConfig())
    train_cfg = sections.get("train", TrainConfig())
    if args.mode:
        variant = NAR if args.mode == "nar" else AR
        model_cfg = dataclasses.replace(model_cfg, variant=variant)
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    train_path, val_path = args.data
    train_set = read_tsv(train_path)
    val_set = read_tsv(val_path)
    vocab = build_vocab(train_set)
    model = Model.init(model_cfg, vocab, seed=train_cfg.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot, history = fit(
        model, train_set, val_set, train_cfg, history_path=out_dir / "history.jsonl"
    )
    (out_dir / "model.ckpt").write_bytes(snapshot.model_bytes)
    _emit(
        {
            "best_epoch": snapshot.epoch,
            "best_val_em": snapshot.val_em,
            "epochs_run": len(history),
            "params": model.count_parameters(),
            "snapshot": str(out_dir / "model.ckpt"),
            "history": str(out_dir / "history.jsonl"),
        },
        None,
    )
    return 0


def _cmd_eval(args) -> int:
    model = Model.load(args.snapshot)
    dataset = read_tsv(args.data)
    report = evaluate(model, dataset, k=args.k)
    _emit(report, args.out)
    return 0


def _cmd_predict(args) -> int:
    model = Model.load(args.snapshot)
    sections = load_config(args.config) if args.config else {}
    cfg = sections.get("decode", DecodeConfig())
    if args.k is not None:
        cfg = dataclasses.replace(cfg, k=args.k)
    lines = [
        ln.strip() for ln in Path(args.data).read_text(encoding="utf-8").splitlines()
    ]
    records = []
    for line in lines:
        if not line:
            continue
        tokens = tuple(line.split())
        if model.config.variant == NAR:
            result = decode_nar(model, tokens, cfg)
        else:
            result = decode_ar(model, tokens, cfg)
        records.append(
            {
                "source": line,
                "best": result.best.text,
                "score": result.best.score,
                "length": result.best.length,
                "length_prob": result.best.length_prob,
                "candidates": [
                    {
                        "tree": c.text,
                        "length": c.length,
                        "length_prob": c.length_prob,
                        "score": c.score,
                    }
                    for c in result.candidates
                ],
            }
        )
    text = "\n".join(json.dumps(r, sort_keys=True) for r in records)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def _cmd_bench(args) -> int:
    model = Model.load(args.snapshot)
    dataset = read_tsv(args.data)
    sections = load_config(args.config) if args.config else {}
    cfg = sections.get("decode", DecodeConfig())
    if args.k is not None:
        cfg = dataclasses.replace(cfg, k=args.k)
    report = bench_latency(model, dataset, cfg, warmup=args.warmup, reps=args.reps)
    _emit(report.to_dict(), args.out)
    return 0


def _cmd_validate(args) -> int:
    report = validate_tsv(args.data)
    for line_no, message in report.issues:
        print(f"line {line_no}: {message}", file=sys.stderr)
    print(f"{len(report.issues)} bad rows out of {report.n_rows}")
    return 0 if report.ok else 1


def _cmd_gentoy(args) -> int:
    examples = gen_toy(default_toy_grammar(), seed=args.seed, n=args.n)
    write_tsv(args.out, examples)
    print(f"wrote {len(examples)} examples to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="narparse",
        description="Train, evaluate, and benchmark span-copying semantic parsers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a model from TSV data")
    train.add_argument("--config", help="JSON config with model/train sections")
    train.add_argument(
        "--data", nargs=2, required=True, metavar=("TRAIN", "VAL"),
        help="train and validation TSV paths",
    )
    train.add_argument("--out", required=True, help="output directory")
    train.add_argument("--mode", choices=("nar", "ar"), help="override model variant")
    train.add_argument("--seed", type=int, help="override training seed")
    train.set_defaults(fn=_cmd_train)

    ev = sub.add_parser("eval", help="exact-match metrics on a TSV dataset")
    ev.add_argument("--snapshot", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--k", type=int, default=5, help="length beam size")
    ev.add_argument("--out", help="also write the report JSON here")
    ev.set_defaults(fn=_cmd_eval)

    pred = sub.add_parser("predict", help="decode utterances (one per line)")
    pred.add_argument("--snapshot", required=True)
    pred.add_argument("--data", required=True, help="text file of utterances")
    pred.add_argument("--config", help="JSON config with a decode section")
    pred.add_argument("--k", type=int, help="length beam size")
    pred.add_argument("--out", help="also write JSONL records here")
    pred.set_defaults(fn=_cmd_predict)

    bench = sub.add_parser("bench", help="latency percentiles by target length")
    bench.add_argument("--snapshot", required=True)
    bench.add_argument("--data", required=True)
    bench.add_argument("--config", help="JSON config with a decode section")
    bench.add_argument("--k", type=int, help="length beam size")
    bench.add_argument("--reps", type=int, default=20)
    bench.add_argument("--warmup", type=int, default=5)
    bench.add_argument("--out", help="also write the report JSON here")
    bench.set_defaults(fn=_cmd_bench)

    val = sub.add_parser("validate", help="row-level TSV validation report")
    val.add_argument("--data", required=True)
    val.set_defaults(fn=_cmd_validate)

    gen = sub.add_parser("gentoy", help="generate toy-grammar TSV data")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--n", type=int, default=100)
    gen.add_argument("--out", required=True)
    gen.set_defaults(fn=_cmd_gentoy)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, struct.error) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
