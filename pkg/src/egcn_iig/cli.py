"""Command-line entry point: ``egcn-iig <command> ...``.

Failures print one line ``error: category=<name> message=<text>`` to stderr and
exit with a nonzero code.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from importlib import resources
from dataclasses import replace
from pathlib import Path

from .accounting import count_costs
from .checkpoint import CheckpointError
from .gradcheck import LAYERS, TOLERANCE
from .gradcheck import run as run_gradcheck
from .model import InteractionModel, ModelConfig, scale_config
from .skeleton import (
    CATALOGS,
    Corpus,
    SkeletonFormatError,
    generate_synthetic_clip,
    prepare_clip,
    read_corpus,
    read_skeleton_file,
    serialize_skeleton,
    write_corpus,
)
from .tensor import ShapeError
from .train import (
    TrainConfig,
    TrainingDivergence,
    evaluate,
    load_config,
    load_data,
    load_model,
    metrics_line,
    metrics_record,
    save_model,
    split_corpus,
    train,
)

EXIT_CODES = {"usage": 2, "io": 3, "format": 4, "config": 5, "checkpoint": 6, "divergence": 7, "gradcheck": 8, "data": 9}

ABLATION_SUBSETS = (("A",), ("B",), ("C",), ("A", "B"), ("A", "C"), ("B", "C"), ("A", "B", "C"))


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def default_config_path(name: str = "tiny.toml") -> Path:
    return Path(str(resources.files("egcn_iig") / "configs" / name))


def _configs(path) -> tuple[ModelConfig, TrainConfig]:
    try:
        return load_config(path or default_config_path())
    except FileNotFoundError as e:
        raise CliError("io", f"config not found: {e.filename}") from e
    except (ValueError, TypeError) as e:
        raise CliError("config", str(e)) from e


def _read_corpus(path) -> Corpus:
    try:
        return read_corpus(path)
    except FileNotFoundError as e:
        raise CliError("io", f"data file not found: {e.filename}") from e


# commands


def cmd_synth(args) -> int:
    if args.catalog not in CATALOGS:
        raise CliError("usage", f"unknown catalog {args.catalog!r}")
    if not 1 <= args.classes <= len(CATALOGS[args.catalog]):
        raise CliError("usage", f"catalog {args.catalog!r} has {len(CATALOGS[args.catalog])} classes")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for k in range(args.clips_per_class):
        for c in range(args.classes):
            clip = generate_synthetic_clip(c, args.seed * 100_003 + k, args.catalog)
            (out / clip.name).write_text(serialize_skeleton(clip))
            count += 1
    print(f"wrote {count} clips to {out}")
    return 0


def cmd_preprocess(args) -> int:
    src = Path(args.inp)
    if not src.is_dir():
        raise CliError("io", f"not a directory: {src}")
    files = sorted(src.glob("*.skeleton"))
    if not files:
        raise CliError("data", f"no .skeleton files in {src}")
    clips = []
    for f in files:
        try:
            clip = prepare_clip(read_skeleton_file(f), args.frames)
        except SkeletonFormatError as e:
            raise CliError("format", f"{f.name}: {e}") from e
        if clip.label < 0:
            raise CliError("data", f"{f.name}: no action label in the file name")
        clips.append(clip)
    write_corpus(args.out, Corpus.from_clips(clips))
    print(f"wrote {len(clips)} clips ({args.frames} frames) to {args.out}")
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg = _configs(args.config)
    if args.epochs is not None:
        try:
            train_cfg = replace(train_cfg, epochs=args.epochs)
        except ValueError as e:
            raise CliError("config", str(e)) from e
    if args.data:
        train_data, test_data = split_corpus(_read_corpus(args.data), train_cfg.test_fraction, train_cfg.data_seed)
    else:
        train_data, test_data = load_data(train_cfg)
    if train_data.frames != model_cfg.frames:
        raise CliError("data", f"corpus has {train_data.frames} frames, model expects {model_cfg.frames}")
    if int(train_data.labels.max()) >= model_cfg.num_classes:
        raise CliError("data", f"labels up to {int(train_data.labels.max())} exceed {model_cfg.num_classes} classes")
    out = Path(args.out)
    metrics_path = Path(args.metrics) if args.metrics else out.with_suffix(out.suffix + ".metrics.jsonl")
    print(f"model {model_cfg.name} streams {','.join(model_cfg.streams)} train {len(train_data)} test {len(test_data)}", flush=True)
    t0 = time.perf_counter()
    with open(metrics_path, "w") as mf:

        def on_epoch(m):
            print(metrics_line(m), flush=True)
            mf.write(metrics_record(m) + "\n")
            mf.flush()

        result = train(model_cfg, train_cfg, train_data, test_data, on_epoch=on_epoch)
    save_model(out, result.model)
    test = "-" if result.test_eval is None else f"{result.test_eval.accuracy:.4f}"
    print(f"final train_acc {result.train_eval.accuracy:.4f} test_acc {test} time {time.perf_counter() - t0:.1f}s")
    print(f"checkpoint {out}")
    return 0


def cmd_eval(args) -> int:
    try:
        model = load_model(args.ckpt)
    except FileNotFoundError as e:
        raise CliError("io", f"checkpoint not found: {e.filename}") from e
    corpus = _read_corpus(args.data)
    streams = tuple(s.strip() for s in args.streams.split(",")) if args.streams else None
    try:
        res = evaluate(corpus, model, streams=streams)
    except ShapeError as e:
        raise CliError("data", str(e)) from e
    except ValueError as e:
        raise CliError("usage", str(e)) from e
    if args.json:
        print(json.dumps({"accuracy": res.accuracy, "confusion": res.confusion.tolist()}))
    else:
        print(f"accuracy {res.accuracy:.4f} over {len(corpus)} clips")
        print("confusion (rows: true class, columns: predicted)")
        for i, row in enumerate(res.confusion):
            print(f"{i:>4} " + " ".join(f"{v:>5d}" for v in row))
    return 0


def cmd_count(args) -> int:
    base = _configs(args.config)[0] if args.config else ModelConfig()
    if args.phi is not None:
        if base.phi != 0:
            raise CliError("config", "--phi requires a base (phi=0) configuration")
        try:
            cfg = scale_config(base, args.phi)
        except ValueError as e:
            raise CliError("usage", str(e)) from e
    else:
        cfg = base
    model = InteractionModel(cfg)
    report = count_costs(model, frames=args.frames)
    rows = [] if args.no_ablation else [
        (subset, count_costs(InteractionModel(cfg.with_streams(subset)), frames=args.frames))
        for subset in ABLATION_SUBSETS
        if set(subset) <= set(cfg.streams)
    ]
    if args.json:
        d = report.to_dict()
        d["model"] = cfg.name
        d["ablation"] = [
            {"streams": list(s), "params": r.total_params, "flops": r.total_flops} for s, r in rows
        ]
        if not args.layers:
            d.pop("layers")
        print(json.dumps(d, indent=2, sort_keys=True))
        return 0
    print(report.to_text(layers=args.layers, title=cfg.name))
    if rows:
        print()
        print(f"{'streams':<16}{'params (M)':>12}{'FLOPs (G)':>12}")
        for subset, r in rows:
            label = "+".join(f"({s})" for s in subset)
            print(f"{label:<16}{r.total_params / 1e6:>12.2f}{r.total_flops / 1e9:>12.2f}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(args.layer, args.seed)
    worst = 0.0
    for r in results:
        print(f"{r.layer:<12}{r.tensor:<28}{r.error:>12.3e}  {'ok' if r.passed else 'FAIL'}")
        worst = max(worst, r.error)
    failed = [r for r in results if not r.passed]
    print(f"max relative error {worst:.3e} (tolerance {TOLERANCE:g})")
    if failed:
        raise CliError("gradcheck", f"{len(failed)} of {len(results)} gradients exceed {TOLERANCE:g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="egcn-iig", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write synthetic two-person clips as skeleton text files")
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--clips-per-class", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--catalog", default="motion", choices=sorted(CATALOGS))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="parse, align and pair clips into a corpus file")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=150)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train a model and write a checkpoint")
    s.add_argument("--config", help="TOML file (default: the bundled tiny synthetic config)")
    s.add_argument("--data", help="corpus file (default: the config's synthetic corpus)")
    s.add_argument("--out", required=True)
    s.add_argument("--metrics", help="per-epoch JSON lines (default: <out>.metrics.jsonl)")
    s.add_argument("--epochs", type=int, help="override the configured epoch count")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="accuracy and confusion matrix of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--streams", help="comma-separated subset, e.g. B,C")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("count", help="parameter and FLOP report")
    s.add_argument("--config", help="TOML file (default: B0)")
    s.add_argument("--phi", type=int)
    s.add_argument("--frames", type=int)
    s.add_argument("--layers", action="store_true", help="itemize every layer")
    s.add_argument("--no-ablation", action="store_true", help="skip the stream-subset rows")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_count)

    s = sub.add_parser("gradcheck", help="finite-difference check of the layers")
    s.add_argument("--layer", default="all", choices=LAYERS + ("all",))
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except CliError as e:
        category, message = e.category, str(e)
    except TrainingDivergence as e:
        category, message = "divergence", str(e)
    except CheckpointError as e:
        category, message = "checkpoint", str(e)
    except SkeletonFormatError as e:
        category, message = "format", str(e)
    except OSError as e:
        category, message = "io", str(e)
    except KeyboardInterrupt:
        category, message = "interrupted", "interrupted"
    print(f"error: category={category} message={' '.join(message.split())}", file=sys.stderr)
    return EXIT_CODES.get(category, 1)


if __name__ == "__main__":
    sys.exit(main())
