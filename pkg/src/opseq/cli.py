"""Command-line interface.

Subcommands cover the full pipeline: synth (generate a synthetic corpus),
vocab (rank opcodes), encode (corpus -> dataset file), train (one model),
protocol (repeated runs over cumulative family groups), and grid
(hyperparameter sweep).

Exit codes: 0 success, 2 configuration or input problems, 3 training
failures such as divergence. Output files are written to temp names and
renamed into place, so failed commands leave no partial outputs.
"""

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import corpus, train as tr, zoo
from .errors import ConfigError, OpseqError, TrainingDivergedError
from .train import GridSpace, TrainConfig

# Every key a config file may set, with its parser. CLI flags override
# config values, which override built-in defaults.
_CONFIG_TYPES = {
    "batch_size": int,
    "max_epochs": int,
    "learning_rate": float,
    "adam_beta1": float,
    "adam_beta2": float,
    "adam_eps": float,
    "early_stop_patience": int,
    "seed": int,
    "arch_id": str,
    "seq_len": int,
    "embed_dim": int,
    "lstm_units": int,
    "conv_filters": int,
    "conv_kernel": int,
    "pool_size": int,
    "dropout_rate": float,
    "mlp_hidden": int,
    "runs": int,
    "jobs": int,
    "tolerance": float,
    "test_frac": float,
}

_SPEC_KEYS = ("embed_dim", "lstm_units", "conv_filters", "conv_kernel",
              "pool_size", "dropout_rate", "mlp_hidden")


def load_config_file(path):
    """Flat key=value config; '#' comments and blank lines are skipped."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = key.strip(), value.strip()
        if key not in _CONFIG_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
        try:
            out[key] = _CONFIG_TYPES[key](value)
        except ValueError:
            raise ConfigError(
                f"{path}:{lineno}: bad value '{value}' for '{key}'"
            ) from None
    return out


def _resolve(args, file_cfg, key, default=None):
    value = getattr(args, key, None)
    if value is not None:
        return value
    return file_cfg.get(key, default)


def _train_config(args, file_cfg):
    kwargs = {}
    for f in fields(TrainConfig):
        kwargs[f.name] = _resolve(args, file_cfg, f.name, f.default)
    return TrainConfig(**kwargs)


def _spec_overrides(args, file_cfg):
    out = {}
    for key in _SPEC_KEYS:
        value = _resolve(args, file_cfg, key)
        if value is not None:
            out[key] = value
    return out


class _Stager:
    """Collects outputs under temp names, renaming all on commit."""

    def __init__(self):
        self._pairs = []

    def path(self, final):
        final = Path(final)
        tmp = final.with_name(f".{final.name}.tmp{os.getpid()}")
        self._pairs.append((tmp, final))
        return tmp

    def commit(self):
        for tmp, final in self._pairs:
            os.replace(tmp, final)

    def abort(self):
        for tmp, _ in self._pairs:
            tmp.unlink(missing_ok=True)


def _staged(fn):
    def run(args, file_cfg):
        stage = _Stager()
        try:
            fn(args, file_cfg, stage)
        except BaseException:
            stage.abort()
            raise
        stage.commit()
    return run


def _load_dataset(args, file_cfg):
    """Dataset file plus optional seq_len truncation from flags/config."""
    dataset = corpus.load_dataset_file(args.dataset)
    seq_len = _resolve(args, file_cfg, "seq_len")
    if seq_len is not None and seq_len != dataset.L:
        dataset = dataset.truncate(seq_len)
    return dataset


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args, file_cfg):
    out = Path(args.out)
    if out.exists():
        raise ConfigError(f"refusing to overwrite existing path: {out}")
    seed = _resolve(args, file_cfg, "seed", 0)
    records, _ = corpus.synth_corpus(
        families=args.families, per_family=args.per_family,
        mean_len=args.mean_len, vocab_size=args.vocab_size,
        separation=args.separation, seed=seed)
    tmp = out.with_name(f".{out.name}.tmp{os.getpid()}")
    tmp.mkdir(parents=True)
    counters = {}
    for family, ops in records:
        fam_dir = tmp / family
        fam_dir.mkdir(exist_ok=True)
        idx = counters.get(family, 0)
        counters[family] = idx + 1
        (fam_dir / f"sample{idx:04d}.txt").write_text(
            "\n".join(ops) + "\n", encoding="utf-8")
    manifest = (
        "opseq-synth v1\n"
        f"families={args.families}\n"
        f"per_family={args.per_family}\n"
        f"mean_len={args.mean_len}\n"
        f"vocab_size={args.vocab_size}\n"
        f"separation={args.separation}\n"
        f"seed={seed}\n"
    )
    (tmp / "manifest.txt").write_text(manifest, encoding="utf-8")
    os.replace(tmp, out)
    print(f"wrote {len(records)} samples across {args.families} families "
          f"to {out}")


@_staged
def cmd_vocab(args, file_cfg, stage):
    jobs = _resolve(args, file_cfg, "jobs", 1)
    parsed, skipped = corpus.load_corpus_dir(args.corpus, jobs=jobs)
    if not parsed:
        raise ConfigError(f"no parseable samples under {args.corpus}")
    vocab = corpus.build_vocab((ops for _, _, ops in parsed), K=args.k)
    corpus.write_vocab_file(vocab, stage.path(args.out))
    total = sum(len(ops) for _, _, ops in parsed)
    kept = sum(count for _, count in vocab.ranked)
    distinct = len({m for _, _, ops in parsed for m in ops})
    print("rank\tmnemonic\tcount")
    for rank, (mnemonic, count) in enumerate(vocab.ranked, start=1):
        print(f"{rank}\t{mnemonic}\t{count}")
    print(f"retained {vocab.K} of {distinct} distinct opcodes; "
          f"coverage {100.0 * kept / total:.2f}% of {total} positions")
    if skipped:
        print(f"skipped {len(skipped)} empty sample(s)", file=sys.stderr)


@_staged
def cmd_encode(args, file_cfg, stage):
    jobs = _resolve(args, file_cfg, "jobs", 1)
    parsed, skipped = corpus.load_corpus_dir(args.corpus, jobs=jobs)
    if not parsed:
        raise ConfigError(f"no parseable samples under {args.corpus}")
    for family, name in skipped:
        print(f"warning: skipped empty sample {family}/{name}",
              file=sys.stderr)
    vocab = corpus.load_vocab_file(args.vocab)
    dataset = corpus.encode_corpus(parsed, vocab, L=args.length)
    corpus.write_dataset_file(dataset, stage.path(args.out))
    counts = dataset.family_counts()
    print(f"encoded {len(dataset.records)} samples "
          f"(L={dataset.L}, K={dataset.K}) across {len(counts)} families")
    for family in dataset.families:
        print(f"{family}: {counts[family]}")
    if skipped:
        print(f"skipped {len(skipped)} empty sample(s)")


@_staged
def cmd_train(args, file_cfg, stage):
    cfg = _train_config(args, file_cfg)
    arch_id = _resolve(args, file_cfg, "arch_id")
    if arch_id is None:
        raise ConfigError("arch_id required (--arch flag or config file)")
    dataset = _load_dataset(args, file_cfg)
    test_frac = _resolve(args, file_cfg, "test_frac", 0.15)
    parts = corpus.split(dataset, test_frac=test_frac, seed=cfg.seed)
    spec_kwargs = dict(arch_id=arch_id, num_classes=len(dataset.families),
                       vocab_size=dataset.vocab_size, seq_len=dataset.L)
    spec_kwargs.update(_spec_overrides(args, file_cfg))
    model = zoo.build_model(zoo.ModelSpec(**spec_kwargs),
                            np.random.default_rng(cfg.seed))
    history = tr.train_model(model, parts.train, cfg)
    accuracy, conf = tr.evaluate(model, parts.test)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    zoo.save_model(model, stage.path(out_dir / "model.ckpt"))
    tr.write_history_csv(history, stage.path(out_dir / "history.csv"))
    tr.write_confusion_csv(conf, stage.path(out_dir / "confusion.csv"))
    payload = {
        "arch_id": arch_id,
        "test_accuracy": accuracy,
        "train_samples": len(parts.train.records),
        "test_samples": len(parts.test.records),
        "seed": cfg.seed,
        "epochs_run": len(history.rows),
        "stopped_epoch": history.stopped_epoch,
        "best_epoch": history.best_epoch,
    }
    with open(stage.path(out_dir / "accuracy.json"), "w",
              encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    print(f"{arch_id}: test accuracy {100.0 * accuracy:.2f}% "
          f"({len(history.rows)} epochs)")


@_staged
def cmd_protocol(args, file_cfg, stage):
    cfg = _train_config(args, file_cfg)
    jobs = _resolve(args, file_cfg, "jobs", 1)
    runs = _resolve(args, file_cfg, "runs", 5)
    if args.arch == "all":
        archs = list(zoo.ARCH_IDS)
    else:
        archs = [a.strip() for a in args.arch.split(",") if a.strip()]
    unknown = [a for a in archs if a not in zoo.ARCH_IDS]
    if unknown:
        raise ConfigError(
            f"unknown arch id(s) {unknown}; valid: {', '.join(zoo.ARCH_IDS)}"
        )
    dataset = _load_dataset(args, file_cfg)
    overrides = _spec_overrides(args, file_cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports_by_arch = {}
    for arch_id in archs:
        reports = tr.run_protocol(arch_id, dataset, runs=runs, cfg=cfg,
                                  spec_overrides=overrides or None, jobs=jobs)
        reports_by_arch[arch_id] = reports
        for report in reports:
            name = f"protocol_{arch_id}_{report.num_classes}fam.json"
            tr.write_report_json(report, stage.path(out_dir / name))
            print(f"{arch_id} {report.num_classes} families: "
                  f"mean accuracy {100.0 * report.mean_accuracy:.2f}%")
    tr.write_summary_csv(reports_by_arch, stage.path(out_dir / "summary.csv"))
    tr.write_bar_chart_csv(reports_by_arch,
                           stage.path(out_dir / "bar_chart.csv"))


def load_grid_space(path):
    """Grid axes as key=value with comma-separated values."""
    axes = {"opcode_lengths": int, "lstm_units": int, "embed_dims": int,
            "dropout_rates": float}
    found = {}
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or key not in axes:
            raise ConfigError(f"{path}:{lineno}: unknown grid axis '{key}'")
        try:
            found[key] = [axes[key](v.strip()) for v in value.split(",")]
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: bad value list") from None
    return GridSpace(**found)


@_staged
def cmd_grid(args, file_cfg, stage):
    cfg = _train_config(args, file_cfg)
    arch_id = _resolve(args, file_cfg, "arch_id")
    if arch_id is None:
        raise ConfigError("arch_id required (--arch flag or config file)")
    tolerance = _resolve(args, file_cfg, "tolerance", 0.5)
    dataset = corpus.load_dataset_file(args.dataset)
    space = load_grid_space(args.space) if args.space else GridSpace()
    too_long = [L for L in space.opcode_lengths if L > dataset.L]
    if too_long:
        raise ConfigError(
            f"grid opcode lengths {too_long} exceed dataset length {dataset.L}"
        )
    best, results = tr.grid_search(arch_id, dataset, space=space, cfg=cfg,
                                   tolerance=tolerance)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tr.write_grid_csv(results, best, stage.path(out_dir / "grid_results.csv"))
    best_cfg = (
        f"# grid best of {len(results)}: accuracy {best['accuracy']:.2f}%, "
        f"{best['train_seconds']:.3f}s training\n"
        f"arch_id={arch_id}\n"
        f"seq_len={best['opcode_length']}\n"
        f"lstm_units={best['lstm_units']}\n"
        f"embed_dim={best['embed_dim']}\n"
        f"dropout_rate={best['dropout_rate']}\n"
    )
    with open(stage.path(out_dir / "best_config.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(best_cfg)
    print(f"best of {len(results)}: accuracy {best['accuracy']:.2f}% "
          f"with opcode_length={best['opcode_length']} "
          f"lstm_units={best['lstm_units']} embed_dim={best['embed_dim']} "
          f"dropout_rate={best['dropout_rate']}")


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def _global_flags(parser, suppress):
    # The same flags live on the root parser and on every subcommand, so
    # both "opseq --seed 1 train ..." and "opseq train --seed 1 ..." work.
    # Subcommand copies default to SUPPRESS so they never clobber a value
    # the root parser already set.
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default,
                        help="RNG seed (default 0)")
    parser.add_argument("--jobs", type=int, default=default,
                        help="worker processes for parsing and protocol runs")
    parser.add_argument("--config", default=default,
                        help="key=value config file; flags override it")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="opseq",
        description="Opcode-sequence malware family classification toolkit",
    )
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic opcode corpus",
                       parents=[common])
    p.add_argument("--out", required=True)
    p.add_argument("--families", type=int, default=5)
    p.add_argument("--per-family", type=int, default=100)
    p.add_argument("--mean-len", type=int, default=200)
    p.add_argument("--vocab-size", type=int, default=30)
    p.add_argument("--separation", choices=("easy", "hard"), default="easy")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("vocab", help="build a ranked opcode vocabulary",
                       parents=[common])
    p.add_argument("--corpus", required=True)
    p.add_argument("--k", type=int, default=30)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vocab)

    p = sub.add_parser("encode", help="encode a corpus into a dataset file",
                       parents=[common])
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--length", type=int, default=2000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    def train_flags(p):
        p.add_argument("--batch-size", type=int, default=None,
                       dest="batch_size")
        p.add_argument("--max-epochs", type=int, default=None,
                       dest="max_epochs")
        p.add_argument("--learning-rate", type=float, default=None,
                       dest="learning_rate")
        p.add_argument("--patience", type=int, default=None,
                       dest="early_stop_patience")
        p.add_argument("--lstm-units", type=int, default=None,
                       dest="lstm_units")
        p.add_argument("--embed-dim", type=int, default=None,
                       dest="embed_dim")
        p.add_argument("--dropout-rate", type=float, default=None,
                       dest="dropout_rate")
        p.add_argument("--seq-len", type=int, default=None, dest="seq_len",
                       help="truncate dataset records to this length")

    p = sub.add_parser("train", help="train one architecture",
                       parents=[common])
    p.add_argument("--dataset", required=True)
    p.add_argument("--arch", default=None, dest="arch_id",
                   choices=zoo.ARCH_IDS)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--test-frac", type=float, default=None, dest="test_frac")
    train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("protocol",
                       help="repeated runs over cumulative family groups",
                       parents=[common])
    p.add_argument("--dataset", required=True)
    p.add_argument("--arch", default="all",
                   help="arch id, comma list, or 'all'")
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    train_flags(p)
    p.set_defaults(func=cmd_protocol)

    p = sub.add_parser("grid", help="exhaustive hyperparameter sweep",
                       parents=[common])
    p.add_argument("--dataset", required=True)
    p.add_argument("--arch", default=None, dest="arch_id",
                   choices=zoo.ARCH_IDS)
    p.add_argument("--space", default=None,
                   help="grid axes file; defaults to the full tested ranges")
    p.add_argument("--tolerance", type=float, default=None)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--max-epochs", type=int, default=None, dest="max_epochs")
    p.add_argument("--patience", type=int, default=None,
                   dest="early_stop_patience")
    p.set_defaults(func=cmd_grid)
    return parser


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        file_cfg = load_config_file(args.config) if args.config else {}
        args.func(args, file_cfg)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (OpseqError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
