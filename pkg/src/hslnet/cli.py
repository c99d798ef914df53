"""Command-line entry point: ``hsl {gen-synth,train,eval,rank,ablate}``.

Hyperparameters come from defaults, then an optional ``--config`` file of
``key=value`` lines, then command-line flags (flags win). The effective
configuration is echoed to the log.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .config import ModelConfig, TrainConfig, from_items, read_kv, write_kv
from .data import Dataset, gen_synthetic, tokenize
from .evaluation import AblationRow, Ranker, evaluate, run_ablation, table2_specs, write_ranked_tsv, write_report_csv
from .model import AblationSpec
from .training import load_checkpoint, save_checkpoint, train, write_loss_csv

log = logging.getLogger("hslnet")

PATH_KEYS = ("data_dir", "out_dir", "checkpoint", "word_vectors")
MODEL_KEYS = tuple(f.name for f in dataclasses.fields(ModelConfig) if f.name != "vocab_size")
TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))
CONFIG_KEYS = MODEL_KEYS + TRAIN_KEYS + PATH_KEYS


class UsageError(Exception):
    pass


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser, keys) -> None:
    for key in keys:
        p.add_argument(_flag(key), dest=key, default=None, metavar=key.upper())


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="key=value file")
    p.add_argument("-v", "--verbose", action="store_true")


def effective_config(args: argparse.Namespace, keys=CONFIG_KEYS) -> tuple[dict[str, str], list[str]]:
    """Merge config file and flags; unknown file keys are rejected by name.

    Returns the merged settings and a note for every flag that overrode a
    file value.
    """
    items: dict[str, str] = {}
    if args.config:
        try:
            items = read_kv(args.config)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        unknown = [k for k in items if k not in CONFIG_KEYS]
        if unknown:
            raise UsageError(f"unknown config key: {unknown[0]}")
    notes = []
    for key in keys:
        value = getattr(args, key, None)
        if value is None:
            continue
        value = str(value)
        if key in items and items[key] != value:
            notes.append(f"flag overrides config file: {key} file={items[key]} flag={value}")
        items[key] = value
    return items, notes


def _echo(items: dict[str, str], notes: list[str]) -> None:
    for note in notes:
        log.info(note)
    for k in sorted(items):
        log.info("config %s=%s", k, items[k])


def _configs(items: dict[str, str], d0: int | None = None) -> tuple[ModelConfig, TrainConfig]:
    model_items = {k: v for k, v in items.items() if k in MODEL_KEYS}
    if d0 is not None and "d0" not in model_items:
        model_items["d0"] = str(d0)
    train_items = {k: v for k, v in items.items() if k in TRAIN_KEYS}
    try:
        return from_items(ModelConfig, model_items), from_items(TrainConfig, train_items)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _require(items: dict[str, str], key: str) -> str:
    if key not in items:
        raise UsageError(f"missing required setting {_flag(key)}")
    return items[key]


def _log_to(out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out_dir / "run.log", mode="a", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)


def _spec_from(args, levels: int) -> AblationSpec:
    lv = tuple(int(x) for x in args.spec_levels.split(",")) if args.spec_levels else tuple(range(1, levels + 1))
    gr = tuple(args.spec_granularities.split(",")) if args.spec_granularities else ("object", "image")
    try:
        spec = AblationSpec(lv, gr)
        spec.check(levels)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return spec


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synth(args) -> int:
    if args.classes < 2:
        raise UsageError("--classes must be at least 2")
    out = Path(args.out_dir)
    ds = gen_synthetic(
        classes=args.classes, pairs_per_class=args.pairs_per_class, n=args.objects, m=args.tokens,
        d0=args.d0, vocab_size=args.vocab_size, noise=args.noise, seed=args.seed,
        tokens_per_class=args.tokens_per_class, eval_fraction=args.eval_fraction, pool_size=args.pool_size,
    )
    ds.save(out)
    manifest = {
        "generator": "synthetic",
        "classes": str(args.classes), "pairs_per_class": str(args.pairs_per_class),
        "objects": str(args.objects), "tokens": str(args.tokens), "d0": str(args.d0),
        "vocab_size": str(args.vocab_size), "noise": repr(args.noise), "seed": str(args.seed),
        "tokens_per_class": str(args.tokens_per_class), "eval_fraction": repr(args.eval_fraction),
        "pool_size": str(args.pool_size),
        "files": "features.tsv,train_queries.tsv,train_pairs.tsv,eval_queries.tsv,eval_relevance.tsv",
    }
    write_kv(manifest, out / "manifest.txt")
    log.info("wrote %d images, %d training pairs, %d eval queries to %s",
             len(ds.images), len(ds.train_pairs), len(ds.eval_queries), out)
    return 0


def cmd_train(args) -> int:
    items, notes = effective_config(args)
    data_dir = _require(items, "data_dir")
    out = Path(_require(items, "out_dir"))
    _log_to(out)
    _echo(items, notes)
    ds = Dataset.load(data_dir)
    d0 = next(iter(ds.images.values())).features.shape[1]
    model_cfg, train_cfg = _configs(items, d0)
    write_kv({k: items[k] for k in sorted(items)}, out / "effective_config.txt")
    result = train(ds, model_cfg, train_cfg, word_vectors=items.get("word_vectors"), out_dir=out)
    save_checkpoint(result.checkpoint, out / "model.ckpt")
    write_loss_csv(result.records, out / "loss.csv")
    means = result.epoch_means()
    if means:
        print(f"final epoch mean loss {means[-1]:.6f}")
    print(f"checkpoint {out / 'model.ckpt'}")
    return 0


def _load_for_eval(items):
    ckpt = load_checkpoint(_require(items, "checkpoint"))
    ds = Dataset.load(_require(items, "data_dir"))
    if not ds.eval_pools:
        raise UsageError("dataset has no evaluation pools (eval_queries.tsv / eval_relevance.tsv)")
    return ckpt, ds


def cmd_eval(args) -> int:
    items, notes = effective_config(args, PATH_KEYS)
    _echo(items, notes)
    ckpt, ds = _load_for_eval(items)
    model = ckpt.build_model()
    spec = _spec_from(args, model.cfg.levels)
    ks = tuple(args.k) if args.k else (5,)
    res = evaluate(model, ckpt.vocab, ds, spec, ks)
    for k in ks:
        print(f"nDCG@{k} {res.mean(k):.4f}")
    if "out_dir" in items:
        out = Path(items["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        write_report_csv([AblationRow(spec, {k: res.mean(k) for k in ks})], out / "eval_report.csv")
    return 0


def cmd_rank(args) -> int:
    items, notes = effective_config(args, PATH_KEYS)
    _echo(items, notes)
    ckpt, ds = _load_for_eval(items)
    model = ckpt.build_model()
    spec = _spec_from(args, model.cfg.levels)
    qids = [args.query_id] if args.query_id else sorted(ds.eval_pools)
    for q in qids:
        if q not in ds.eval_pools:
            raise UsageError(f"unknown query id {q}")
    needed = sorted({i for q in qids for i in ds.eval_pools[q]})
    ranker = Ranker(model, {i: ds.images[i] for i in needed})
    ranked = [
        ranker.rank(tokenize(ds.eval_queries[q], ckpt.vocab, model.cfg.max_tokens, q), sorted(ds.eval_pools[q]), spec)
        for q in qids
    ]
    if args.output:
        write_ranked_tsv(ranked, args.output)
    else:
        write_ranked_tsv(ranked, sys.stdout)
    return 0


def cmd_ablate(args) -> int:
    items, notes = effective_config(args)
    out = Path(_require(items, "out_dir"))
    _log_to(out)
    _echo(items, notes)
    ds = Dataset.load(_require(items, "data_dir"))
    if args.mode == "mask":
        ckpt = load_checkpoint(_require(items, "checkpoint"))
        specs = table2_specs(ckpt.model_cfg.levels)
        rows = run_ablation(ds, specs, "mask", checkpoint=ckpt)
    else:
        d0 = next(iter(ds.images.values())).features.shape[1]
        model_cfg, train_cfg = _configs(items, d0)
        specs = table2_specs(model_cfg.levels)
        rows = run_ablation(ds, specs, "retrain", model_cfg=model_cfg, train_cfg=train_cfg)
    write_report_csv(rows, out / "ablation.csv")
    for row in rows:
        print(f"{row.spec.name:<16} " + " ".join(f"@{k}={v:.4f}" for k, v in row.ndcg.items()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hsl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic class-structured dataset")
    _add_common(p)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--pairs-per-class", type=int, default=25)
    p.add_argument("--objects", type=int, default=4, help="max objects per image")
    p.add_argument("--tokens", type=int, default=6, help="max words per query")
    p.add_argument("--d0", type=int, default=16)
    p.add_argument("--vocab-size", type=int, default=64)
    p.add_argument("--tokens-per-class", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--eval-fraction", type=float, default=0.2)
    p.add_argument("--pool-size", type=int, default=30)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train a model and write model.ckpt + loss.csv")
    _add_common(p)
    _add_config_flags(p, CONFIG_KEYS)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "mean nDCG@k over evaluation queries"),
                                 ("rank", cmd_rank, "ranked candidate list TSV")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        _add_config_flags(p, PATH_KEYS)
        p.add_argument("--spec-levels", default=None, help="comma-separated levels to score with")
        p.add_argument("--spec-granularities", default=None, help="comma-separated subset of object,image")
        p.set_defaults(func=func)
        if name == "eval":
            p.add_argument("--k", type=int, action="append", help="cutoff (repeatable); default 5")
        else:
            p.add_argument("--query-id", default=None)
            p.add_argument("--output", default=None)

    p = sub.add_parser("ablate", help="nDCG@k for every level x granularity combination")
    _add_common(p)
    _add_config_flags(p, CONFIG_KEYS)
    p.add_argument("--mode", choices=("retrain", "mask"), default="retrain")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    root = logging.getLogger()
    before = list(root.handlers)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"hsl {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError, FloatingPointError, RuntimeError) as exc:
        print(f"hsl {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    finally:
        for handler in root.handlers[:]:
            if handler not in before:
                root.removeHandler(handler)
                handler.close()


if __name__ == "__main__":
    sys.exit(main())
