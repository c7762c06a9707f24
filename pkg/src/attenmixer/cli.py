"""Command-line front end: ``attenmixer {prep,train,eval,recommend,sweep,probe}``.

Global flags go before the subcommand: ``--config PATH``, ``--seed N``,
``--out DIR`` (default: ``$ATTENMIXER_OUT`` or ``./attenmixer-out``) and
repeated ``--set section.key=value`` overrides.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import data, evaluation, model, sparsity, training
from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config, load_config
from .errors import AttenMixerError, UnknownItem, VocabularyMismatch

OUT_ENV = "ATTENMIXER_OUT"
DATASET_FILE = "dataset.json"
CHECKPOINT_FILE = "checkpoint.amx"
TRAIN_LOG = "train_log.jsonl"

log = logging.getLogger("attenmixer")


def default_out() -> Path:
    return Path(os.environ.get(OUT_ENV) or "attenmixer-out")


def hyper_from(cfg: Config) -> model.HyperParams:
    return model.HyperParams(**asdict(cfg.model))


def train_config_from(cfg: Config) -> training.TrainConfig:
    return training.TrainConfig(**asdict(cfg.train))


def _dump(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_prep(cfg: Config, out: Path) -> Path:
    """load -> filter -> split -> augment; writes the dataset cache and a summary."""
    if not cfg.data.input:
        raise AttenMixerError("no input file: set data.input or pass --input")
    raw = data.load_events(cfg.data.input, cfg.data.format)
    ds = data.prepare_dataset(raw, min_session_len=cfg.data.min_session_len,
                              min_item_freq=cfg.data.min_item_freq, top_k_items=cfg.data.top_k_items,
                              split=cfg.data.split, validation_fraction=cfg.data.validation_fraction,
                              source=cfg.data.input)
    out.mkdir(parents=True, exist_ok=True)
    path = out / DATASET_FILE
    data.save_dataset(ds, path, cfg.to_dict())
    summary = {"stats": ds.meta["stats"], "train": len(ds.train), "validation": len(ds.validation),
               "test": len(ds.test), "meta": ds.meta, "config": cfg.to_dict()}
    (out / "dataset_summary.json").write_text(_dump(summary), encoding="utf-8")
    return path


def _load_cache(cache) -> data.SessionDataset:
    return data.load_dataset(cache)


def cmd_train(cfg: Config, out: Path, cache: Path) -> Path:
    ds = _load_cache(cache)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / TRAIN_LOG
    log_path.write_text(json.dumps({"type": "config", "config": cfg.to_dict()}, sort_keys=True) + "\n",
                        encoding="utf-8")
    ckpt, _ = training.fit(ds, hyper_from(cfg), train_config_from(cfg), log_path=log_path,
                           extra_meta={"config": cfg.to_dict()})
    return save_checkpoint(ckpt, out / CHECKPOINT_FILE)


def _check_vocab(ckpt, ds):
    if ckpt.vocab_digest != ds.vocab.digest() or ckpt.n_items != ds.n_items:
        raise VocabularyMismatch("checkpoint was trained on a different vocabulary than the cache")


def _buckets(cfg):
    return evaluation.parse_buckets(cfg.eval.buckets)


def cmd_eval(cfg: Config, out: Path, checkpoint: Path, cache: Path, split="test") -> evaluation.MetricsReport:
    ds = _load_cache(cache)
    ckpt = load_checkpoint(checkpoint)
    _check_vocab(ckpt, ds)
    report = evaluation.evaluate(ckpt, getattr(ds, split), tuple(cfg.eval.cutoffs), _buckets(cfg),
                                 cfg.eval.batch_size)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "report.json", {"checkpoint": str(checkpoint), "split": split,
                                       "hyper": ckpt.hyper.to_dict(), "config": cfg.to_dict()})
    report.write_bucket_table(out / "buckets.tsv")
    return report


def _sweep_points(sweep_dir: Path):
    for path in sorted(sweep_dir.glob("*/" + CHECKPOINT_FILE)):
        yield path.parent.name, path


def emit_plot_data(rows, plot_dir: Path) -> list[Path]:
    """Series files for HR@20-vs-L and HR@20-vs-H plots.

    ``rows`` are dicts with ``L``, ``H``, ``HR@20``, ``MRR@20``. Writes one
    ``series_L<L>.tsv`` per L value plus ``hr20_vs_L.tsv`` and ``hr20_vs_H.tsv``
    (columns ``x y`` with the other axis averaged).
    """
    plot_dir.mkdir(parents=True, exist_ok=True)
    written = []
    ok = [r for r in rows if r.get("HR@20") is not None]
    for L in sorted({r["L"] for r in ok}):
        path = plot_dir / f"series_L{L}.tsv"
        lines = ["L\tH\tHR@20\tMRR@20"] + [f"{r['L']}\t{r['H']}\t{r['HR@20']!r}\t{r['MRR@20']!r}"
                                            for r in sorted(ok, key=lambda r: r["H"]) if r["L"] == L]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(path)
    for axis in ("L", "H"):
        path = plot_dir / f"hr20_vs_{axis}.tsv"
        lines = ["x\ty"]
        for x in sorted({r[axis] for r in ok}):
            lines.append(f"{x}\t{float(np.mean([r['HR@20'] for r in ok if r[axis] == x]))!r}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(path)
    return written


def cmd_eval_sweep(cfg: Config, sweep_dir: Path, cache: Path, plot_dir: Path | None) -> list[dict]:
    ds = _load_cache(cache)
    rows = []
    for name, path in _sweep_points(sweep_dir):
        ckpt = load_checkpoint(path)
        _check_vocab(ckpt, ds)
        rep = evaluation.evaluate(ckpt, ds.test, (20,), (), cfg.eval.batch_size)
        rows.append({"point": name, "L": ckpt.hyper.L, "H": ckpt.hyper.H, "HR@20": rep.hr[20],
                     "MRR@20": rep.mrr[20], "seconds": rep.seconds})
    if plot_dir is not None:
        emit_plot_data(rows, plot_dir)
    return rows


def recommend(ckpt, vocab: data.Vocabulary, session, topk: int):
    """Top-k external ids and probabilities for one session of external ids."""
    unknown = [s for s in session if s not in vocab]
    if unknown:
        raise UnknownItem(unknown)
    if not session:
        raise AttenMixerError("empty session")
    probs = model.forward([vocab.encode(s) for s in session], ckpt.params, ckpt.hyper)
    order = np.lexsort((np.arange(len(probs)), -probs))[:topk]
    return [vocab.decode(int(i) + 1) for i in order], [float(probs[i]) for i in order]


def cmd_recommend(checkpoint: Path, cache: Path, lines, topk: int, stream) -> int:
    ds = _load_cache(cache)
    ckpt = load_checkpoint(checkpoint)
    _check_vocab(ckpt, ds)
    count = 0
    for line in lines:
        session = line.replace(",", " ").split()
        if not session:
            continue
        items, scores = recommend(ckpt, ds.vocab, session, topk)
        stream.write(json.dumps({"session": session, "items": items, "scores": scores}) + "\n")
        count += 1
    return count


def cmd_sweep(cfg: Config, out: Path, cache: Path) -> list[dict]:
    """Train and evaluate every (L, H[, lr]) grid point with the shared seed."""
    if not cfg.sweep.L or not cfg.sweep.H:
        raise AttenMixerError("sweep grid is empty")
    ds = _load_cache(cache)
    sweep_dir = out / "sweep"
    sweep_dir.mkdir(parents=True, exist_ok=True)
    lrs = cfg.sweep.lr or [cfg.train.lr]
    rows = []
    for L, H, lr in itertools.product(cfg.sweep.L, cfg.sweep.H, lrs):
        name = f"L{L}_H{H}" + (f"_lr{lr:g}" if cfg.sweep.lr else "")
        row = {"point": name, "L": L, "H": H, "lr": lr, "HR@20": None, "MRR@20": None,
               "seconds": None, "status": "ok"}
        start = time.perf_counter()
        try:
            hyper = model.HyperParams(**(asdict(cfg.model) | {"L": L, "H": H}))
            tcfg = training.TrainConfig(**(asdict(cfg.train) | {"lr": lr}))
            point_dir = sweep_dir / name
            point_dir.mkdir(parents=True, exist_ok=True)
            ckpt, _ = training.fit(ds, hyper, tcfg, log_path=None, extra_meta={"config": cfg.to_dict()})
            save_checkpoint(ckpt, point_dir / CHECKPOINT_FILE)
            rep = evaluation.evaluate(ckpt, ds.test, (20,), (), cfg.eval.batch_size)
            row.update({"HR@20": rep.hr[20], "MRR@20": rep.mrr[20]})
        except (AttenMixerError, ValueError, ArithmeticError) as exc:
            row["status"] = f"failed: {exc}"
            log.warning("sweep point %s failed: %s", name, exc)
        row["seconds"] = time.perf_counter() - start
        rows.append(row)
    lines = ["# config " + json.dumps(cfg.to_dict(), sort_keys=True),
             "L\tH\tlr\tHR@20\tMRR@20\tseconds\tstatus"]
    for r in rows:
        lines.append(f"{r['L']}\t{r['H']}\t{r['lr']!r}\t{r['HR@20']!r}\t{r['MRR@20']!r}\t"
                     f"{r['seconds']:.3f}\t{r['status']}")
    (sweep_dir / "results.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    emit_plot_data(rows, sweep_dir / "plot")
    return rows


def cmd_probe(cfg: Config, out: Path, cache: Path) -> Path:
    ds = _load_cache(cache)
    probe = sparsity.ProbeConfig(**asdict(cfg.probe))
    report = sparsity.probe_run(ds, hyper_from(cfg), probe, train_config_from(cfg))
    out.mkdir(parents=True, exist_ok=True)
    path = out / "probe.tsv"
    report.write(path, "config " + json.dumps(cfg.to_dict(), sort_keys=True))
    return path


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attenmixer", description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--seed", type=int, help="overrides train.seed")
    p.add_argument("--out", type=Path, help=f"output directory (default ${OUT_ENV} or ./attenmixer-out)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prep", help="prepare a dataset cache from an event log")
    s.add_argument("--input", help="overrides data.input")
    s.add_argument("--format", choices=["csv", "tsv"], help="overrides data.format")

    for name, text in (("train", "train a model"), ("probe", "run the sparsity probe")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--cache", type=Path, help="dataset cache (default OUT/dataset.json)")
        if name == "train":
            s.add_argument("--variant", choices=model.VARIANTS, help="overrides model.variant")

    s = sub.add_parser("eval", help="evaluate a checkpoint or a sweep directory")
    s.add_argument("--checkpoint", type=Path, help="checkpoint file or sweep directory")
    s.add_argument("--cache", type=Path)
    s.add_argument("--split", choices=["test", "validation", "train"], default="test")
    s.add_argument("--cutoffs", help="comma-separated K values, overrides eval.cutoffs")
    s.add_argument("--emit-plot-data", nargs="?", const="", default=None, metavar="DIR",
                   help="for a sweep directory, write plot series (default SWEEP/plot)")

    s = sub.add_parser("recommend", help="top-k items for sessions read from stdin")
    s.add_argument("--checkpoint", type=Path)
    s.add_argument("--cache", type=Path)
    s.add_argument("--topk", type=int, default=20)
    s.add_argument("--session", help="one session of ids instead of stdin")

    s = sub.add_parser("sweep", help="grid over L and H")
    s.add_argument("--cache", type=Path)
    s.add_argument("--L", help="comma-separated values, overrides sweep.L")
    s.add_argument("--H", help="comma-separated values, overrides sweep.H")
    return p


def _ints(text):
    return [int(x) for x in text.split(",") if x.strip()]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        for item in args.set:
            key, _, value = item.partition("=")
            cfg.set(key, value)
        if args.seed is not None:
            cfg.train.seed = args.seed
        out = args.out or default_out()
        cache = getattr(args, "cache", None) or out / DATASET_FILE
        checkpoint = getattr(args, "checkpoint", None) or out / CHECKPOINT_FILE

        if args.command == "prep":
            if args.input:
                cfg.data.input = args.input
            if args.format:
                cfg.data.format = args.format
            path = cmd_prep(cfg, out)
            print(path)
        elif args.command == "train":
            if args.variant:
                cfg.model.variant = args.variant
            print(cmd_train(cfg, out, cache))
        elif args.command == "eval":
            if args.cutoffs:
                cfg.eval.cutoffs = _ints(args.cutoffs)
            if checkpoint.is_dir():
                plot = None
                if args.emit_plot_data is not None:
                    plot = Path(args.emit_plot_data) if args.emit_plot_data else checkpoint / "plot"
                rows = cmd_eval_sweep(cfg, checkpoint, cache, plot)
                print(json.dumps(rows, indent=2))
            else:
                report = cmd_eval(cfg, out, checkpoint, cache, args.split)
                print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        elif args.command == "recommend":
            lines = [args.session] if args.session is not None else sys.stdin
            cmd_recommend(checkpoint, cache, lines, args.topk, sys.stdout)
        elif args.command == "sweep":
            if args.L:
                cfg.sweep.L = _ints(args.L)
            if args.H:
                cfg.sweep.H = _ints(args.H)
            rows = cmd_sweep(cfg, out, cache)
            for r in rows:
                print(f"L={r['L']} H={r['H']} lr={r['lr']:g} HR@20={r['HR@20']} MRR@20={r['MRR@20']} {r['status']}")
            if any(r["status"] != "ok" for r in rows):
                return 3
        elif args.command == "probe":
            print(cmd_probe(cfg, out, cache))
    except (AttenMixerError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
