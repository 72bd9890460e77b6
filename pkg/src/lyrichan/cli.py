"""Command-line interface: prepare, fetch-genres, train, eval, predict, visualize."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .corpus import (ConfigurationError, SplitSpec, Vocabulary, build_vocabulary, count_tokens,
                     deduplicate, encode_records, encode_song, filter_genres, read_corpus,
                     read_manifest, split, write_corpus, write_manifest)
from .embeddings import load_glove
from .fetch import EndpointConfig, fetch_genre_tags
from .models import ARCHITECTURES, ModelCheckpoint, ModelConfig, build_model
from .training import DivergenceError, TrainConfig, evaluate, train, write_history
from .visualize import NoAttentionError, attention_report, render_ansi, write_visualization

logger = logging.getLogger("lyrichan")

OUTPUT_ENV = "LYRICHAN_OUTPUT_DIR"
SPLITS = ("train", "val", "test")


class CliError(Exception):
    pass


def _out_dir(args) -> Path:
    path = Path(args.out or os.environ.get(OUTPUT_ENV) or ".")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _parse_fractions(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad split {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("split needs three comma-separated fractions")
    return parts


def _records_by_id(path) -> dict:
    if not Path(path).is_file():
        raise CliError(f"cannot read corpus {path}")
    return {r.id: r for r in read_corpus(path)}


def _load_prepared(prepared: Path):
    for name in ("vocab.txt", "genres.txt", "train.txt"):
        if not (prepared / name).is_file():
            raise CliError(f"{prepared / name} is missing; run 'prepare' first")
    vocab = Vocabulary.load(prepared / "vocab.txt")
    genres = (prepared / "genres.txt").read_text(encoding="utf-8").splitlines()
    return vocab, genres


def _split_records(by_id: dict, prepared: Path, name: str) -> list:
    path = prepared / f"{name}.txt"
    if not path.is_file():
        raise CliError(f"{path} is missing")
    ids = read_manifest(path)
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise CliError(f"{len(missing)} ids in {path} are not in the corpus (first: {missing[0]})")
    return [by_id[i] for i in ids]


# -- subcommands ---------------------------------------------------------------------

def cmd_prepare(args) -> int:
    out = _out_dir(args)
    if not Path(args.corpus).is_file():
        raise CliError(f"cannot read corpus {args.corpus}")
    records = read_corpus(args.corpus)
    deduped = deduplicate(records, seed=args.seed)
    labelled = [r for r in deduped if r.genre is not None]
    kept, genres = filter_genres(labelled, args.filter)
    train_r, val_r, test_r = split(kept, SplitSpec(*args.split, seed=args.seed))
    vocab = build_vocabulary(deduped, max_size=args.max_vocab)

    for name, part in zip(SPLITS, (train_r, val_r, test_r)):
        write_manifest(part, out / f"{name}.txt")
    vocab.save(out / "vocab.txt")
    (out / "genres.txt").write_text("".join(f"{g}\n" for g in genres), encoding="utf-8")

    counts = Counter(r.genre for r in kept)
    tokens = count_tokens(kept)
    covered = sum(n for tok, n in tokens.items() if tok in vocab)
    stats = {
        "records": len(records),
        "after_dedup": len(deduped),
        "unlabelled": len(deduped) - len(labelled),
        "after_filter": len(kept),
        "filter": args.filter,
        "genre_histogram": [[g, counts[g]] for g in genres],
        "splits": {"train": len(train_r), "val": len(val_r), "test": len(test_r)},
        "vocab_size": len(vocab),
        "token_coverage": covered / max(sum(tokens.values()), 1),
        "seed": args.seed,
    }
    (out / "stats.json").write_text(json.dumps(stats, indent=1) + "\n", encoding="utf-8")
    print(f"{len(kept)} songs in {len(genres)} genres "
          f"({len(train_r)}/{len(val_r)}/{len(test_r)}); vocabulary {len(vocab)}")
    return 0


def cmd_fetch_genres(args) -> int:
    if not Path(args.corpus).is_file():
        raise CliError(f"cannot read corpus {args.corpus}")
    cfg = EndpointConfig(base_url=args.base_url, query_template=args.query_template,
                         genre_field=args.genre_field, rate_limit=args.rate_limit,
                         attempts=args.attempts)
    tagged, summary = fetch_genre_tags(read_corpus(args.corpus), cfg)
    write_corpus(tagged, args.output)
    print(f"tagged {summary.tagged}, no match {summary.no_match}, failed {summary.failed}")
    return 0


def _model_config(args, n_classes: int, vocab_size: int) -> ModelConfig:
    return ModelConfig(arch=args.model, n_classes=n_classes, vocab_size=vocab_size,
                       embed_dim=args.embed_dim, hidden_size=args.hidden_size,
                       attention_size=args.attention_size, max_units=args.max_units,
                       max_words=args.max_words, max_seq_len=args.max_seq_len,
                       trainable_embeddings=not args.freeze_embeddings)


def cmd_train(args) -> int:
    with ad.precision(args.precision):
        return _train(args)


def _train(args) -> int:
    out = _out_dir(args)
    prepared = Path(args.prepared)
    vocab, genres = _load_prepared(prepared)
    by_id = _records_by_id(args.corpus)
    train_songs = encode_records(_split_records(by_id, prepared, "train"), vocab, genres)
    val_songs = encode_records(_split_records(by_id, prepared, "val"), vocab, genres)
    config = _model_config(args, len(genres), len(vocab))
    embedding = None
    if args.glove and args.model != "mc":
        embedding = load_glove(args.glove, vocab, args.embed_dim, seed=args.seed,
                               trainable=not args.freeze_embeddings)
    model = build_model(config, seed=args.seed, embedding=embedding)
    tcfg = TrainConfig(batch_size=args.batch_size, learning_rate=args.learning_rate,
                       rmsprop_decay=args.rmsprop_decay, rmsprop_epsilon=args.rmsprop_epsilon,
                       dropout_p=args.dropout_p, clip_norm=args.clip_norm,
                       patience=args.patience or None, seed=args.seed,
                       max_epochs=args.max_epochs)

    def report(row):
        if args.quiet:
            return
        if row["train_loss"] is None:
            print(f"epoch {row['epoch']}: val acc {100 * row['val_accuracy']:.2f}")
        else:
            print(f"epoch {row['epoch']}: train {row['train_loss']:.4f} "
                  f"val {row['val_loss']:.4f} acc {100 * row['val_accuracy']:.2f} "
                  f"({row['wall_seconds']:.1f}s)")

    meta = {"seed": args.seed, "train_config": tcfg.to_dict(), "precision": args.precision,
            "glove": bool(embedding), "embedding_coverage": embedding.coverage if embedding else None}
    status = 0
    try:
        result = train(model, train_songs, val_songs, tcfg, on_epoch=report)
    except DivergenceError as exc:
        print(f"error: training diverged ({exc}); keeping the best checkpoint so far",
              file=sys.stderr)
        result, status = exc.result, 1
    meta["best_epoch"] = result.best_epoch
    history = result.history
    if not args.record_wall_time:
        history = [dict(row, wall_seconds=None) for row in history]
    ckpt = ModelCheckpoint.from_model(result.model, vocab, genres, meta, history)
    ckpt.save(out / "model.ckpt")
    write_history(result.history, out / "history.csv", record_time=args.record_wall_time)
    print(f"best epoch {result.best_epoch}; checkpoint written to {out / 'model.ckpt'}")
    return status


def _load_checkpoint(path) -> ModelCheckpoint:
    if not Path(path).is_file():
        raise CliError(f"checkpoint {path} not found")
    return ModelCheckpoint.load(path)


def cmd_eval(args) -> int:
    out = _out_dir(args)
    ckpt = _load_checkpoint(args.checkpoint)
    prepared = Path(args.prepared)
    vocab, genres = _load_prepared(prepared)
    if vocab.itos != ckpt.vocab:
        raise CliError("vocabulary of the checkpoint does not match the prepared corpus")
    if genres != ckpt.genres:
        raise CliError("genre labels of the checkpoint do not match the prepared corpus")
    records = _split_records(_records_by_id(args.corpus), prepared, args.split)
    model = ckpt.build()
    index = {g: i for i, g in enumerate(genres)}
    records = [r for r in records if r.genre in index]
    songs = [encode_song(r.lyrics, vocab, index[r.genre]) for r in records]
    acc, cm, preds = evaluate(model, songs, genres)
    if args.top_genres:
        cm_out = cm.restrict(args.top_genres)
    else:
        cm_out = cm
    cm_out.to_csv(out / "confusion.csv")
    with open(out / "predictions.csv", "w", encoding="utf-8") as fh:
        fh.write("id,true,predicted\n")
        for rec, song, pred in zip(records, songs, preds):
            fh.write(f"{rec.id},{genres[song.genre_id]},{genres[int(pred)]}\n")
    print(f"{ckpt.config.arch} {args.split} accuracy: {100 * acc:.2f}")
    return 0


def cmd_predict(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    model = ckpt.build()
    vocab = ckpt.vocabulary()
    if args.corpus:
        items = [(r.id, r.lyrics) for r in read_corpus(args.corpus)]
    else:
        items = [(Path(p).name, Path(p).read_text(encoding="utf-8")) for p in args.lyrics]
    lines = []
    for name, text in items:
        song = encode_song(text, vocab)
        if song.n_tokens() == 0:
            raise CliError(f"{name}: lyrics contain no tokens")
        p = model.predict_proba(model.batch([song]))[0]
        lines.append(f"{name}\t{ckpt.genres[int(np.argmax(p))]}\t{float(np.max(p)):.4f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_visualize(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    if ckpt.config.arch not in ("han-l", "han-s"):
        raise CliError(f"model type {ckpt.config.arch!r} has no attention to visualize; "
                       "train a han-l or han-s model")
    model = ckpt.build()
    text = Path(args.lyrics).read_text(encoding="utf-8")
    song = encode_song(text, ckpt.vocabulary())
    if song.n_tokens() == 0:
        raise CliError(f"{args.lyrics}: lyrics contain no tokens")
    try:
        report = attention_report(model, song, ckpt.genres, top_k=args.top_k)
    except NoAttentionError as exc:
        raise CliError(str(exc)) from None
    target, sidecar = write_visualization(report, _out_dir(args), args.format)
    if args.format == "ansi":
        sys.stdout.write(render_ansi(report))
    print(f"wrote {target} and {sidecar}")
    return 0


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lyrichan",
                                     description="Hierarchical attention genre classifier for lyrics")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="deduplicate, filter genres, split, build vocabulary")
    p.add_argument("--corpus", required=True, help="JSON-lines corpus")
    p.add_argument("--filter", default="min-count:50", help="min-count:K or top-n:N")
    p.add_argument("--split", type=_parse_fractions, default=(0.8, 0.1, 0.1))
    p.add_argument("--max-vocab", type=int, default=30_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or .)")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("fetch-genres", help="tag records with genres from a search API")
    p.add_argument("--corpus", required=True)
    p.add_argument("--output", required=True, help="tagged JSON-lines output")
    p.add_argument("--base-url", required=True)
    p.add_argument("--query-template", default=EndpointConfig.query_template)
    p.add_argument("--genre-field", default=EndpointConfig.genre_field)
    p.add_argument("--rate-limit", type=float, default=10.0, help="requests per second")
    p.add_argument("--attempts", type=int, default=3)
    p.set_defaults(func=cmd_fetch_genres)

    p = sub.add_parser("train", help="train a model on prepared splits")
    p.add_argument("--corpus", required=True)
    p.add_argument("--prepared", required=True, help="directory written by 'prepare'")
    p.add_argument("--model", required=True, choices=ARCHITECTURES)
    p.add_argument("--glove", help="pretrained vectors in GloVe text format")
    p.add_argument("--freeze-embeddings", action="store_true")
    p.add_argument("--embed-dim", type=int, default=100)
    p.add_argument("--hidden-size", type=int, default=50)
    p.add_argument("--attention-size", type=int, default=100)
    p.add_argument("--max-units", type=int, default=None,
                   help="lines (default 60) or segments (default 10)")
    p.add_argument("--max-words", type=int, default=None,
                   help="words per unit (default 10 for lines, 60 for segments)")
    p.add_argument("--max-seq-len", type=int, default=600, help="LSTM song length")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--rmsprop-decay", type=float, default=0.9)
    p.add_argument("--rmsprop-epsilon", type=float, default=1e-8)
    p.add_argument("--dropout-p", type=float, default=0.5)
    p.add_argument("--clip-norm", type=float, default=1.0)
    p.add_argument("--patience", type=int, default=3, help="0 disables early stopping")
    p.add_argument("--max-epochs", type=int, default=50)
    p.add_argument("--precision", choices=("float32", "float64"), default="float32")
    p.add_argument("--record-wall-time", action="store_true",
                   help="fill the wall_seconds column of history.csv")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and confusion matrix on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--prepared", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--top-genres", type=int, default=None,
                   help="restrict the confusion CSV to the K most frequent genres")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict genres for lyrics")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--lyrics", nargs="+", help="plain-text lyrics files")
    src.add_argument("--corpus", help="JSON-lines corpus")
    p.add_argument("--out", help="also write predictions to this file")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("visualize", help="render attention weights of a HAN checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lyrics", required=True, help="plain-text lyrics file")
    p.add_argument("--format", choices=("ansi", "html"), default="html")
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigurationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
