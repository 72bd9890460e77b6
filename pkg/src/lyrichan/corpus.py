"""Lyrics corpus ingestion: tokenization, deduplication, genre filtering, splits."""

from __future__ import annotations

import json
import logging
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

logger = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


class ConfigurationError(ValueError):
    """Raised when a pipeline configuration leaves nothing to work with."""


@dataclass(frozen=True)
class RawRecord:
    id: str
    artist: str
    title: str
    lyrics: str
    genre: str | None = None

    @classmethod
    def from_dict(cls, obj: dict) -> "RawRecord":
        return cls(
            id=str(obj["id"]),
            artist=str(obj.get("artist", "")),
            title=str(obj.get("title", "")),
            lyrics=str(obj.get("lyrics", "")),
            genre=obj.get("genre") or None,
        )

    def to_dict(self) -> dict:
        out = {"id": self.id, "artist": self.artist, "title": self.title, "lyrics": self.lyrics}
        if self.genre is not None:
            out["genre"] = self.genre
        return out


@dataclass
class Song:
    """A tokenized song as segments -> lines -> token ids."""

    segments: list[list[list[int]]]
    genre_id: int = -1
    # Token strings parallel to ``segments``; kept for visualization.
    tokens: list[list[list[str]]] | None = field(default=None, repr=False)

    def n_tokens(self) -> int:
        return sum(len(line) for seg in self.segments for line in seg)


# -- tokenization ---------------------------------------------------------------------

def _is_token_char(ch: str) -> bool:
    return ch.isalnum() or ch == "'"


def tokenize_line(line: str) -> list[str]:
    """Maximal runs of letters, digits and apostrophes, lowercased."""
    tokens = []
    current: list[str] = []
    for ch in line:
        if _is_token_char(ch):
            current.append(ch)
        elif current:
            tokens.append("".join(current).lower())
            current = []
    if current:
        tokens.append("".join(current).lower())
    return tokens


def tokenize(lyrics: str) -> list[list[list[str]]]:
    """Split lyrics into segments (blank-line delimited) of lines of tokens.

    Lines with no tokens inside a segment are dropped; empty segments vanish.

    >>> tokenize("Happy birthday to you\\n\\nDear friend")
    [[['happy', 'birthday', 'to', 'you']], [['dear', 'friend']]]
    """
    segments: list[list[list[str]]] = []
    current: list[list[str]] = []
    for raw in lyrics.splitlines():
        if not raw.strip():
            if current:
                segments.append(current)
                current = []
            continue
        tokens = tokenize_line(raw)
        if tokens:
            current.append(tokens)
    if current:
        segments.append(current)
    return segments


def detokenize(segments: Sequence[Sequence[Sequence[str]]]) -> str:
    return "\n\n".join("\n".join(" ".join(line) for line in seg) for seg in segments)


def normalized_text(lyrics: str) -> str:
    """Whitespace-joined token sequence; the deduplication key."""
    return " ".join(tok for seg in tokenize(lyrics) for line in seg for tok in line)


# -- vocabulary ----------------------------------------------------------------------

class Vocabulary:
    """Bidirectional token <-> id map with PAD = 0 and UNK = 1."""

    def __init__(self, tokens: Iterable[str]):
        self.itos: list[str] = [PAD_TOKEN, UNK_TOKEN]
        self.stoi: dict[str, int] = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
        self.counts: dict[str, int] = {}
        for tok in tokens:
            if tok in self.stoi:
                raise ValueError(f"duplicate or reserved token {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi and self.stoi[token] > UNK_ID

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        idx = self.stoi.get(token, UNK_ID)
        return UNK_ID if idx == PAD_ID else idx

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ValueError(f"{path}: vocabulary must start with {PAD_TOKEN} and {UNK_TOKEN}")
        return cls(lines[2:])


def count_tokens(records: Iterable[RawRecord]) -> Counter:
    counts: Counter = Counter()
    for rec in records:
        for seg in tokenize(rec.lyrics):
            for line in seg:
                counts.update(line)
    return counts


def build_vocabulary(records: Iterable[RawRecord], max_size: int = 30_000) -> Vocabulary:
    """Keep the ``max_size`` most frequent tokens; ties broken lexicographically."""
    counts = Counter()
    n = 0
    for rec in records:
        n += 1
        counts.update(count_tokens([rec]))
    if n == 0:
        raise ConfigurationError("cannot build a vocabulary from an empty corpus")
    counts.pop(PAD_TOKEN, None)
    counts.pop(UNK_TOKEN, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:max_size]
    vocab = Vocabulary(tok for tok, _ in ranked)
    vocab.counts = dict(ranked)
    return vocab


def encode_song(lyrics: str, vocab: Vocabulary, genre_id: int = -1) -> Song:
    tokens = tokenize(lyrics)
    ids = [[vocab.encode(line) for line in seg] for seg in tokens]
    return Song(segments=ids, genre_id=genre_id, tokens=tokens)


# -- deduplication and filtering -------------------------------------------------------

def deduplicate(records: Sequence[RawRecord], seed: int = 0) -> list[RawRecord]:
    """Keep one randomly chosen record per group of identical normalized lyrics.

    Groups are ordered by first appearance, so the output order is stable.
    """
    groups: dict[str, list[RawRecord]] = {}
    for rec in records:
        groups.setdefault(normalized_text(rec.lyrics), []).append(rec)
    rng = random.Random(seed)
    return [members[rng.randrange(len(members))] if len(members) > 1 else members[0]
            for members in groups.values()]


def rank_genres(counts: Counter) -> list[str]:
    """Genres by descending frequency, ties lexicographic."""
    return [g for g, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))]


def parse_filter_mode(spec: str) -> tuple[str, int]:
    """Parse ``"min-count:50"`` or ``"top-n:20"``."""
    try:
        kind, value = spec.split(":")
        value = int(value)
    except ValueError:
        raise ConfigurationError(f"bad filter mode {spec!r}; expected min-count:K or top-n:N") from None
    if kind not in ("min-count", "top-n") or value < 1:
        raise ConfigurationError(f"bad filter mode {spec!r}")
    return kind, value


def filter_genres(records: Sequence[RawRecord], mode: str | tuple[str, int]
                  ) -> tuple[list[RawRecord], list[str]]:
    """Drop rare genres. Returns surviving records and the genre label list (id order)."""
    kind, value = parse_filter_mode(mode) if isinstance(mode, str) else mode
    missing = [r.id for r in records if r.genre is None]
    if missing:
        raise ConfigurationError(f"{len(missing)} records have no genre (first: {missing[0]})")
    counts = Counter(r.genre for r in records)
    ranked = rank_genres(counts)
    if kind == "min-count":
        labels = [g for g in ranked if counts[g] >= value]
    elif kind == "top-n":
        labels = ranked[:value]
    else:
        raise ConfigurationError(f"unknown filter kind {kind!r}")
    if not labels:
        raise ConfigurationError(f"no genre survives filter {kind}:{value}")
    keep = set(labels)
    return [r for r in records if r.genre in keep], labels


# -- splitting ----------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fractions = (self.train, self.val, self.test)
        if any(f <= 0 for f in fractions):
            raise ConfigurationError("split fractions must be positive")
        if abs(sum(fractions) - 1.0) > 1e-9:
            raise ConfigurationError(f"split fractions sum to {sum(fractions)}, expected 1")

    def sizes(self, n: int) -> tuple[int, int, int]:
        """Floor the val/test shares; the remainder goes to training."""
        # Guard against products like 0.1 * 70 landing just below an integer.
        n_val = int(n * self.val + 1e-9)
        n_test = int(n * self.test + 1e-9)
        return n - n_val - n_test, n_val, n_test


def split(records: Sequence[RawRecord], spec: SplitSpec = SplitSpec()
          ) -> tuple[list[RawRecord], list[RawRecord], list[RawRecord]]:
    n_train, n_val, n_test = spec.sizes(len(records))
    if min(n_train, n_val, n_test) == 0:
        raise ConfigurationError(
            f"{len(records)} records give an empty split ({n_train}/{n_val}/{n_test})")
    order = list(range(len(records)))
    random.Random(spec.seed).shuffle(order)
    shuffled = [records[i] for i in order]
    return (shuffled[:n_train], shuffled[n_train:n_train + n_val],
            shuffled[n_train + n_val:])


# -- file formats ----------------------------------------------------------------------

def iter_jsonl(path: str | Path) -> Iterator[RawRecord]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield RawRecord.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad record ({exc})") from None


def read_corpus(path: str | Path) -> list[RawRecord]:
    records = list(iter_jsonl(path))
    seen: set[str] = set()
    for rec in records:
        if rec.id in seen:
            raise ValueError(f"{path}: duplicate record id {rec.id!r}")
        seen.add(rec.id)
    return records


def write_corpus(records: Iterable[RawRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def write_manifest(records: Iterable[RawRecord], path: str | Path) -> None:
    Path(path).write_text("".join(f"{r.id}\n" for r in records), encoding="utf-8")


def read_manifest(path: str | Path) -> list[str]:
    return [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line]


def encode_records(records: Iterable[RawRecord], vocab: Vocabulary,
                   genres: Sequence[str]) -> list[Song]:
    """Encode labelled records; records whose genre is not in ``genres`` are skipped."""
    index = {g: i for i, g in enumerate(genres)}
    songs = []
    for rec in records:
        if rec.genre not in index:
            continue
        song = encode_song(rec.lyrics, vocab, index[rec.genre])
        if song.n_tokens() == 0:
            logger.warning("record %s has no tokens; skipped", rec.id)
            continue
        songs.append(song)
    return songs
