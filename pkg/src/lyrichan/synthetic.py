"""Synthetic lyrics corpora with a known genre signal, for smoke tests and demos."""

from __future__ import annotations

import numpy as np

from .corpus import RawRecord


def genre_word(genre: int, i: int) -> str:
    return f"g{genre}w{i}"


def filler_word(i: int) -> str:
    return f"filler{i}"


def separable_corpus(n_songs: int = 2000, n_genres: int = 10, words_per_genre: int = 50,
                     n_filler: int = 50, filler_fraction: float = 0.3,
                     segments: tuple[int, int] = (2, 3), lines: tuple[int, int] = (2, 4),
                     words: tuple[int, int] = (3, 7), skew: float = 1.0,
                     seed: int = 0) -> list[RawRecord]:
    """Songs whose genre words come from disjoint per-genre vocabularies.

    Each token is a shared filler word with probability ``filler_fraction``,
    otherwise a word from the song's genre vocabulary. Genre frequencies follow
    ``1 / (rank + 1) ** skew`` so there is a clear majority class.
    """
    rng = np.random.default_rng(seed)
    weights = 1.0 / np.arange(1, n_genres + 1) ** skew
    weights /= weights.sum()
    labels = rng.choice(n_genres, size=n_songs, p=weights)
    records = []
    for k, g in enumerate(labels):
        segs = []
        for _ in range(rng.integers(segments[0], segments[1] + 1)):
            seg_lines = []
            for _ in range(rng.integers(lines[0], lines[1] + 1)):
                n = rng.integers(words[0], words[1] + 1)
                toks = [filler_word(rng.integers(n_filler)) if rng.random() < filler_fraction
                        else genre_word(g, rng.integers(words_per_genre)) for _ in range(n)]
                seg_lines.append(" ".join(toks))
            segs.append("\n".join(seg_lines))
        records.append(RawRecord(id=f"song{k:05d}", artist=f"artist{k % 97}",
                                 title=f"title {k}", lyrics="\n\n".join(segs),
                                 genre=f"genre{g:02d}"))
    return records
