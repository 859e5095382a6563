"""Turn raw news and prices into labeled, windowed training samples.

The trading calendar is whatever dates appear in the price data: for a given
stock, "the next day" means the next date with a price.  A prediction sample
for target date t uses the news corpora of the N preceding trading dates,
never the target date itself or anything later.
"""

from __future__ import annotations

import hashlib
import re
from collections import Counter, defaultdict
from dataclasses import dataclass
from datetime import date
from enum import IntEnum

import numpy as np

# Default cuts used when thresholds are not recomputed from the data.
DEFAULT_DOWN_CUT = -0.0041
DEFAULT_UP_CUT = 0.0087

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


class Trend(IntEnum):
    DOWN = 0
    PRESERVE = 1
    UP = 2


@dataclass(frozen=True)
class NewsRecord:
    timestamp: date
    stock_id: str
    title: str
    content: str


@dataclass(frozen=True)
class PriceBar:
    date: date
    stock_id: str
    open: float

    def __post_init__(self):
        if self.open <= 0:
            raise ValueError(f"open price must be positive, got {self.open}")


@dataclass
class Vocabulary:
    index: dict[str, int]
    counts: dict[str, int]

    def __len__(self) -> int:
        return len(self.index)

    def __contains__(self, word: str) -> bool:
        return word in self.index


@dataclass
class WordEmbeddings:
    dim: int
    vectors: np.ndarray  # (vocab_size, dim), row i = word with index i

    def lookup(self, idx: int) -> np.ndarray:
        return self.vectors[idx]


@dataclass(frozen=True)
class LabelThresholds:
    down_cut: float
    up_cut: float

    def __post_init__(self):
        if not self.down_cut < self.up_cut:
            raise ValueError(f"down_cut {self.down_cut} must be below up_cut {self.up_cut}")


@dataclass
class DailyCorpus:
    date: date
    news_vectors: np.ndarray  # (n_news, dim); n_news may be 0

    def __len__(self) -> int:
        return self.news_vectors.shape[0]


@dataclass
class Sample:
    stock_id: str
    target_date: date
    window: list[DailyCorpus]  # length N, oldest first, all dates < target_date
    label: Trend
    rise_percent: float


@dataclass
class SkipRecord:
    stock_id: str
    date: date
    reason: str


@dataclass
class DatasetSplit:
    train: list[Sample]
    validation: list[Sample]
    test: list[Sample]


def tokenize(text: str) -> list[str]:
    """Lowercased runs of alphanumeric characters."""
    return _TOKEN_RE.findall(text.lower())


def build_vocabulary(
    news: list[NewsRecord],
    stopwords: set[str] | frozenset[str] = frozenset(),
    min_count: int = 5,
) -> Vocabulary:
    """Retain non-stopword tokens seen at least ``min_count`` times.

    Indices are assigned in descending count order, ties lexicographic, so
    the vocabulary is independent of input ordering.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts: Counter[str] = Counter()
    for rec in news:
        counts.update(tokenize(rec.title))
        counts.update(tokenize(rec.content))
    kept = {w: c for w, c in counts.items() if c >= min_count and w not in stopwords}
    ordered = sorted(kept.items(), key=lambda item: (-item[1], item[0]))
    return Vocabulary(
        index={w: i for i, (w, _) in enumerate(ordered)},
        counts={w: c for w, c in ordered},
    )


def _word_rng(seed: int, word: str) -> np.random.Generator:
    # Stateless per word: keyed hash, independent of iteration order.
    digest = hashlib.blake2b(f"{seed}\x00{word}".encode("utf-8"), digest_size=8).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))


def deterministic_embeddings(vocab: Vocabulary, dim: int, seed: int) -> WordEmbeddings:
    """Pseudo-random unit-scale-free vectors in uniform(-0.5/dim, 0.5/dim).

    Each word's vector depends only on (seed, word), never on vocabulary
    order, so adding words elsewhere cannot shift existing vectors.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    vectors = np.zeros((len(vocab), dim))
    half = 0.5 / dim
    for word, idx in vocab.index.items():
        vectors[idx] = _word_rng(seed, word).uniform(-half, half, size=dim)
    return WordEmbeddings(dim=dim, vectors=vectors)


def embed_news(record: NewsRecord, emb: WordEmbeddings, vocab: Vocabulary) -> np.ndarray:
    """Mean embedding of in-vocabulary tokens (title then content).

    Empty or fully out-of-vocabulary text maps to the zero vector.
    """
    total = np.zeros(emb.dim)
    n = 0
    for word in tokenize(record.title) + tokenize(record.content):
        idx = vocab.index.get(word)
        if idx is not None:
            total += emb.vectors[idx]
            n += 1
    return total / n if n else total


def rise_percent(open_t: float, open_next: float) -> float:
    if open_t <= 0:
        raise ValueError(f"open price must be positive, got {open_t}")
    return (open_next - open_t) / open_t


def compute_thresholds(rises) -> LabelThresholds:
    """Tertile cuts so the three classes come out approximately even."""
    arr = np.asarray(rises, dtype=np.float64)
    if np.unique(arr).size < 3:
        raise ValueError("need at least 3 distinct rise values to place two cuts")
    down_cut, up_cut = np.quantile(arr, [1.0 / 3.0, 2.0 / 3.0], method="linear")
    return LabelThresholds(down_cut=float(down_cut), up_cut=float(up_cut))


def label(rp: float, th: LabelThresholds) -> Trend:
    if rp < th.down_cut:
        return Trend.DOWN
    if rp > th.up_cut:
        return Trend.UP
    return Trend.PRESERVE


def build_samples(
    news: list[NewsRecord],
    prices: list[PriceBar],
    emb: WordEmbeddings,
    vocab: Vocabulary,
    th: LabelThresholds,
    n_days: int = 10,
    max_news: int = 30,
) -> tuple[list[Sample], list[SkipRecord]]:
    """One sample per (stock, date) with N prior trading dates and a next open.

    Each window day's corpus keeps at most ``max_news`` vectors, earliest
    news first; days with no news get an empty corpus.  Candidates lacking
    history or a next open are reported, not silently dropped.
    """
    if n_days < 1 or max_news < 1:
        raise ValueError("n_days and max_news must be >= 1")

    by_stock_day: dict[tuple[str, date], list[NewsRecord]] = defaultdict(list)
    for rec in news:
        by_stock_day[(rec.stock_id, rec.timestamp)].append(rec)

    dim = emb.dim
    empty = np.zeros((0, dim))
    corpus_cache: dict[tuple[str, date], DailyCorpus] = {}

    def day_corpus(stock_id: str, day: date) -> DailyCorpus:
        key = (stock_id, day)
        cached = corpus_cache.get(key)
        if cached is not None:
            return cached
        recs = by_stock_day.get(key)
        if not recs:
            corpus = DailyCorpus(date=day, news_vectors=empty)
        else:
            vecs = [embed_news(r, emb, vocab) for r in recs[:max_news]]
            corpus = DailyCorpus(date=day, news_vectors=np.array(vecs))
        corpus_cache[key] = corpus
        return corpus

    opens: dict[str, dict[date, float]] = defaultdict(dict)
    for bar in prices:
        opens[bar.stock_id][bar.date] = bar.open

    samples: list[Sample] = []
    skips: list[SkipRecord] = []
    for stock_id in sorted(opens):
        days = sorted(opens[stock_id])
        for j, target in enumerate(days):
            if j < n_days:
                skips.append(SkipRecord(stock_id, target, "insufficient_history"))
                continue
            if j + 1 >= len(days):
                skips.append(SkipRecord(stock_id, target, "no_next_open"))
                continue
            rp = rise_percent(opens[stock_id][target], opens[stock_id][days[j + 1]])
            window = [day_corpus(stock_id, days[j - n_days + k]) for k in range(n_days)]
            samples.append(
                Sample(
                    stock_id=stock_id,
                    target_date=target,
                    window=window,
                    label=label(rp, th),
                    rise_percent=rp,
                )
            )
    samples.sort(key=lambda s: (s.stock_id, s.target_date))
    return samples, skips


def split_dataset(
    samples: list[Sample],
    train_frac: float = 2.0 / 3.0,
    val_frac_of_train: float = 0.1,
    seed: int = 0,
) -> DatasetSplit:
    """Chronological train/test cut plus a seeded random validation draw.

    All samples sharing a target date land on the same side of the cut, so
    max(train/val dates) < min(test dates) holds strictly.
    """
    if not samples:
        raise ValueError("cannot split an empty sample list")
    ordered = sorted(samples, key=lambda s: (s.target_date, s.stock_id))
    k = int(train_frac * len(ordered))
    if k < 1 or k >= len(ordered):
        raise ValueError(f"train_frac {train_frac} leaves an empty partition")
    cut_date = ordered[k - 1].target_date
    train_side = [s for s in ordered if s.target_date <= cut_date]
    test = [s for s in ordered if s.target_date > cut_date]
    if not test:
        raise ValueError(f"train_frac {train_frac} leaves an empty test partition")

    n_val = int(val_frac_of_train * len(train_side))
    if val_frac_of_train > 0 and n_val < 1:
        raise ValueError("training set too small to draw a validation set from")
    rng = np.random.Generator(np.random.PCG64(seed))
    val_idx = set(rng.choice(len(train_side), size=n_val, replace=False).tolist())
    validation = [s for i, s in enumerate(train_side) if i in val_idx]
    train = [s for i, s in enumerate(train_side) if i not in val_idx]
    return DatasetSplit(train=train, validation=validation, test=test)
