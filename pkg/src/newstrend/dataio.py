"""File formats: news, prices, stopwords, embeddings, datasets, reports.

Text formats are line-oriented and plot-ready (CSV with a header row except
the news file, which is one tab-separated record per line).  The prepared
dataset is a single versioned binary file: each nonempty daily corpus is
stored once and samples reference it, since adjacent windows overlap in
all but one day.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from datetime import date

import numpy as np

from .corpus import (
    DailyCorpus,
    DatasetSplit,
    LabelThresholds,
    NewsRecord,
    PriceBar,
    Sample,
    SkipRecord,
    Trend,
    Vocabulary,
    WordEmbeddings,
    deterministic_embeddings,
)

DATASET_MAGIC = b"NEWSTREND-DATA-1\n"
DATASET_FORMAT = 1


class InputError(Exception):
    """Raised for unreadable or malformed input files."""


def _parse_date(text: str, path, lineno: int) -> date:
    try:
        return date.fromisoformat(text)
    except ValueError as exc:
        raise InputError(f"{path}:{lineno}: bad date {text!r}") from exc


def read_news(path) -> list[NewsRecord]:
    """Tab-separated records: date, stock_id, title, content."""
    records = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t", 3)
                if len(parts) != 4:
                    raise InputError(f"{path}:{lineno}: expected 4 tab-separated fields")
                day, stock_id, title, content = parts
                if not stock_id:
                    raise InputError(f"{path}:{lineno}: empty stock_id")
                records.append(
                    NewsRecord(
                        timestamp=_parse_date(day, path, lineno),
                        stock_id=stock_id,
                        title=title,
                        content=content,
                    )
                )
    except OSError as exc:
        raise InputError(f"cannot read news file {path}: {exc}") from exc
    return records


def write_news(path, records: list[NewsRecord]) -> None:
    def clean(text: str) -> str:
        return text.replace("\t", " ").replace("\n", " ")

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(f"{r.timestamp.isoformat()}\t{r.stock_id}\t{clean(r.title)}\t{clean(r.content)}\n")


def read_prices(path) -> list[PriceBar]:
    """CSV with header: date,stock_id,open."""
    bars = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n")
            if header.replace(" ", "") != "date,stock_id,open":
                raise InputError(f"{path}:1: expected header 'date,stock_id,open'")
            for lineno, line in enumerate(fh, start=2):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split(",")
                if len(parts) != 3:
                    raise InputError(f"{path}:{lineno}: expected 3 fields")
                day, stock_id, open_txt = parts
                try:
                    open_price = float(open_txt)
                except ValueError as exc:
                    raise InputError(f"{path}:{lineno}: bad open price {open_txt!r}") from exc
                if open_price <= 0:
                    raise InputError(f"{path}:{lineno}: open price must be positive")
                bars.append(
                    PriceBar(date=_parse_date(day, path, lineno), stock_id=stock_id, open=open_price)
                )
    except OSError as exc:
        raise InputError(f"cannot read price file {path}: {exc}") from exc
    return bars


def write_prices(path, bars: list[PriceBar]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("date,stock_id,open\n")
        for b in bars:
            fh.write(f"{b.date.isoformat()},{b.stock_id},{b.open!r}\n")


def read_stopwords(path) -> frozenset[str]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return frozenset(w.strip().lower() for w in fh if w.strip())
    except OSError as exc:
        raise InputError(f"cannot read stopword file {path}: {exc}") from exc


def load_embeddings(path, vocab: Vocabulary, fallback_seed: int = 0) -> WordEmbeddings:
    """Text format: header "count dim", then "word v1 ... vD" per line.

    Vocabulary words absent from the file get the deterministic fallback
    vector, so a partial file still yields a complete embedding table.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().split()
            if len(header) != 2:
                raise InputError(f"{path}:1: expected header 'count dim'")
            try:
                dim = int(header[1])
            except ValueError as exc:
                raise InputError(f"{path}:1: bad dimension {header[1]!r}") from exc
            if dim < 1:
                raise InputError(f"{path}:1: dimension must be >= 1")
            emb = deterministic_embeddings(vocab, dim, fallback_seed)
            for lineno, line in enumerate(fh, start=2):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != dim + 1:
                    raise InputError(
                        f"{path}:{lineno}: expected {dim} values for {parts[0]!r}, got {len(parts) - 1}"
                    )
                idx = vocab.index.get(parts[0])
                if idx is None:
                    continue
                try:
                    emb.vectors[idx] = [float(v) for v in parts[1:]]
                except ValueError as exc:
                    raise InputError(f"{path}:{lineno}: bad float") from exc
    except OSError as exc:
        raise InputError(f"cannot read embedding file {path}: {exc}") from exc
    return emb


def write_embeddings(path, words: list[str], vectors: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{len(words)} {vectors.shape[1]}\n")
        for word, vec in zip(words, vectors):
            fh.write(word + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def write_skip_report(path, skips: list[SkipRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("stock_id,date,reason\n")
        for s in skips:
            fh.write(f"{s.stock_id},{s.date.isoformat()},{s.reason}\n")


def write_threshold_report(path, th: LabelThresholds, source: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("down_cut,up_cut,source\n")
        fh.write(f"{th.down_cut!r},{th.up_cut!r},{source}\n")


def write_balance_report(path, split: DatasetSplit) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("split,label,count,share\n")
        for name, samples in (("train", split.train), ("validation", split.validation),
                              ("test", split.test)):
            total = len(samples)
            for cls in Trend:
                n = sum(1 for s in samples if s.label == cls)
                share = n / total if total else 0.0
                fh.write(f"{name},{cls.name},{n},{share!r}\n")


def write_truth(path, truth) -> None:
    """Ground-truth report for synthetic data (one CSV, row kind column)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("kind,stock_id,date,news_index,carries_signal,word_class,matches_label,"
                 "label,rise,corrupted,word\n")
        for cls, words in truth.signal_words.items():
            for w in words:
                fh.write(f"signal_word,,,,,{cls.name},,,,,{w}\n")
        for t in truth.news:
            wc = t.word_class.name if t.word_class is not None else ""
            fh.write(
                f"news,{t.stock_id},{t.date.isoformat()},{t.news_index},"
                f"{int(t.carries_signal)},{wc},{int(t.matches_label)},,,,\n"
            )
        for lab in truth.labels:
            fh.write(
                f"label,{lab.stock_id},{lab.target_date.isoformat()},,,,,"
                f"{lab.label.name},{lab.rise!r},{int(lab.corrupted)},\n"
            )


def read_truth(path):
    """Parse the ground-truth report back into a GroundTruth."""
    from .synth import GroundTruth, LabelTruth, NewsTruth

    signal_words: dict[Trend, list[str]] = {t: [] for t in Trend}
    news_rows: list[NewsTruth] = []
    label_rows: list[LabelTruth] = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline()
            if not header.startswith("kind,"):
                raise InputError(f"{path}:1: not a ground-truth report")
            for lineno, line in enumerate(fh, start=2):
                parts = line.rstrip("\n").split(",")
                if len(parts) != 11:
                    raise InputError(f"{path}:{lineno}: expected 11 fields")
                kind = parts[0]
                if kind == "signal_word":
                    signal_words[Trend[parts[5]]].append(parts[10])
                elif kind == "news":
                    news_rows.append(
                        NewsTruth(
                            stock_id=parts[1],
                            date=date.fromisoformat(parts[2]),
                            news_index=int(parts[3]),
                            carries_signal=bool(int(parts[4])),
                            word_class=Trend[parts[5]] if parts[5] else None,
                            matches_label=bool(int(parts[6])),
                        )
                    )
                elif kind == "label":
                    label_rows.append(
                        LabelTruth(
                            stock_id=parts[1],
                            target_date=date.fromisoformat(parts[2]),
                            label=Trend[parts[7]],
                            rise=float(parts[8]),
                            corrupted=bool(int(parts[9])),
                        )
                    )
                else:
                    raise InputError(f"{path}:{lineno}: unknown row kind {kind!r}")
    except OSError as exc:
        raise InputError(f"cannot read truth report {path}: {exc}") from exc
    return GroundTruth(signal_words=signal_words, news=news_rows, labels=label_rows)


# ---------------------------------------------------------------------------
# Prepared dataset file
# ---------------------------------------------------------------------------


@dataclass
class PreparedDataset:
    split: DatasetSplit
    thresholds: LabelThresholds
    dim: int
    n_days: int


def save_dataset(path, prepared: PreparedDataset) -> None:
    corpora: list[DailyCorpus] = []
    corpus_ids: dict[int, int] = {}  # id(corpus) -> index; windows share objects

    def corpus_ref(day: DailyCorpus) -> int:
        if len(day) == 0:
            return -1
        key = id(day)
        if key not in corpus_ids:
            corpus_ids[key] = len(corpora)
            corpora.append(day)
        return corpus_ids[key]

    def sample_rec(s: Sample) -> dict:
        return {
            "stock": s.stock_id,
            "target": s.target_date.isoformat(),
            "label": int(s.label),
            "rise": s.rise_percent,
            "dates": [d.date.isoformat() for d in s.window],
            "refs": [corpus_ref(d) for d in s.window],
        }

    split = prepared.split
    header = {
        "format": DATASET_FORMAT,
        "dim": prepared.dim,
        "n_days": prepared.n_days,
        "thresholds": {"down": prepared.thresholds.down_cut, "up": prepared.thresholds.up_cut},
        "splits": {
            "train": [sample_rec(s) for s in split.train],
            "validation": [sample_rec(s) for s in split.validation],
            "test": [sample_rec(s) for s in split.test],
        },
        "corpora": None,  # filled below once refs are assigned
    }
    header["corpora"] = [{"n": len(c)} for c in corpora]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for c in corpora:
            fh.write(np.ascontiguousarray(c.news_vectors, dtype="<f8").tobytes())


def load_dataset(path) -> PreparedDataset:
    try:
        with open(path, "rb") as fh:
            magic = fh.read(len(DATASET_MAGIC))
            if magic != DATASET_MAGIC:
                raise InputError(f"{path}: not a prepared dataset (bad magic)")
            (hlen,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(hlen).decode("utf-8"))
            if header.get("format") != DATASET_FORMAT:
                raise InputError(f"{path}: unsupported dataset format {header.get('format')}")
            dim = int(header["dim"])
            corpora_data = []
            for entry in header["corpora"]:
                n = int(entry["n"])
                raw = fh.read(8 * n * dim)
                if len(raw) != 8 * n * dim:
                    raise InputError(f"{path}: truncated corpus block")
                corpora_data.append(
                    np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(n, dim)
                )
    except (OSError, struct.error, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InputError(f"{path}: cannot read dataset ({exc})") from exc

    corpus_cache: dict[tuple[int, str], DailyCorpus] = {}

    def make_window(dates: list[str], refs: list[int]) -> list[DailyCorpus]:
        window = []
        for day_iso, ref in zip(dates, refs):
            key = (ref, day_iso)
            if key not in corpus_cache:
                vecs = corpora_data[ref] if ref >= 0 else np.zeros((0, dim))
                corpus_cache[key] = DailyCorpus(date=date.fromisoformat(day_iso), news_vectors=vecs)
            window.append(corpus_cache[key])
        return window

    def make_samples(recs: list[dict]) -> list[Sample]:
        return [
            Sample(
                stock_id=r["stock"],
                target_date=date.fromisoformat(r["target"]),
                window=make_window(r["dates"], r["refs"]),
                label=Trend(r["label"]),
                rise_percent=float(r["rise"]),
            )
            for r in recs
        ]

    split = DatasetSplit(
        train=make_samples(header["splits"]["train"]),
        validation=make_samples(header["splits"]["validation"]),
        test=make_samples(header["splits"]["test"]),
    )
    th = LabelThresholds(
        down_cut=float(header["thresholds"]["down"]), up_cut=float(header["thresholds"]["up"])
    )
    return PreparedDataset(split=split, thresholds=th, dim=dim, n_days=int(header["n_days"]))
