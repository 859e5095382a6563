"""Synthetic planted-signal datasets for end-to-end verification.

Each trading day draws a uniform class; the class picks the rise interval,
and prices multiply so open-to-open rises reproduce the drawn values.  The
news published the day before a target date contain one "planted" item whose
words come from a class-specific word set: the true class with probability
``signal_fidelity``, a uniformly random class otherwise, or a deliberately
wrong class when the unit is marked corrupted.  Every other item is pure
noise.  The ground-truth report records exactly which items were planted,
which is what makes attention weights auditable downstream.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import date, timedelta

import numpy as np

from .corpus import NewsRecord, PriceBar, Trend

# Class-conditional rise intervals, separated by gaps wide enough that both
# the default cuts and recomputed tertiles label every draw identically.
RISE_INTERVALS = {
    Trend.DOWN: (-0.060, -0.006),
    Trend.PRESERVE: (-0.003, 0.007),
    Trend.UP: (0.010, 0.060),
}


@dataclass
class SynthConfig:
    stocks: int = 10
    days: int = 60
    vocab_size: int = 500
    dim: int = 32
    signal_words_per_class: int = 12
    signal_fidelity: float = 0.9
    mean_news_per_day: float = 4.0
    no_news_day_prob: float = 0.0
    corrupt_frac: float = 0.0
    words_per_news: int = 10
    signal_words_per_news: int = 3
    start_date: date = date(2020, 1, 1)

    def __post_init__(self):
        if not (1.0 / 3.0 < self.signal_fidelity <= 1.0):
            raise ValueError("signal_fidelity must lie in (1/3, 1]")
        if self.vocab_size < 3 * self.signal_words_per_class + 10:
            raise ValueError("vocab_size leaves no room for noise words")
        if self.words_per_news < self.signal_words_per_news:
            raise ValueError("words_per_news must cover the signal words")


@dataclass(frozen=True)
class NewsTruth:
    stock_id: str
    date: date
    news_index: int
    carries_signal: bool
    word_class: Trend | None  # class whose words were planted, if any
    matches_label: bool       # planted class equals the next target's label


@dataclass(frozen=True)
class LabelTruth:
    stock_id: str
    target_date: date
    label: Trend
    rise: float
    corrupted: bool


@dataclass
class GroundTruth:
    signal_words: dict[Trend, list[str]]
    news: list[NewsTruth]
    labels: list[LabelTruth]


def vocabulary_words(vocab_size: int) -> list[str]:
    return [f"w{i:05d}" for i in range(vocab_size)]


def synth_generate(
    cfg: SynthConfig, seed: int
) -> tuple[list[NewsRecord], list[PriceBar], GroundTruth]:
    """Generate (news, prices, ground truth); bit-identical for a fixed seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    words = vocabulary_words(cfg.vocab_size)
    spc = cfg.signal_words_per_class
    signal_words = {
        Trend.DOWN: words[0:spc],
        Trend.PRESERVE: words[spc : 2 * spc],
        Trend.UP: words[2 * spc : 3 * spc],
    }
    noise_lo = 3 * spc
    dates = [cfg.start_date + timedelta(days=i) for i in range(cfg.days)]
    lows = np.array([RISE_INTERVALS[Trend(c)][0] for c in range(3)])
    highs = np.array([RISE_INTERVALS[Trend(c)][1] for c in range(3)])

    news: list[NewsRecord] = []
    prices: list[PriceBar] = []
    truth_news: list[NewsTruth] = []
    truth_labels: list[LabelTruth] = []

    for s in range(cfg.stocks):
        stock_id = f"S{s:04d}"
        n_targets = cfg.days - 1  # rise defined for dates 0 .. days-2

        classes = rng.integers(0, 3, size=n_targets)
        u = rng.random(n_targets)
        drawn = lows[classes] + u * (highs[classes] - lows[classes])
        corrupted = rng.random(n_targets) < cfg.corrupt_frac
        no_news = rng.random(cfg.days) < cfg.no_news_day_prob
        counts = np.maximum(rng.poisson(cfg.mean_news_per_day, size=cfg.days), 1)
        counts[no_news] = 0
        fidelity_ok = rng.random(cfg.days) < cfg.signal_fidelity
        random_class = rng.integers(0, 3, size=cfg.days)
        wrong_step = rng.integers(1, 3, size=cfg.days)  # true + {1,2} mod 3
        pos_u = rng.random(cfg.days)
        n_sig_words = int(np.sum(counts > 0)) * cfg.signal_words_per_news
        sig_draw = rng.integers(0, spc, size=max(n_sig_words, 1))
        n_noise_words = int(counts.sum()) * cfg.words_per_news
        noise_draw = rng.integers(noise_lo, cfg.vocab_size, size=max(n_noise_words, 1))

        # Prices: next open realizes the drawn rise; the recorded rise is
        # recomputed from the stored opens so it matches the files exactly.
        opens = np.empty(cfg.days)
        opens[0] = 20.0 + s
        for t in range(n_targets):
            opens[t + 1] = opens[t] * (1.0 + drawn[t])
        for d in range(cfg.days):
            prices.append(PriceBar(date=dates[d], stock_id=stock_id, open=float(opens[d])))
        for t in range(n_targets):
            rise = (opens[t + 1] - opens[t]) / opens[t]
            truth_labels.append(
                LabelTruth(
                    stock_id=stock_id,
                    target_date=dates[t],
                    label=Trend(int(classes[t])),
                    rise=float(rise),
                    corrupted=bool(corrupted[t]),
                )
            )

        sig_cursor = 0
        noise_cursor = 0
        for d in range(cfg.days):
            count = int(counts[d])
            if count == 0:
                continue
            # Day d's planted item points at the label of target date d+1.
            target = d + 1
            has_target = target < n_targets
            if has_target:
                true_class = int(classes[target])
                if corrupted[target]:
                    planted: int | None = (true_class + int(wrong_step[d])) % 3
                elif fidelity_ok[d]:
                    planted = true_class
                else:
                    planted = int(random_class[d])
            else:
                planted = None
            sig_pos = int(pos_u[d] * count) if planted is not None else -1

            for i in range(count):
                if i == sig_pos:
                    cls = Trend(planted)
                    picks = sig_draw[sig_cursor : sig_cursor + cfg.signal_words_per_news]
                    sig_cursor += cfg.signal_words_per_news
                    toks = [signal_words[cls][k] for k in picks]
                    n_noise = cfg.words_per_news - cfg.signal_words_per_news
                else:
                    cls = None
                    toks = []
                    n_noise = cfg.words_per_news
                picks = noise_draw[noise_cursor : noise_cursor + n_noise]
                noise_cursor += cfg.words_per_news  # fixed stride keeps draws aligned
                toks += [words[k] for k in picks]
                news.append(
                    NewsRecord(
                        timestamp=dates[d],
                        stock_id=stock_id,
                        title=" ".join(toks[:3]),
                        content=" ".join(toks[3:]),
                    )
                )
                truth_news.append(
                    NewsTruth(
                        stock_id=stock_id,
                        date=dates[d],
                        news_index=i,
                        carries_signal=cls is not None,
                        word_class=cls,
                        matches_label=bool(
                            cls is not None and has_target and int(cls) == int(classes[target])
                        ),
                    )
                )

    return news, prices, GroundTruth(signal_words=signal_words, news=truth_news, labels=truth_labels)
