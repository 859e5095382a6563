"""Synthetic planted-signal generator: determinism, balance, readability."""

from collections import Counter

import pytest

from newstrend.corpus import LabelThresholds, Trend, compute_thresholds, label, tokenize
from newstrend.dataio import read_truth, write_truth
from newstrend.synth import RISE_INTERVALS, SynthConfig, synth_generate

DEFAULT_THRESHOLDS = LabelThresholds(-0.0041, 0.0087)


def small_config(**kw):
    base = dict(stocks=6, days=40, vocab_size=200, dim=8, signal_words_per_class=8,
                signal_fidelity=0.9, mean_news_per_day=3.0, no_news_day_prob=0.1,
                words_per_news=8, signal_words_per_news=4)
    base.update(kw)
    return SynthConfig(**base)


class TestDeterminismAndShape:
    def test_same_seed_bit_identical(self):
        a = synth_generate(small_config(), seed=5)
        b = synth_generate(small_config(), seed=5)
        assert a[0] == b[0]
        assert a[1] == b[1]
        assert a[2].news == b[2].news and a[2].labels == b[2].labels

    def test_different_seed_differs(self):
        a = synth_generate(small_config(), seed=5)
        b = synth_generate(small_config(), seed=6)
        assert a[0] != b[0]

    def test_prices_reproduce_recorded_rises(self):
        news, prices, truth = synth_generate(small_config(), seed=1)
        opens = {(p.stock_id, p.date): p.open for p in prices}
        dates = sorted({p.date for p in prices})
        for lab in truth.labels:
            i = dates.index(lab.target_date)
            rise = (opens[(lab.stock_id, dates[i + 1])] - opens[(lab.stock_id, dates[i])]) / opens[
                (lab.stock_id, dates[i])
            ]
            assert rise == lab.rise

    def test_rises_fall_in_class_intervals(self):
        _, _, truth = synth_generate(small_config(), seed=2)
        for lab in truth.labels:
            lo, hi = RISE_INTERVALS[lab.label]
            assert lo <= lab.rise <= hi
            assert label(lab.rise, DEFAULT_THRESHOLDS) == lab.label

    def test_fidelity_range_enforced(self):
        with pytest.raises(ValueError):
            small_config(signal_fidelity=0.2)


class TestSignalPlanting:
    def test_bayes_reader_hits_accuracy_one(self):
        # fidelity 1 and no empty days: last-window-day news name the class.
        cfg = small_config(signal_fidelity=1.0, no_news_day_prob=0.0, corrupt_frac=0.0)
        news, prices, truth = synth_generate(cfg, seed=3)
        word_class = {w: cls for cls, words in truth.signal_words.items() for w in words}
        by_day = {}
        for r in news:
            by_day.setdefault((r.stock_id, r.timestamp), []).append(r)
        dates = sorted({p.date for p in prices})
        correct = total = 0
        for lab in truth.labels:
            i = dates.index(lab.target_date)
            if i == 0:
                continue  # no window day before the first date
            votes = Counter()
            for rec in by_day.get((lab.stock_id, dates[i - 1]), []):
                for tok in tokenize(rec.title) + tokenize(rec.content):
                    if tok in word_class:
                        votes[word_class[tok]] += 1
            if votes:
                total += 1
                correct += int(votes.most_common(1)[0][0] == lab.label)
        assert total > 0
        assert correct == total

    def test_every_news_day_with_target_has_one_planted_item(self):
        cfg = small_config(no_news_day_prob=0.0)
        _, prices, truth = synth_generate(cfg, seed=4)
        dates = sorted({p.date for p in prices})
        with_target = [t for t in truth.news if t.date < dates[-2]]
        per_day = Counter()
        for t in with_target:
            per_day[(t.stock_id, t.date)] += int(t.carries_signal)
        assert set(per_day.values()) == {1}

    def test_corrupt_units_plant_wrong_class(self):
        cfg = small_config(corrupt_frac=1.0, signal_fidelity=1.0, no_news_day_prob=0.0)
        _, _, truth = synth_generate(cfg, seed=5)
        assert all(lab.corrupted for lab in truth.labels)
        planted = [t for t in truth.news if t.carries_signal]
        assert planted and all(not t.matches_label for t in planted)


class TestClassBalance:
    def test_label_shares_near_thirds_over_1e5(self):
        cfg = SynthConfig(stocks=50, days=2003, vocab_size=100, dim=4,
                          signal_words_per_class=4, signal_fidelity=0.9,
                          mean_news_per_day=0.2, no_news_day_prob=0.9,
                          words_per_news=4, signal_words_per_news=2)
        _, _, truth = synth_generate(cfg, seed=7)
        labels = [int(t.label) for t in truth.labels]
        assert len(labels) >= 100_000
        for cls in range(3):
            share = labels.count(cls) / len(labels)
            assert abs(share - 1.0 / 3.0) < 0.01

    def test_tertile_thresholds_recover_balance(self):
        cfg = small_config(stocks=30, days=340, mean_news_per_day=0.5, no_news_day_prob=0.8)
        _, _, truth = synth_generate(cfg, seed=8)
        rises = [t.rise for t in truth.labels]
        assert len(rises) >= 10_000
        th = compute_thresholds(rises)
        shares = Counter(label(r, th) for r in rises)
        for cls in Trend:
            assert abs(shares[cls] / len(rises) - 1.0 / 3.0) < 0.02


class TestTruthReport:
    def test_round_trip(self, tmp_path):
        _, _, truth = synth_generate(small_config(corrupt_frac=0.2), seed=9)
        path = tmp_path / "truth.csv"
        write_truth(path, truth)
        back = read_truth(path)
        assert back.signal_words == truth.signal_words
        assert back.news == truth.news
        assert back.labels == truth.labels
