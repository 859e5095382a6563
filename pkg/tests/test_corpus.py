"""Corpus pipeline: vocabulary, embeddings, labeling, windows, splits."""

from datetime import date, timedelta

import numpy as np
import pytest

from newstrend.corpus import (
    LabelThresholds,
    NewsRecord,
    PriceBar,
    Trend,
    Vocabulary,
    build_samples,
    build_vocabulary,
    compute_thresholds,
    deterministic_embeddings,
    embed_news,
    label,
    rise_percent,
    split_dataset,
    tokenize,
)
from newstrend import dataio

DEFAULT_THRESHOLDS = LabelThresholds(down_cut=-0.0041, up_cut=0.0087)


def news(day, stock, title, content=""):
    return NewsRecord(timestamp=day, stock_id=stock, title=title, content=content)


D0 = date(2021, 1, 1)


class TestVocabulary:
    def test_word_below_min_count_excluded(self):
        records = [news(D0, "A", "rare word") for _ in range(4)]
        vocab = build_vocabulary(records, min_count=5)
        assert "rare" not in vocab

    def test_word_at_min_count_included(self):
        records = [news(D0, "A", "edge word") for _ in range(5)]
        vocab = build_vocabulary(records, min_count=5)
        assert "edge" in vocab

    def test_stopword_excluded_despite_count(self):
        records = [news(D0, "A", "the market") for _ in range(100)]
        vocab = build_vocabulary(records, stopwords=frozenset({"the"}), min_count=5)
        assert "the" not in vocab and "market" in vocab

    def test_indices_by_count_then_lexicographic(self):
        records = [news(D0, "A", "bb bb aa zz")] * 5
        vocab = build_vocabulary(records, min_count=5)
        assert vocab.index["bb"] == 0  # count 10 beats count 5
        assert vocab.index["aa"] == 1 and vocab.index["zz"] == 2  # tie: lexicographic

    def test_title_and_content_both_counted(self):
        records = [news(D0, "A", "alpha", "beta")] * 5
        vocab = build_vocabulary(records, min_count=5)
        assert "alpha" in vocab and "beta" in vocab

    def test_empty_corpus_is_valid(self):
        assert len(build_vocabulary([], min_count=5)) == 0

    def test_tokenize_lowercases_and_splits(self):
        assert tokenize("Oil-Price UP 3.5%!") == ["oil", "price", "up", "3", "5"]


class TestDeterministicEmbeddings:
    def vocab(self, words):
        return Vocabulary(index={w: i for i, w in enumerate(words)}, counts={w: 9 for w in words})

    def test_same_seed_same_vectors(self):
        v = self.vocab(["a", "b", "c"])
        e1 = deterministic_embeddings(v, 8, seed=3)
        e2 = deterministic_embeddings(v, 8, seed=3)
        assert np.array_equal(e1.vectors, e2.vectors)

    def test_different_seed_differs(self):
        v = self.vocab(["a", "b"])
        e1 = deterministic_embeddings(v, 8, seed=3)
        e2 = deterministic_embeddings(v, 8, seed=4)
        assert not np.array_equal(e1.vectors, e2.vectors)

    def test_entries_bounded_by_half_over_dim(self):
        v = self.vocab([f"w{i}" for i in range(50)])
        e = deterministic_embeddings(v, 10, seed=0)
        assert np.all(np.abs(e.vectors) <= 0.5 / 10)

    def test_independent_of_vocabulary_order(self):
        a = self.vocab(["x", "y"])
        b = self.vocab(["y", "x"])
        ea = deterministic_embeddings(a, 6, seed=1)
        eb = deterministic_embeddings(b, 6, seed=1)
        assert np.array_equal(ea.vectors[a.index["x"]], eb.vectors[b.index["x"]])


class TestEmbedNews:
    def setup_method(self):
        self.vocab = Vocabulary(index={"up": 0, "down": 1}, counts={"up": 9, "down": 9})
        self.emb = deterministic_embeddings(self.vocab, 4, seed=0)

    def test_single_word_is_its_vector(self):
        vec = embed_news(news(D0, "A", "up"), self.emb, self.vocab)
        assert np.array_equal(vec, self.emb.vectors[0])

    def test_two_words_average(self):
        vec = embed_news(news(D0, "A", "up down"), self.emb, self.vocab)
        np.testing.assert_allclose(vec, (self.emb.vectors[0] + self.emb.vectors[1]) / 2)

    def test_all_oov_gives_zero_vector(self):
        vec = embed_news(news(D0, "A", "unknown words only"), self.emb, self.vocab)
        assert np.array_equal(vec, np.zeros(4))


class TestRiseAndLabel:
    def test_rise_percent_arithmetic(self):
        assert rise_percent(100.0, 102.0) == pytest.approx(0.02)
        assert rise_percent(100.0, 100.0) == 0.0
        assert rise_percent(50.0, 49.0) == pytest.approx(-0.02)

    def test_rise_percent_rejects_nonpositive_open(self):
        with pytest.raises(ValueError):
            rise_percent(0.0, 1.0)

    def test_labels_at_default_thresholds(self):
        assert label(-0.005, DEFAULT_THRESHOLDS) == Trend.DOWN
        assert label(0.0, DEFAULT_THRESHOLDS) == Trend.PRESERVE
        assert label(0.01, DEFAULT_THRESHOLDS) == Trend.UP

    def test_label_boundaries_are_preserve(self):
        assert label(DEFAULT_THRESHOLDS.down_cut, DEFAULT_THRESHOLDS) == Trend.PRESERVE
        assert label(DEFAULT_THRESHOLDS.up_cut, DEFAULT_THRESHOLDS) == Trend.PRESERVE

    def test_label_invariant_under_price_scaling(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            p = float(rng.uniform(1, 500))
            r = float(rng.uniform(-0.2, 0.2))
            c = float(rng.uniform(0.01, 100))
            lab1 = label(rise_percent(p, p * (1 + r)), DEFAULT_THRESHOLDS)
            lab2 = label(rise_percent(c * p, c * p * (1 + r)), DEFAULT_THRESHOLDS)
            assert lab1 == lab2


class TestThresholds:
    def test_uniform_tertiles(self):
        rises = np.linspace(-1.0, 1.0, 100_001)
        th = compute_thresholds(rises)
        assert th.down_cut == pytest.approx(-1.0 / 3.0, abs=1e-4)
        assert th.up_cut == pytest.approx(1.0 / 3.0, abs=1e-4)

    def test_degenerate_distribution_rejected(self):
        with pytest.raises(ValueError):
            compute_thresholds([0.01] * 100)

    def test_order_enforced(self):
        with pytest.raises(ValueError):
            LabelThresholds(down_cut=0.1, up_cut=-0.1)


def price_series(stock, start, opens):
    return [
        PriceBar(date=start + timedelta(days=i), stock_id=stock, open=o)
        for i, o in enumerate(opens)
    ]


def tiny_embedding_setup():
    records = [news(D0 + timedelta(days=i), "AA", "up move today") for i in range(40)]
    vocab = build_vocabulary(records, min_count=5)
    emb = deterministic_embeddings(vocab, 4, seed=0)
    return records, vocab, emb


class TestBuildSamples:
    def test_twelve_consecutive_dates_yield_one_sample(self):
        records, vocab, emb = tiny_embedding_setup()
        prices = price_series("AA", D0, [100.0 + i for i in range(12)])
        samples, skips = build_samples(records, prices, emb, vocab, DEFAULT_THRESHOLDS,
                                       n_days=10, max_news=5)
        assert len(samples) == 1
        assert samples[0].target_date == D0 + timedelta(days=10)
        reasons = {s.reason for s in skips}
        assert reasons == {"insufficient_history", "no_next_open"}
        assert len(skips) == 11

    def test_truncation_keeps_earliest_news(self):
        vocab = Vocabulary(index={f"w{i}": i for i in range(8)}, counts={f"w{i}": 9 for i in range(8)})
        emb = deterministic_embeddings(vocab, 4, seed=1)
        day = D0 + timedelta(days=1)
        records = [news(day, "AA", f"w{i}") for i in range(8)]  # file order = arrival order
        prices = price_series("AA", D0, [100.0, 101.0, 102.0, 103.0])
        samples, _ = build_samples(records, prices, emb, vocab, DEFAULT_THRESHOLDS,
                                   n_days=2, max_news=5)
        window_day = samples[0].window[1]
        assert len(window_day) == 5
        for i in range(5):
            np.testing.assert_array_equal(window_day.news_vectors[i], emb.vectors[i])

    def test_no_news_day_has_empty_corpus(self):
        records, vocab, emb = tiny_embedding_setup()
        gap_day = D0 + timedelta(days=1)
        records = [r for r in records if r.timestamp != gap_day]
        prices = price_series("AA", D0, [100.0, 101.0, 102.0, 103.0])
        samples, _ = build_samples(records, prices, emb, vocab, DEFAULT_THRESHOLDS,
                                   n_days=2, max_news=5)
        assert len(samples[0].window[1]) == 0

    def test_no_lookahead_anywhere(self):
        records, vocab, emb = tiny_embedding_setup()
        prices = price_series("AA", D0, [100.0 + i for i in range(30)])
        samples, _ = build_samples(records, prices, emb, vocab, DEFAULT_THRESHOLDS,
                                   n_days=10, max_news=5)
        assert samples
        for s in samples:
            days = [d.date for d in s.window]
            assert all(a < b for a, b in zip(days, days[1:]))
            assert days[-1] < s.target_date

    def test_label_matches_next_open(self):
        records, vocab, emb = tiny_embedding_setup()
        prices = price_series("AA", D0, [100.0] * 10 + [100.0, 103.0])
        samples, _ = build_samples(records, prices, emb, vocab, DEFAULT_THRESHOLDS,
                                   n_days=10, max_news=5)
        assert samples[0].label == Trend.UP
        assert samples[0].rise_percent == pytest.approx(0.03)

    def test_output_ordered_by_stock_then_date(self):
        records, vocab, emb = tiny_embedding_setup()
        prices = price_series("AA", D0, [100.0 + i for i in range(14)])
        prices += price_series("AB", D0, [50.0 + i for i in range(14)])
        samples, _ = build_samples(records, prices, emb, vocab, DEFAULT_THRESHOLDS,
                                   n_days=10, max_news=5)
        keys = [(s.stock_id, s.target_date) for s in samples]
        assert keys == sorted(keys)


class TestSplitDataset:
    def make_samples(self, n_dates, per_date=1):
        records, vocab, emb = tiny_embedding_setup()
        samples = []
        for stock in [f"S{i}" for i in range(per_date)]:
            prices = price_series(stock, D0, [100.0 + i for i in range(n_dates + 11)])
            part, _ = build_samples(records[:1], prices, emb, vocab, DEFAULT_THRESHOLDS,
                                    n_days=10, max_news=3)
            samples += part
        return samples

    def test_two_thirds_cut_on_300_dates(self):
        samples = self.make_samples(300)
        split = split_dataset(samples, train_frac=2.0 / 3.0, val_frac_of_train=0.1, seed=1)
        assert len(split.train) + len(split.validation) == 200
        assert len(split.test) == 100

    def test_chronological_disjointness(self):
        samples = self.make_samples(60, per_date=3)
        split = split_dataset(samples, seed=5)
        last_train = max(s.target_date for s in split.train + split.validation)
        first_test = min(s.target_date for s in split.test)
        assert last_train < first_test

    def test_same_seed_same_validation(self):
        samples = self.make_samples(100)
        a = split_dataset(samples, seed=9)
        b = split_dataset(samples, seed=9)
        key = lambda s: (s.stock_id, s.target_date)
        assert [key(s) for s in a.validation] == [key(s) for s in b.validation]

    def test_full_train_frac_rejected(self):
        samples = self.make_samples(30)
        with pytest.raises(ValueError):
            split_dataset(samples, train_frac=1.0)

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            split_dataset([])


class TestEmbeddingFile:
    def write_file(self, tmp_path, lines):
        p = tmp_path / "emb.txt"
        p.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return p

    def vocab(self):
        return Vocabulary(index={"alpha": 0, "beta": 1}, counts={"alpha": 9, "beta": 9})

    def test_present_word_loaded_verbatim(self, tmp_path):
        values = [str(0.125 * (i + 1)) for i in range(8)]
        p = self.write_file(tmp_path, ["2 8", "alpha " + " ".join(values), "other " + " ".join(values)])
        emb = dataio.load_embeddings(p, self.vocab())
        np.testing.assert_array_equal(emb.vectors[0], [float(v) for v in values])

    def test_absent_word_gets_deterministic_fallback(self, tmp_path):
        p = self.write_file(tmp_path, ["1 8", "alpha " + " ".join(["0.5"] * 8)])
        emb = dataio.load_embeddings(p, self.vocab(), fallback_seed=3)
        expected = deterministic_embeddings(self.vocab(), 8, seed=3)
        np.testing.assert_array_equal(emb.vectors[1], expected.vectors[1])

    def test_malformed_line_names_line_number(self, tmp_path):
        p = self.write_file(tmp_path, ["1 8", "alpha 1 2 3 4 5 6 7"])
        with pytest.raises(dataio.InputError, match=":2:"):
            dataio.load_embeddings(p, self.vocab())


class TestDatasetRoundTrip:
    def test_save_load_preserves_everything(self, tmp_path):
        records, vocab, emb = tiny_embedding_setup()
        prices = price_series("AA", D0, [100.0 + i for i in range(40)])
        samples, _ = build_samples(records, prices, emb, vocab, DEFAULT_THRESHOLDS,
                                   n_days=10, max_news=3)
        split = split_dataset(samples, seed=2)
        prepared = dataio.PreparedDataset(split=split, thresholds=DEFAULT_THRESHOLDS,
                                          dim=4, n_days=10)
        path = tmp_path / "dataset.bin"
        dataio.save_dataset(path, prepared)
        loaded = dataio.load_dataset(path)
        assert loaded.dim == 4 and loaded.n_days == 10
        assert loaded.thresholds == DEFAULT_THRESHOLDS
        for part in ("train", "validation", "test"):
            orig, back = getattr(split, part), getattr(loaded.split, part)
            assert len(orig) == len(back)
            for a, b in zip(orig, back):
                assert (a.stock_id, a.target_date, a.label) == (b.stock_id, b.target_date, b.label)
                assert a.rise_percent == b.rise_percent
                for da, db in zip(a.window, b.window):
                    assert da.date == db.date
                    assert np.array_equal(da.news_vectors, db.news_vectors)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "x.bin"
        p.write_bytes(b"not a dataset")
        with pytest.raises(dataio.InputError):
            dataio.load_dataset(p)
