"""Model building blocks vs hand-rolled scalar references, structure, I/O."""

import math
from datetime import date, timedelta

import numpy as np
import pytest

from newstrend.autodiff import Graph, grad_check
from newstrend.corpus import DailyCorpus, Sample, Trend
from newstrend.model import (
    HyperParams,
    bi_gru,
    build_loss_graph,
    classify,
    export_attention,
    forward,
    gru_cell,
    init_params,
    load_params,
    news_attention,
    save_params,
    temporal_attention,
    tensor_shapes,
)

D0 = date(2021, 3, 1)


def make_params(**kw):
    defaults = dict(dim=3, hidden=2, n_days=3, att_dim=2, mlp_hidden=(4,))
    defaults.update(kw)
    return init_params(HyperParams(**defaults), seed=11)


def scalar_sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


class TestNewsAttention:
    def test_single_news_gets_full_weight(self):
        params = make_params()
        vec = np.array([[0.4, -0.2, 0.1]])
        d, alpha = news_attention(vec, params)
        np.testing.assert_allclose(alpha, [1.0])
        np.testing.assert_allclose(d, vec[0])

    def test_identical_news_split_evenly(self):
        params = make_params()
        n = np.array([0.4, -0.2, 0.1])
        d, alpha = news_attention(np.array([n, n]), params)
        np.testing.assert_allclose(alpha, [0.5, 0.5])
        np.testing.assert_allclose(d, n)

    def test_matches_scalar_reference(self):
        # Straight-line recomputation with math.exp, no numpy reductions.
        params = make_params()
        rng = np.random.default_rng(0)
        day = rng.normal(size=(3, 3))
        d, alpha = news_attention(day, params)
        w, b = params.tensors["att_w"], params.tensors["att_b"][0]
        u = [scalar_sigmoid(sum(day[i][j] * w[j] for j in range(3)) + b) for i in range(3)]
        exp_u = [math.exp(x - max(u)) for x in u]
        ref_alpha = [e / sum(exp_u) for e in exp_u]
        ref_d = [sum(ref_alpha[i] * day[i][j] for i in range(3)) for j in range(3)]
        np.testing.assert_allclose(alpha, ref_alpha, atol=1e-12)
        np.testing.assert_allclose(d, ref_d, atol=1e-12)

    def test_empty_day_zero_vector(self):
        params = make_params()
        d, alpha = news_attention(np.zeros((0, 3)), params)
        assert np.array_equal(d, np.zeros(3)) and alpha.size == 0

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ValueError):
            news_attention(np.zeros((2, 5)), make_params())

    def test_ablated_gives_plain_mean(self):
        params = make_params(news_attention=False)
        day = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        d, alpha = news_attention(day, params)
        np.testing.assert_allclose(alpha, [0.5, 0.5])
        np.testing.assert_allclose(d, [0.5, 0.5, 0.0])


class TestGruCell:
    def zero_gates(self, dim, hidden):
        names = ("Wr", "Ur", "br", "Wz", "Uz", "bz", "Wh", "Uh", "bh")
        return {
            g: np.zeros((hidden, dim)) if g[0] == "W" else
               np.zeros((hidden, hidden)) if g[0] == "U" else np.zeros(hidden)
            for g in names
        }

    def test_zero_weights_halve_previous_state(self):
        h_prev = np.array([0.8, -0.4])
        h = gru_cell(np.zeros(3), h_prev, self.zero_gates(3, 2))
        np.testing.assert_allclose(h, 0.5 * h_prev)

    def test_zero_everything_stays_zero(self):
        h = gru_cell(np.zeros(3), np.zeros(2), self.zero_gates(3, 2))
        np.testing.assert_allclose(h, np.zeros(2))

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(1)
        gates = {
            g: rng.normal(size=(2, 3)) if g[0] == "W" else
               rng.normal(size=(2, 2)) if g[0] == "U" else rng.normal(size=2)
            for g in ("Wr", "Ur", "br", "Wz", "Uz", "bz", "Wh", "Uh", "bh")
        }
        x, h_prev = rng.normal(size=3), rng.normal(size=2)
        h = gru_cell(x, h_prev, gates)
        for k in range(2):
            r = scalar_sigmoid(sum(gates["Wr"][k][j] * x[j] for j in range(3))
                               + sum(gates["Ur"][k][j] * h_prev[j] for j in range(2))
                               + gates["br"][k])
            z = scalar_sigmoid(sum(gates["Wz"][k][j] * x[j] for j in range(3))
                               + sum(gates["Uz"][k][j] * h_prev[j] for j in range(2))
                               + gates["bz"][k])
            cand = math.tanh(sum(gates["Wh"][k][j] * x[j] for j in range(3))
                             + r * sum(gates["Uh"][k][j] * h_prev[j] for j in range(2))
                             + gates["bh"][k])
            assert h[k] == pytest.approx((1 - z) * h_prev[k] + z * cand, abs=1e-12)


class TestBiGru:
    def test_backward_half_is_reversed_forward_scan(self):
        params = make_params(n_days=4)
        rng = np.random.default_rng(2)
        days = rng.normal(size=(4, 3))
        enc = bi_gru(days, params)
        gates = {g: params.tensors[f"b_{g}"] for g in
                 ("Wr", "Ur", "br", "Wz", "Uz", "bz", "Wh", "Uh", "bh")}
        h = np.zeros(2)
        rev_states = []
        for t in range(3, -1, -1):
            h = gru_cell(days[t], h, gates)
            rev_states.append(h)
        for t in range(4):
            np.testing.assert_allclose(enc[t, 2:], rev_states[3 - t], atol=1e-12)

    def test_param_copy_makes_halves_equal_at_n1(self):
        params = make_params(n_days=1)
        for g in ("Wr", "Ur", "br", "Wz", "Uz", "bz", "Wh", "Uh", "bh"):
            params.tensors[f"b_{g}"] = params.tensors[f"f_{g}"].copy()
        enc = bi_gru(np.array([[0.3, -0.2, 0.5]]), params)
        np.testing.assert_allclose(enc[0, :2], enc[0, 2:], atol=1e-15)

    def test_unidirectional_when_ablated(self):
        params = make_params(bidirectional=False)
        enc = bi_gru(np.zeros((3, 3)), params)
        assert enc.shape == (3, 2)


class TestTemporalAttention:
    def test_equal_rows_and_thetas_give_uniform(self):
        params = make_params(n_days=3)
        params.tensors["tmp_theta"][:] = params.tensors["tmp_theta"][0]
        h = np.tile(np.array([0.3, -0.1, 0.2, 0.4]), (3, 1))
        context, beta = temporal_attention(h, params)
        np.testing.assert_allclose(beta, [1 / 3] * 3, atol=1e-15)
        np.testing.assert_allclose(context, h[0], atol=1e-15)

    def test_single_day_gets_all_weight(self):
        params = make_params(n_days=1)
        h = np.array([[0.1, 0.2, 0.3, 0.4]])
        context, beta = temporal_attention(h, params)
        np.testing.assert_allclose(beta, [1.0])
        np.testing.assert_allclose(context, h[0])

    def test_matches_scalar_reference(self):
        params = make_params(n_days=3)
        rng = np.random.default_rng(3)
        enc = rng.normal(size=(3, 4))
        context, beta = temporal_attention(enc, params)
        W, b, theta = params.tensors["tmp_W"], params.tensors["tmp_b"], params.tensors["tmp_theta"]
        scores = []
        for i in range(3):
            o = [scalar_sigmoid(sum(W[k][j] * enc[i][j] for j in range(4)) + b[k]) for k in range(2)]
            scores.append(sum(theta[i][k] * o[k] for k in range(2)))
        exps = [math.exp(s - max(scores)) for s in scores]
        ref_beta = [e / sum(exps) for e in exps]
        ref_context = [sum(ref_beta[i] * enc[i][j] for i in range(3)) for j in range(4)]
        np.testing.assert_allclose(beta, ref_beta, atol=1e-12)
        np.testing.assert_allclose(context, ref_context, atol=1e-12)


class TestClassify:
    def test_zero_weights_give_uniform(self):
        params = make_params()
        for name in list(params.tensors):
            if name.startswith("mlp"):
                params.tensors[name][:] = 0.0
        probs = classify(np.array([0.5, -0.5, 0.2, 0.1]), params)
        np.testing.assert_allclose(probs, [1 / 3] * 3)

    def test_probs_sum_to_one(self):
        params = make_params()
        rng = np.random.default_rng(4)
        for _ in range(50):
            probs = classify(rng.normal(size=4), params)
            assert abs(probs.sum() - 1.0) <= 1e-12
            assert np.all(probs > 0)

    def test_argmax_invariant_under_logit_shift(self):
        params = make_params()
        x = np.array([0.4, -0.1, 0.3, 0.2])
        probs = classify(x, params)
        shifted = params.copy()
        shifted.tensors["mlp_b1"] += 7.5  # final-layer bias shift
        probs2 = classify(x, shifted)
        assert np.argmax(probs) == np.argmax(probs2)
        np.testing.assert_allclose(probs, probs2, atol=1e-12)


def make_sample(params, rng, empty_days=()):
    hyper = params.hyper
    window = []
    for t in range(hyper.n_days):
        n = 0 if t in empty_days else int(rng.integers(1, 4))
        window.append(
            DailyCorpus(date=D0 + timedelta(days=t), news_vectors=rng.normal(size=(n, hyper.dim)))
        )
    return Sample(stock_id="ZZ", target_date=D0 + timedelta(days=hyper.n_days),
                  window=window, label=Trend.UP, rise_percent=0.02)


class TestForward:
    def test_composed_blocks_equal_fused_forward(self):
        params = make_params(n_days=4)
        rng = np.random.default_rng(5)
        sample = make_sample(params, rng, empty_days=(2,))
        trace = forward(sample, params)
        day_vecs, alphas = [], []
        for day in sample.window:
            d, a = news_attention(day.news_vectors, params)
            day_vecs.append(d)
            alphas.append(a)
        enc = bi_gru(np.array(day_vecs), params)
        context, beta = temporal_attention(enc, params)
        probs = classify(context, params)
        np.testing.assert_allclose(trace.probs, probs, atol=1e-12)
        np.testing.assert_allclose(trace.beta, beta, atol=1e-12)
        for a, b in zip(trace.alpha, alphas):
            np.testing.assert_allclose(a, b, atol=1e-12)
        assert trace.score == pytest.approx(probs[Trend.UP] - probs[Trend.DOWN])

    def test_all_empty_window_is_valid_distribution(self):
        params = make_params()
        rng = np.random.default_rng(6)
        sample = make_sample(params, rng, empty_days=(0, 1, 2))
        trace = forward(sample, params)
        assert abs(trace.probs.sum() - 1.0) <= 1e-12
        assert np.all(np.isfinite(trace.probs))

    def test_forward_deterministic(self):
        params = make_params()
        rng = np.random.default_rng(7)
        sample = make_sample(params, rng)
        t1, t2 = forward(sample, params), forward(sample, params)
        assert np.array_equal(t1.probs, t2.probs)
        assert np.array_equal(t1.beta, t2.beta)

    def test_permuting_a_day_permutes_alpha_and_keeps_day_vector(self):
        params = make_params(n_days=2)
        rng = np.random.default_rng(8)
        day = rng.normal(size=(4, 3))
        perm = np.array([2, 0, 3, 1])
        d1, a1 = news_attention(day, params)
        d2, a2 = news_attention(day[perm], params)
        np.testing.assert_allclose(a2, a1[perm], atol=1e-15)
        np.testing.assert_allclose(d1, d2, atol=1e-14)

    def test_wrong_window_length_rejected(self):
        params = make_params(n_days=4)
        rng = np.random.default_rng(9)
        sample = make_sample(make_params(n_days=3), rng)
        with pytest.raises(ValueError):
            forward(sample, params)


class TestParameterCounts:
    """Each ablation allocates exactly the tensors its architecture uses."""

    @staticmethod
    def expected_count(dim, hidden, n_days, att, mlp, news, temporal, bidir):
        gru = 3 * (hidden * dim + hidden * hidden + hidden)
        enc = 2 * hidden if bidir else hidden
        total = gru * (2 if bidir else 1)
        if news:
            total += dim + 1
        if temporal:
            total += att * enc + att + n_days * att
        widths = [enc, *mlp, 3]
        total += sum(widths[i + 1] * widths[i] + widths[i + 1] for i in range(len(widths) - 1))
        return total

    @pytest.mark.parametrize(
        "news,temporal,bidir",
        [(True, True, True), (True, False, True), (False, True, True),
         (False, False, True), (False, False, False)],
    )
    def test_counts_match_hand_formula(self, news, temporal, bidir):
        hyper = HyperParams(dim=5, hidden=4, n_days=6, att_dim=3, mlp_hidden=(8, 4),
                            news_attention=news, temporal_attention=temporal,
                            bidirectional=bidir)
        params = init_params(hyper, seed=0)
        assert params.n_params() == self.expected_count(5, 4, 6, 3, (8, 4), news, temporal, bidir)

    def test_full_config_is_sum_of_parts(self):
        kw = dict(dim=5, hidden=4, n_days=6, att_dim=3, mlp_hidden=(8, 4))
        full = init_params(HyperParams(**kw), seed=0).n_params()
        plain = init_params(
            HyperParams(news_attention=False, temporal_attention=False, **kw), seed=0
        ).n_params()
        news_only = init_params(HyperParams(temporal_attention=False, **kw), seed=0).n_params()
        temporal_only = init_params(HyperParams(news_attention=False, **kw), seed=0).n_params()
        assert full - news_only == temporal_only - plain  # temporal block size
        assert full - temporal_only == news_only - plain == 5 + 1  # news block size

    def test_disabled_blocks_not_allocated(self):
        hyper = HyperParams(dim=3, hidden=2, n_days=2, news_attention=False,
                            temporal_attention=False, bidirectional=False)
        names = set(tensor_shapes(hyper))
        assert not any(n.startswith(("att_", "tmp_", "b_")) for n in names)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        params = make_params(n_days=4)
        path = tmp_path / "ckpt.bin"
        save_params(path, params)
        loaded = load_params(path)
        assert loaded.hyper == params.hyper
        assert loaded.names() == params.names()
        for name in params.tensors:
            assert np.array_equal(loaded.tensors[name], params.tensors[name])

    def test_bad_magic_rejected(self, tmp_path):
        from newstrend.model import CheckpointError

        path = tmp_path / "junk.bin"
        path.write_bytes(b"garbage file contents")
        with pytest.raises(CheckpointError):
            load_params(path)

    def test_truncated_file_rejected(self, tmp_path):
        from newstrend.model import CheckpointError

        params = make_params()
        path = tmp_path / "ckpt.bin"
        save_params(path, params)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 16])
        with pytest.raises(CheckpointError):
            load_params(path)


class TestExportAttention:
    def test_dump_shape_and_beta_sums(self, tmp_path):
        params = make_params(n_days=3)
        rng = np.random.default_rng(10)
        samples = [make_sample(params, rng) for _ in range(4)]
        path = tmp_path / "attn.csv"
        export_attention(samples, params, path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "row,stock_id,target_date,day_offset,day_date,news_index,value"
        beta_rows = [l for l in lines[1:] if l.startswith("beta")]
        alpha_rows = [l for l in lines[1:] if l.startswith("alpha")]
        assert len(beta_rows) == 3 * len(samples)
        n_news_total = sum(len(day) for s in samples for day in s.window)
        assert len(alpha_rows) == n_news_total
        per_sample: dict = {}
        for row in beta_rows:
            parts = row.split(",")
            per_sample.setdefault(parts[1] + parts[2], 0.0)
            per_sample[parts[1] + parts[2]] += float(parts[6])
        # all samples share one stock id and target date here: one group
        for total in per_sample.values():
            assert abs(total - 4 * 1.0) <= 1e-9  # 4 samples, each beta sums to 1


class TestEndToEndGradient:
    def test_full_model_gradcheck(self):
        hyper = HyperParams(dim=4, hidden=3, n_days=3, att_dim=3, mlp_hidden=(4,))
        params = init_params(hyper, seed=2)
        rng = np.random.default_rng(12)
        window = [rng.normal(size=(2, 4)) * 0.5 for _ in range(3)]

        # One grad_check leaf per tensor; the attention projection enters as
        # a row matrix and the per-date softmax parameters as separate rows.
        slots: list[tuple[str, int | None]] = []
        point: list[np.ndarray] = []
        for name in params.names():
            tensor = params.tensors[name]
            if name == "att_w":
                point.append(tensor.reshape(1, -1).copy())
                slots.append((name, None))
            elif name == "tmp_theta":
                for i in range(hyper.n_days):
                    point.append(tensor[i : i + 1].copy())
                    slots.append((name, i))
            else:
                point.append(tensor.copy())
                slots.append((name, None))

        def build(graph: Graph, leaves):
            overrides: dict = {"tmp_theta": [None] * hyper.n_days}
            for (name, idx), leaf_id in zip(slots, leaves):
                if name == "tmp_theta":
                    overrides["tmp_theta"][idx] = leaf_id
                else:
                    overrides[name] = leaf_id
            loss_id, _ = build_loss_graph(graph, window, 1, params, leaf_overrides=overrides)
            return loss_id

        err = grad_check(build, point, eps=1e-5)
        assert err < 1e-4
