"""Pure-Python per-sample kernel: the fallback backend.

``run_sample`` is the readable statement of the forward and backward pass;
the compiled backend mirrors it loop for loop and the slab engine in
``_batched`` computes the same values batch-wise.  All arrays are float64
with a fixed arithmetic order, so repeated calls are bit-identical.
"""

from __future__ import annotations

import numpy as np

N_GRU = 9  # Wr Ur br Wz Uz bz Wh Uh bh


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax(x):
    e = np.exp(x - np.max(x))
    return e / e.sum()


def _softmax_rows(x):
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Per-sample reference path
# ---------------------------------------------------------------------------


def _gru_forward(x_seq, Wr, Ur, br, Wz, Uz, bz, Wh, Uh, bh):
    n, hidden = x_seq.shape[0], Wr.shape[0]
    pre_r = x_seq @ Wr.T + br
    pre_z = x_seq @ Wz.T + bz
    pre_c = x_seq @ Wh.T + bh
    r = np.empty((n, hidden))
    z = np.empty((n, hidden))
    c = np.empty((n, hidden))
    ah = np.empty((n, hidden))
    h = np.empty((n, hidden))
    h_prev = np.zeros(hidden)
    for t in range(n):
        r[t] = _sigmoid(pre_r[t] + Ur @ h_prev)
        z[t] = _sigmoid(pre_z[t] + Uz @ h_prev)
        ah[t] = Uh @ h_prev
        c[t] = np.tanh(pre_c[t] + r[t] * ah[t])
        h[t] = (1.0 - z[t]) * h_prev + z[t] * c[t]
        h_prev = h[t]
    return h, (r, z, c, ah)


def _gru_backward(x_seq, h, cache, dh_out, Wr, Ur, br, Wz, Uz, bz, Wh, Uh, bh):
    r, z, c, ah = cache
    n, hidden = x_seq.shape[0], Wr.shape[0]
    dcpre = np.empty((n, hidden))
    dah = np.empty((n, hidden))
    drpre = np.empty((n, hidden))
    dzpre = np.empty((n, hidden))
    carry = np.zeros(hidden)
    for t in range(n - 1, -1, -1):
        h_prev = h[t - 1] if t > 0 else 0.0
        dh = dh_out[t] + carry
        dcpre[t] = (dh * z[t]) * (1.0 - c[t] * c[t])
        dah[t] = dcpre[t] * r[t]
        drpre[t] = (dcpre[t] * ah[t]) * r[t] * (1.0 - r[t])
        dzpre[t] = (dh * (c[t] - h_prev)) * z[t] * (1.0 - z[t])
        carry = dh * (1.0 - z[t]) + Uh.T @ dah[t] + Ur.T @ drpre[t] + Uz.T @ dzpre[t]
    h_shift = h[:-1]  # h_prev rows for t >= 1; t = 0 sees the zero state
    grads = (
        drpre.T @ x_seq,
        drpre[1:].T @ h_shift,
        drpre.sum(axis=0),
        dzpre.T @ x_seq,
        dzpre[1:].T @ h_shift,
        dzpre.sum(axis=0),
        dcpre.T @ x_seq,
        dah[1:].T @ h_shift,
        dcpre.sum(axis=0),
    )
    dx_seq = dcpre @ Wh + drpre @ Wr + dzpre @ Wz
    return list(grads), dx_seq


def run_sample(window, label, need_grad, flags, packed):
    """Forward (and optionally backward) for one sample.

    window: list of (n_news_i, dim) float64 arrays, one per window day.
    label:  class index for the loss, or -1 for inference only.
    flags:  (news_attention, temporal_attention, bidirectional) as ints.
    packed: parameter arrays in the fixed positional layout (zero-size
            placeholders for blocks the configuration disables).

    Returns (loss, probs, alphas, beta, grads); grads is a list aligned to
    ``packed`` with None in placeholder slots, or None if not requested.
    """
    news_att, temporal_att, bidirectional = flags
    att_w, att_b = packed[0], packed[1]
    f_gates = packed[2 : 2 + N_GRU]
    b_gates = packed[2 + N_GRU : 2 + 2 * N_GRU]
    tmp_W, tmp_b, theta = packed[2 + 2 * N_GRU : 5 + 2 * N_GRU]
    mlp = packed[5 + 2 * N_GRU :]
    n_layers = len(mlp) // 2
    n_days = len(window)
    hidden, dim = f_gates[0].shape

    day_vecs = np.zeros((n_days, dim))
    alphas: list[np.ndarray] = []
    att_cache = []
    for t, day in enumerate(window):
        n_news = day.shape[0]
        if n_news == 0:
            alphas.append(np.zeros(0))
            att_cache.append(None)
            continue
        if news_att:
            u = _sigmoid(day @ att_w + att_b[0])
            alpha = _softmax(u)
            att_cache.append((u, alpha))
        else:
            alpha = np.full(n_news, 1.0 / n_news)
            att_cache.append(None)
        alphas.append(alpha)
        day_vecs[t] = alpha @ day

    h_f, cache_f = _gru_forward(day_vecs, *f_gates)
    if bidirectional:
        rev = day_vecs[::-1].copy()
        h_b_rev, cache_b = _gru_forward(rev, *b_gates)
        encoded = np.concatenate([h_f, h_b_rev[::-1]], axis=1)
    else:
        encoded = h_f

    if temporal_att:
        o = _sigmoid(encoded @ tmp_W.T + tmp_b)
        scores = np.sum(o * theta, axis=1)
        beta = _softmax(scores)
    else:
        beta = np.full(n_days, 1.0 / n_days)
    context = beta @ encoded

    acts = [context]
    x = context
    for i in range(n_layers):
        pre = mlp[2 * i] @ x + mlp[2 * i + 1]
        x = np.tanh(pre) if i < n_layers - 1 else pre
        acts.append(x)
    probs = _softmax(x)
    loss = float(-np.log(probs[label])) if label >= 0 else float("nan")

    if not need_grad:
        return loss, probs, alphas, beta, None
    if label < 0:
        raise ValueError("need_grad requires a label")

    grads: list = [None] * len(packed)

    dlogits = probs.copy()
    dlogits[label] -= 1.0
    dx = dlogits
    for i in range(n_layers - 1, -1, -1):
        dpre = dx if i == n_layers - 1 else dx * (1.0 - acts[i + 1] * acts[i + 1])
        grads[5 + 2 * N_GRU + 2 * i] = np.outer(dpre, acts[i])
        grads[5 + 2 * N_GRU + 2 * i + 1] = dpre
        dx = mlp[2 * i].T @ dpre
    dcontext = dx

    if temporal_att:
        dbeta = encoded @ dcontext
        denc = np.outer(beta, dcontext)
        dscores = beta * (dbeta - float(dbeta @ beta))
        dtheta = dscores[:, None] * o
        do = dscores[:, None] * theta
        dopre = do * o * (1.0 - o)
        grads[2 + 2 * N_GRU] = dopre.T @ encoded
        grads[3 + 2 * N_GRU] = dopre.sum(axis=0)
        grads[4 + 2 * N_GRU] = dtheta
        denc += dopre @ tmp_W
    else:
        denc = np.tile(dcontext / n_days, (n_days, 1))

    if bidirectional:
        denc_f, denc_b = denc[:, :hidden], denc[:, hidden:]
        gb, dxb_rev = _gru_backward(rev, h_b_rev, cache_b, denc_b[::-1].copy(), *b_gates)
        for k in range(N_GRU):
            grads[2 + N_GRU + k] = gb[k]
        dday_b = dxb_rev[::-1]
    else:
        denc_f = denc
        dday_b = 0.0
    gf, dxf = _gru_backward(day_vecs, h_f, cache_f, denc_f, *f_gates)
    for k in range(N_GRU):
        grads[2 + k] = gf[k]
    dday = dxf + dday_b

    if news_att:
        g_att_w = np.zeros_like(att_w)
        g_att_b = np.zeros(1)
        for t, day in enumerate(window):
            if day.shape[0] == 0:
                continue
            u, alpha = att_cache[t]
            dalpha = day @ dday[t]
            du = alpha * (dalpha - float(dalpha @ alpha))
            ds = du * u * (1.0 - u)
            g_att_w += day.T @ ds
            g_att_b[0] += ds.sum()
        grads[0] = g_att_w
        grads[1] = g_att_b
    return loss, probs, alphas, beta, grads
