# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled fused forward/backward for one sample.

Mirrors kernels._numpy loop for loop; the equivalence tests pin the two
backends together to float64 round-off.
"""

import numpy as np

from libc.math cimport exp, log, tanh


cdef inline double csigmoid(double x) nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef void softmax_inplace(double[::1] x) nogil:
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double m = x[0]
    cdef double s = 0.0
    for i in range(1, n):
        if x[i] > m:
            m = x[i]
    for i in range(n):
        x[i] = exp(x[i] - m)
        s += x[i]
    for i in range(n):
        x[i] /= s


cdef void matvec(double[:, ::1] A, double[::1] x, double[::1] out, bint accumulate) nogil:
    # out (+)= A @ x
    cdef Py_ssize_t i, j, m = A.shape[0], n = A.shape[1]
    cdef double acc
    for i in range(m):
        acc = 0.0
        for j in range(n):
            acc += A[i, j] * x[j]
        if accumulate:
            out[i] += acc
        else:
            out[i] = acc


cdef void matvec_t(double[:, ::1] A, double[::1] x, double[::1] out, bint accumulate) nogil:
    # out (+)= A.T @ x
    cdef Py_ssize_t i, j, m = A.shape[0], n = A.shape[1]
    if not accumulate:
        for j in range(n):
            out[j] = 0.0
    for i in range(m):
        for j in range(n):
            out[j] += A[i, j] * x[i]


cdef void outer_acc(double[::1] a, double[::1] b, double[:, ::1] G) nogil:
    # G += outer(a, b)
    cdef Py_ssize_t i, j, m = a.shape[0], n = b.shape[0]
    for i in range(m):
        for j in range(n):
            G[i, j] += a[i] * b[j]


cdef void gru_forward(double[:, ::1] X,
                      double[:, ::1] Wr, double[:, ::1] Ur, double[::1] br,
                      double[:, ::1] Wz, double[:, ::1] Uz, double[::1] bz,
                      double[:, ::1] Wh, double[:, ::1] Uh, double[::1] bh,
                      double[:, ::1] r, double[:, ::1] z, double[:, ::1] c,
                      double[:, ::1] ah, double[:, ::1] h) nogil:
    cdef Py_ssize_t t, k, j, n = X.shape[0], hidden = Wr.shape[0], dim = Wr.shape[1]
    cdef double accr, accz, acch, accc, hp
    for t in range(n):
        for k in range(hidden):
            accr = br[k]
            accz = bz[k]
            acch = 0.0
            accc = bh[k]
            for j in range(dim):
                accr += Wr[k, j] * X[t, j]
                accz += Wz[k, j] * X[t, j]
                accc += Wh[k, j] * X[t, j]
            if t > 0:
                for j in range(hidden):
                    accr += Ur[k, j] * h[t - 1, j]
                    accz += Uz[k, j] * h[t - 1, j]
                    acch += Uh[k, j] * h[t - 1, j]
            r[t, k] = csigmoid(accr)
            z[t, k] = csigmoid(accz)
            ah[t, k] = acch
            c[t, k] = tanh(accc + r[t, k] * acch)
            hp = h[t - 1, k] if t > 0 else 0.0
            h[t, k] = (1.0 - z[t, k]) * hp + z[t, k] * c[t, k]


cdef void gru_backward(double[:, ::1] X, double[:, ::1] h,
                       double[:, ::1] r, double[:, ::1] z, double[:, ::1] c,
                       double[:, ::1] ah, double[:, ::1] dh_out,
                       double[:, ::1] Wr, double[:, ::1] Ur,
                       double[:, ::1] Wz, double[:, ::1] Uz,
                       double[:, ::1] Wh, double[:, ::1] Uh,
                       double[:, ::1] gWr, double[:, ::1] gUr, double[::1] gbr,
                       double[:, ::1] gWz, double[:, ::1] gUz, double[::1] gbz,
                       double[:, ::1] gWh, double[:, ::1] gUh, double[::1] gbh,
                       double[:, ::1] dX,
                       double[::1] carry, double[::1] dcpre,
                       double[::1] dah, double[::1] drpre, double[::1] dzpre) nogil:
    cdef Py_ssize_t t, k, j, n = X.shape[0], hidden = Wr.shape[0], dim = Wr.shape[1]
    cdef double dh_k, hp, dc_k
    for k in range(hidden):
        carry[k] = 0.0
    for t in range(n - 1, -1, -1):
        for k in range(hidden):
            hp = h[t - 1, k] if t > 0 else 0.0
            dh_k = dh_out[t, k] + carry[k]
            dc_k = dh_k * z[t, k]
            dcpre[k] = dc_k * (1.0 - c[t, k] * c[t, k])
            dah[k] = dcpre[k] * r[t, k]
            drpre[k] = (dcpre[k] * ah[t, k]) * r[t, k] * (1.0 - r[t, k])
            dzpre[k] = (dh_k * (c[t, k] - hp)) * z[t, k] * (1.0 - z[t, k])
            carry[k] = dh_k * (1.0 - z[t, k])
        for k in range(hidden):
            gbh[k] += dcpre[k]
            gbr[k] += drpre[k]
            gbz[k] += dzpre[k]
            for j in range(dim):
                gWh[k, j] += dcpre[k] * X[t, j]
                gWr[k, j] += drpre[k] * X[t, j]
                gWz[k, j] += dzpre[k] * X[t, j]
        if t > 0:
            for k in range(hidden):
                for j in range(hidden):
                    gUh[k, j] += dah[k] * h[t - 1, j]
                    gUr[k, j] += drpre[k] * h[t - 1, j]
                    gUz[k, j] += dzpre[k] * h[t - 1, j]
        for k in range(hidden):
            for j in range(hidden):
                carry[j] += Uh[k, j] * dah[k] + Ur[k, j] * drpre[k] + Uz[k, j] * dzpre[k]
        for j in range(dim):
            dX[t, j] = 0.0
        for k in range(hidden):
            for j in range(dim):
                dX[t, j] += Wh[k, j] * dcpre[k] + Wr[k, j] * drpre[k] + Wz[k, j] * dzpre[k]


def _alloc_grads(flags, packed):
    """Zeroed gradient buffers aligned to ``packed`` (None for disabled)."""
    news_att, temporal_att, bidirectional = flags
    grads = [None] * len(packed)
    if news_att:
        grads[0] = np.zeros_like(packed[0])
        grads[1] = np.zeros_like(packed[1])
    for k in range(9):
        grads[2 + k] = np.zeros_like(packed[2 + k])
        if bidirectional:
            grads[11 + k] = np.zeros_like(packed[11 + k])
    if temporal_att:
        for k in range(20, 23):
            grads[k] = np.zeros_like(packed[k])
    for k in range(23, len(packed)):
        grads[k] = np.zeros_like(packed[k])
    return grads


def _run(window, int label, bint need_grad, flags, packed, double weight, grads):
    """One sample: forward, optionally accumulate weighted grads into ``grads``."""
    cdef bint news_att = flags[0]
    cdef bint temporal_att = flags[1]
    cdef bint bidirectional = flags[2]

    att_w_a, att_b_a = packed[0], packed[1]
    f_arrs = packed[2:11]
    b_arrs = packed[11:20]
    tmp_W_a, tmp_b_a, theta_a = packed[20:23]
    mlp = packed[23:]
    cdef Py_ssize_t n_layers = len(mlp) // 2
    cdef Py_ssize_t n_days = len(window)

    cdef double[:, ::1] fWr = f_arrs[0], fUr = f_arrs[1]
    cdef double[::1] fbr = f_arrs[2]
    cdef double[:, ::1] fWz = f_arrs[3], fUz = f_arrs[4]
    cdef double[::1] fbz = f_arrs[5]
    cdef double[:, ::1] fWh = f_arrs[6], fUh = f_arrs[7]
    cdef double[::1] fbh = f_arrs[8]
    cdef Py_ssize_t hidden = fWr.shape[0], dim = fWr.shape[1]
    cdef Py_ssize_t enc_dim = 2 * hidden if bidirectional else hidden

    cdef double[::1] att_w, att_b
    if news_att:
        att_w = att_w_a
        att_b = att_b_a

    # --- news aggregation ---------------------------------------------------
    day_vecs_a = np.zeros((n_days, dim))
    cdef double[:, ::1] day_vecs = day_vecs_a
    alphas = []
    u_list = []
    cdef double[:, ::1] day
    cdef double[::1] u_v, alpha_v
    cdef Py_ssize_t t, i, j, k, n_news
    cdef double acc, inv
    for t in range(n_days):
        day_a = window[t]
        n_news = day_a.shape[0]
        if n_news == 0:
            alphas.append(np.zeros(0))
            u_list.append(None)
            continue
        day = day_a
        if news_att:
            u_a = np.empty(n_news)
            alpha_a = np.empty(n_news)
            u_v = u_a
            alpha_v = alpha_a
            for i in range(n_news):
                acc = att_b[0]
                for j in range(dim):
                    acc += day[i, j] * att_w[j]
                u_v[i] = csigmoid(acc)
                alpha_v[i] = u_v[i]
            softmax_inplace(alpha_v)
            u_list.append(u_a)
        else:
            alpha_a = np.full(n_news, 1.0 / n_news)
            alpha_v = alpha_a
            u_list.append(None)
        for j in range(dim):
            acc = 0.0
            for i in range(n_news):
                acc += alpha_v[i] * day[i, j]
            day_vecs[t, j] = acc
        alphas.append(alpha_a)

    # --- recurrent encoding -------------------------------------------------
    rf_a = np.empty((n_days, hidden)); zf_a = np.empty((n_days, hidden))
    cf_a = np.empty((n_days, hidden)); ahf_a = np.empty((n_days, hidden))
    hf_a = np.empty((n_days, hidden))
    cdef double[:, ::1] rf = rf_a, zf = zf_a, cf = cf_a, ahf = ahf_a, hf = hf_a
    gru_forward(day_vecs, fWr, fUr, fbr, fWz, fUz, fbz, fWh, fUh, fbh,
                rf, zf, cf, ahf, hf)

    cdef double[:, ::1] bWr, bUr, bWz, bUz, bWh, bUh
    cdef double[::1] bbr, bbz, bbh
    cdef double[:, ::1] rev, rb, zb, cb, ahb, hb
    encoded_a = np.empty((n_days, enc_dim))
    cdef double[:, ::1] encoded = encoded_a
    if bidirectional:
        bWr = b_arrs[0]; bUr = b_arrs[1]; bbr = b_arrs[2]
        bWz = b_arrs[3]; bUz = b_arrs[4]; bbz = b_arrs[5]
        bWh = b_arrs[6]; bUh = b_arrs[7]; bbh = b_arrs[8]
        rev_a = np.empty((n_days, dim))
        rev = rev_a
        for t in range(n_days):
            for j in range(dim):
                rev[t, j] = day_vecs[n_days - 1 - t, j]
        rb_a = np.empty((n_days, hidden)); zb_a = np.empty((n_days, hidden))
        cb_a = np.empty((n_days, hidden)); ahb_a = np.empty((n_days, hidden))
        hb_a = np.empty((n_days, hidden))
        rb = rb_a; zb = zb_a; cb = cb_a; ahb = ahb_a; hb = hb_a
        gru_forward(rev, bWr, bUr, bbr, bWz, bUz, bbz, bWh, bUh, bbh,
                    rb, zb, cb, ahb, hb)
        for t in range(n_days):
            for k in range(hidden):
                encoded[t, k] = hf[t, k]
                encoded[t, hidden + k] = hb[n_days - 1 - t, k]
    else:
        for t in range(n_days):
            for k in range(hidden):
                encoded[t, k] = hf[t, k]

    # --- temporal aggregation -------------------------------------------------
    beta_a = np.empty(n_days)
    cdef double[::1] beta = beta_a
    cdef double[:, ::1] tmp_W, theta, o
    cdef double[::1] tmp_b
    cdef Py_ssize_t att_dim = 0
    o_a = None
    if temporal_att:
        tmp_W = tmp_W_a
        tmp_b = tmp_b_a
        theta = theta_a
        att_dim = tmp_W.shape[0]
        o_a = np.empty((n_days, att_dim))
        o = o_a
        for t in range(n_days):
            matvec(tmp_W, encoded[t], o[t], False)
            acc = 0.0
            for k in range(att_dim):
                o[t, k] = csigmoid(o[t, k] + tmp_b[k])
                acc += theta[t, k] * o[t, k]
            beta[t] = acc
        softmax_inplace(beta)
    else:
        inv = 1.0 / n_days
        for t in range(n_days):
            beta[t] = inv
    context_a = np.zeros(enc_dim)
    cdef double[::1] context = context_a
    for t in range(n_days):
        for j in range(enc_dim):
            context[j] += beta[t] * encoded[t, j]

    # --- classifier head ------------------------------------------------------
    acts = [context_a]
    cdef double[:, ::1] W_l
    cdef double[::1] b_l, x_v, pre_v
    x_a = context_a
    for i in range(n_layers):
        W_l = mlp[2 * i]
        b_l = mlp[2 * i + 1]
        pre_a = np.empty(W_l.shape[0])
        pre_v = pre_a
        x_v = x_a
        matvec(W_l, x_v, pre_v, False)
        if i < n_layers - 1:
            for k in range(W_l.shape[0]):
                pre_v[k] = tanh(pre_v[k] + b_l[k])
        else:
            for k in range(W_l.shape[0]):
                pre_v[k] = pre_v[k] + b_l[k]
        acts.append(pre_a)
        x_a = pre_a
    probs_a = x_a.copy()
    cdef double[::1] probs = probs_a
    softmax_inplace(probs)
    cdef double loss = -log(probs[label]) if label >= 0 else float("nan")

    if not need_grad:
        return loss, probs_a, alphas, beta_a
    if label < 0:
        raise ValueError("need_grad requires a label")

    # --- classifier backward ----------------------------------------------------
    # Scaling the logit gradient by the sample weight scales every gradient.
    dx_a = probs_a.copy()
    cdef double[::1] dx = dx_a
    dx[label] -= 1.0
    for k in range(dx.shape[0]):
        dx[k] *= weight
    cdef double[::1] dpre, act_next, act_prev, gb_l
    cdef double[:, ::1] gW_l
    for i in range(n_layers - 1, -1, -1):
        W_l = mlp[2 * i]
        act_prev = acts[i]
        if i == n_layers - 1:
            dpre_a = dx_a
            dpre = dpre_a
        else:
            act_next = acts[i + 1]
            dpre_a = np.empty(W_l.shape[0])
            dpre = dpre_a
            for k in range(W_l.shape[0]):
                dpre[k] = dx[k] * (1.0 - act_next[k] * act_next[k])
        gW_l = grads[23 + 2 * i]
        outer_acc(dpre, act_prev, gW_l)
        gb_l = grads[23 + 2 * i + 1]
        for k in range(W_l.shape[0]):
            gb_l[k] += dpre[k]
        dx_a = np.empty(W_l.shape[1])
        dx = dx_a
        matvec_t(W_l, dpre, dx, False)

    # --- temporal backward --------------------------------------------------------
    denc_a = np.empty((n_days, enc_dim))
    cdef double[:, ::1] denc = denc_a
    cdef double[::1] dcontext = dx_a
    cdef double dot, ds
    cdef double[:, ::1] gtmp_W, gtheta, dopre
    cdef double[::1] gtmp_b, dbeta, dscores
    if temporal_att:
        dbeta_a = np.empty(n_days)
        dbeta = dbeta_a
        dot = 0.0
        for t in range(n_days):
            acc = 0.0
            for j in range(enc_dim):
                acc += encoded[t, j] * dcontext[j]
            dbeta[t] = acc
            dot += acc * beta[t]
        dscores_a = np.empty(n_days)
        dscores = dscores_a
        for t in range(n_days):
            dscores[t] = beta[t] * (dbeta[t] - dot)
        gtheta = grads[22]
        dopre_a = np.empty((n_days, att_dim))
        dopre = dopre_a
        for t in range(n_days):
            ds = dscores[t]
            for k in range(att_dim):
                gtheta[t, k] += ds * o[t, k]
                dopre[t, k] = ds * theta[t, k] * o[t, k] * (1.0 - o[t, k])
        gtmp_W = grads[20]
        gtmp_b = grads[21]
        for t in range(n_days):
            outer_acc(dopre[t], encoded[t], gtmp_W)
            for k in range(att_dim):
                gtmp_b[k] += dopre[t, k]
            for j in range(enc_dim):
                denc[t, j] = beta[t] * dcontext[j]
            matvec_t(tmp_W, dopre[t], denc[t], True)
    else:
        inv = 1.0 / n_days
        for t in range(n_days):
            for j in range(enc_dim):
                denc[t, j] = dcontext[j] * inv

    # --- recurrent backward ---------------------------------------------------
    carry_a = np.empty(hidden); b1_a = np.empty(hidden); b2_a = np.empty(hidden)
    b3_a = np.empty(hidden); b4_a = np.empty(hidden)
    cdef double[::1] carry = carry_a, dcpre_b = b1_a, dah_b = b2_a
    cdef double[::1] drpre_b = b3_a, dzpre_b = b4_a
    dday_a = np.zeros((n_days, dim))
    cdef double[:, ::1] dday = dday_a
    cdef double[:, ::1] dXf, dXb, denc_f, denc_b_rev

    dXf_a = np.empty((n_days, dim))
    dXf = dXf_a
    denc_f_a = np.empty((n_days, hidden))
    denc_f = denc_f_a
    for t in range(n_days):
        for k in range(hidden):
            denc_f[t, k] = denc[t, k]
    gru_backward(day_vecs, hf, rf, zf, cf, ahf, denc_f,
                 fWr, fUr, fWz, fUz, fWh, fUh,
                 grads[2], grads[3], grads[4], grads[5], grads[6], grads[7],
                 grads[8], grads[9], grads[10],
                 dXf, carry, dcpre_b, dah_b, drpre_b, dzpre_b)
    for t in range(n_days):
        for j in range(dim):
            dday[t, j] += dXf[t, j]

    if bidirectional:
        denc_b_rev_a = np.empty((n_days, hidden))
        denc_b_rev = denc_b_rev_a
        for t in range(n_days):
            for k in range(hidden):
                denc_b_rev[t, k] = denc[n_days - 1 - t, hidden + k]
        dXb_a = np.empty((n_days, dim))
        dXb = dXb_a
        gru_backward(rev, hb, rb, zb, cb, ahb, denc_b_rev,
                     bWr, bUr, bWz, bUz, bWh, bUh,
                     grads[11], grads[12], grads[13], grads[14], grads[15],
                     grads[16], grads[17], grads[18], grads[19],
                     dXb, carry, dcpre_b, dah_b, drpre_b, dzpre_b)
        for t in range(n_days):
            for j in range(dim):
                dday[t, j] += dXb[n_days - 1 - t, j]

    # --- news aggregation backward ------------------------------------------------
    cdef double[::1] g_att_w, g_att_b, dalpha_v, du_v
    if news_att:
        g_att_w = grads[0]
        g_att_b = grads[1]
        for t in range(n_days):
            day_a = window[t]
            n_news = day_a.shape[0]
            if n_news == 0:
                continue
            day = day_a
            alpha_v = alphas[t]
            u_v = u_list[t]
            dalpha_a = np.empty(n_news)
            dalpha_v = dalpha_a
            dot = 0.0
            for i in range(n_news):
                acc = 0.0
                for j in range(dim):
                    acc += day[i, j] * dday[t, j]
                dalpha_v[i] = acc
                dot += acc * alpha_v[i]
            du_a = np.empty(n_news)
            du_v = du_a
            acc = 0.0
            for i in range(n_news):
                du_v[i] = (alpha_v[i] * (dalpha_v[i] - dot)) * u_v[i] * (1.0 - u_v[i])
                acc += du_v[i]
                for j in range(dim):
                    g_att_w[j] += day[i, j] * du_v[i]
            g_att_b[0] += acc

    return loss, probs_a, alphas, beta_a


def run_sample(window, int label, bint need_grad, flags, packed):
    """Same contract as kernels._numpy.run_sample."""
    grads = _alloc_grads(flags, packed) if need_grad else None
    loss, probs, alphas, beta = _run(window, label, need_grad, flags, packed, 1.0, grads)
    return loss, probs, alphas, beta, grads
