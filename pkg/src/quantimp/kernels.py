"""Fused per-window kernels for the directional recurrent imputer.

One directional pass walks a window step by step: history regression from
the recurrent hidden state, complement fill of missing inputs, temporal
decay of stale observations, cross-feature regression, per-head convex
combination, replacement of missing cells, and an LSTM update driven by the
head mean. The backward kernel replays the stored trace in reverse and
accumulates parameter gradients (full backpropagation through time).

Everything here sticks to the numba-compilable subset of numpy; whether the
functions actually run under ``@njit`` or as plain Python is decided by
:mod:`quantimp._backend` at import time.

Parameter layout (one direction, flattened in this order):

    W_hist (K, H)   b_hist (K,)     history regression from hidden state
    W_dec  (K, K)   b_dec  (K,)     temporal decay (raw; softplus optional)
    W_feat (K, K)   b_feat (K,)     cross-feature regression (diag masked)
    W_comb (N, K, 2K) b_comb (N, K) per-head combining weights
    W_in (4H, K)  W_rec (4H, H)  b_cell (4H,)  LSTM gates in i,f,g,o order

Loss sums returned by the forward pass are raw (unnormalized) per-step
sums; the caller applies the masked-mean normalizations. The quantile loss
puts weight ``q`` on under-prediction, so head ``i`` is pulled toward the
``q_i``-th conditional quantile.
"""

import math

import numpy as np

from ._backend import jit

# Stage codes used in NaN reports.
STAGE_NAMES = {
    1: "history_regress",
    2: "complement",
    3: "temporal_decay",
    4: "feature_regress",
    5: "head_combine",
    6: "head_mean",
    7: "recurrent_step",
}


def _unpack(theta, offs, K, H, N):
    W_hist = theta[offs[0]:offs[1]].reshape(K, H)
    b_hist = theta[offs[1]:offs[2]]
    W_dec = theta[offs[2]:offs[3]].reshape(K, K)
    b_dec = theta[offs[3]:offs[4]]
    W_feat = theta[offs[4]:offs[5]].reshape(K, K)
    b_feat = theta[offs[5]:offs[6]]
    W_comb = theta[offs[6]:offs[7]].reshape(N, K, 2 * K)
    b_comb = theta[offs[7]:offs[8]].reshape(N, K)
    W_in = theta[offs[8]:offs[9]].reshape(4 * H, K)
    W_rec = theta[offs[9]:offs[10]].reshape(4 * H, H)
    b_cell = theta[offs[10]:offs[11]]
    return (W_hist, b_hist, W_dec, b_dec, W_feat, b_feat, W_comb, b_comb,
            W_in, W_rec, b_cell)


def direction_forward(theta, offs, x, m, delta, qlevels, H,
                      use_decay, constrain_decay, decay_diagonal, var_floor):
    """Run one directional pass over a (T, K) window.

    Returns the full trace needed by :func:`direction_backward` plus raw
    per-step loss sums and the observation count. ``nan_step`` is -1 on a
    clean pass, otherwise the first step where a NaN appeared (with
    ``nan_stage`` indexing into STAGE_NAMES).
    """
    T = x.shape[0]
    K = x.shape[1]
    N = qlevels.shape[0]
    H4 = 4 * H

    (W_hist, b_hist, W_dec, b_dec, W_feat, b_feat, W_comb, b_comb,
     W_in, W_rec, b_cell) = _unpack(theta, offs, K, H, N)

    dec_eff = np.empty((K, K))
    if constrain_decay == 1:
        for r in range(K):
            for c in range(K):
                v = W_dec[r, c]
                dec_eff[r, c] = v if v > 30.0 else math.log1p(math.exp(v))
    else:
        for r in range(K):
            for c in range(K):
                dec_eff[r, c] = W_dec[r, c]
    dec_diag = np.empty(K)
    for k in range(K):
        dec_diag[k] = dec_eff[k, k]

    feat_nd = W_feat.copy()
    for k in range(K):
        feat_nd[k, k] = 0.0

    x_hist = np.zeros((T, K))
    x_comp = np.zeros((T, K))
    dec_act = np.zeros((T, K))
    gamma = np.ones((T, K))
    z_feat = np.zeros((T, K))
    beta = np.zeros((T, N, K))
    v_hat = np.zeros((T, N, K))
    v_raw_mean = np.zeros((T, K))
    v_mean = np.zeros((T, K))
    gates = np.zeros((T, H4))
    cell = np.zeros((T, H))
    hidden = np.zeros((T, H))
    l1_t = np.zeros(T)
    l2_t = np.zeros(T)
    lq_t = np.zeros(T)
    nll_t = np.zeros(T)

    h_prev = np.zeros(H)
    c_prev = np.zeros(H)
    cat = np.empty(2 * K)
    n_obs = 0.0
    nan_step = -1
    nan_stage = 0

    for t in range(T):
        xt = x[t]
        mt = m[t]

        xpt = np.dot(W_hist, h_prev) + b_hist
        x_hist[t, :] = xpt
        if np.isnan(xpt).any():
            nan_step = t
            nan_stage = 1
            break

        xct = mt * xt + (1.0 - mt) * xpt
        x_comp[t, :] = xct
        l1_t[t] = np.sum(np.abs(xpt - xt) * mt)

        if use_decay == 1:
            if decay_diagonal == 1:
                at = dec_diag * delta[t]
            else:
                at = np.dot(dec_eff, delta[t])
            dec_act[t, :] = at
            gt = np.exp(b_dec - np.maximum(at, 0.0))
            gamma[t, :] = gt
            if np.isnan(gt).any():
                nan_step = t
                nan_stage = 3
                break
        gt = gamma[t]

        zt = np.dot(feat_nd, xct) + b_feat
        z_feat[t, :] = zt
        if np.isnan(zt).any():
            nan_step = t
            nan_stage = 4
            break
        l2_t[t] = np.sum(np.abs(zt - xt) * mt)

        cat[:K] = gt
        cat[K:] = mt
        acc = np.zeros(K)
        lq = 0.0
        for i in range(N):
            u = np.dot(W_comb[i], cat) + b_comb[i]
            bti = 1.0 / (1.0 + np.exp(-u))
            beta[t, i, :] = bti
            vhti = bti * zt + (1.0 - bti) * xpt
            v_hat[t, i, :] = vhti
            acc += vhti
            qi = qlevels[i]
            for k in range(K):
                if mt[k] > 0.0:
                    r = xt[k] - vhti[k]
                    lq += qi * r if r >= 0.0 else (qi - 1.0) * r
        lq_t[t] = lq
        if np.isnan(acc).any():
            nan_step = t
            nan_stage = 5
            break

        vrm = acc / N
        v_raw_mean[t, :] = vrm
        vbt = mt * xt + (1.0 - mt) * vrm
        v_mean[t, :] = vbt

        # heteroscedastic NLL over heads, reporting quantity
        for k in range(K):
            if mt[k] > 0.0:
                ub = vrm[k]
                s2 = 0.0
                sb = 0.0
                for i in range(N):
                    dv = v_hat[t, i, k] - ub
                    s2 += dv * dv
                    r = xt[k] - v_hat[t, i, k]
                    qi = qlevels[i]
                    sb += qi * r if r >= 0.0 else (qi - 1.0) * r
                s2 /= N
                sb /= N
                s2f = s2 if s2 > var_floor else var_floor
                nll_t[t] += 0.5 * math.log(s2f) + sb / (2.0 * s2f)

        zc = np.dot(W_in, vbt) + np.dot(W_rec, h_prev) + b_cell
        ig = 1.0 / (1.0 + np.exp(-zc[:H]))
        fg = 1.0 / (1.0 + np.exp(-zc[H:2 * H]))
        gg = np.tanh(zc[2 * H:3 * H])
        og = 1.0 / (1.0 + np.exp(-zc[3 * H:]))
        gates[t, :H] = ig
        gates[t, H:2 * H] = fg
        gates[t, 2 * H:3 * H] = gg
        gates[t, 3 * H:] = og
        ct = fg * c_prev + ig * gg
        ht = og * np.tanh(ct)
        cell[t, :] = ct
        hidden[t, :] = ht
        if np.isnan(ht).any():
            nan_step = t
            nan_stage = 7
            break

        n_obs += np.sum(mt)
        h_prev = ht
        c_prev = ct

    return (x_hist, x_comp, dec_act, gamma, z_feat, beta, v_hat,
            v_raw_mean, v_mean, gates, cell, hidden,
            l1_t, l2_t, lq_t, nll_t, n_obs, nan_step, nan_stage)


def direction_backward(theta, gtheta, offs, x, m, delta, qlevels, H,
                       use_decay, constrain_decay, decay_diagonal,
                       x_hist, x_comp, dec_act, gamma, z_feat, beta, v_hat,
                       v_raw_mean, v_mean, gates, cell, hidden,
                       dv_mean_ext, cL1, cL2, cLq, cN, var_floor):
    """Accumulate loss gradients for one directional pass into ``gtheta``.

    ``cL1``/``cL2``/``cLq``/``cN`` are the scalar weights each raw per-step
    loss term carries in the total objective (masked-mean normalization and
    batch averaging folded in). ``dv_mean_ext`` carries gradients that reach
    the per-step head mean from outside the direction (the forward/backward
    consistency penalty).
    """
    T = x.shape[0]
    K = x.shape[1]
    N = qlevels.shape[0]
    H4 = 4 * H

    (W_hist, b_hist, W_dec, b_dec, W_feat, b_feat, W_comb, b_comb,
     W_in, W_rec, b_cell) = _unpack(theta, offs, K, H, N)
    (gW_hist, gb_hist, gW_dec, gb_dec, gW_feat, gb_feat, gW_comb, gb_comb,
     gW_in, gW_rec, gb_cell) = _unpack(gtheta, offs, K, H, N)

    W_histT = W_hist.T.copy()
    feat_nd = W_feat.copy()
    for k in range(K):
        feat_nd[k, k] = 0.0
    feat_ndT = feat_nd.T.copy()
    W_inT = W_in.T.copy()
    W_recT = W_rec.T.copy()
    W_combTg = np.zeros((N, K, K))
    for i in range(N):
        W_combTg[i, :, :] = W_comb[i][:, :K].T.copy()

    gdec_eff = np.zeros((K, K))
    zeros_h = np.zeros(H)
    cat = np.empty(2 * K)
    s2f_k = np.empty(K)
    sb_k = np.empty(K)
    flo_k = np.zeros(K)

    dh = np.zeros(H)
    dc = np.zeros(H)

    for t in range(T - 1, -1, -1):
        xt = x[t]
        mt = m[t]
        hp = hidden[t - 1] if t > 0 else zeros_h
        cp = cell[t - 1] if t > 0 else zeros_h

        ig = gates[t, :H]
        fg = gates[t, H:2 * H]
        gg = gates[t, 2 * H:3 * H]
        og = gates[t, 3 * H:]
        tc = np.tanh(cell[t])
        d_og = dh * tc
        dct = dc + dh * og * (1.0 - tc * tc)
        d_ig = dct * gg
        d_gg = dct * ig
        d_fg = dct * cp
        dc = dct * fg

        dzc = np.empty(H4)
        dzc[:H] = d_ig * ig * (1.0 - ig)
        dzc[H:2 * H] = d_fg * fg * (1.0 - fg)
        dzc[2 * H:3 * H] = d_gg * (1.0 - gg * gg)
        dzc[3 * H:] = d_og * og * (1.0 - og)

        gW_in += dzc.reshape(H4, 1) * v_mean[t].reshape(1, K)
        gW_rec += dzc.reshape(H4, 1) * hp.reshape(1, H)
        gb_cell += dzc

        dvb = np.dot(W_inT, dzc) + dv_mean_ext[t]
        dh_new = np.dot(W_recT, dzc)

        dvh_common = dvb * (1.0 - mt) / N

        if cN != 0.0:
            # per-cell mixture stats for the auxiliary NLL term
            for k in range(K):
                if mt[k] > 0.0:
                    ub = v_raw_mean[t, k]
                    s2 = 0.0
                    sb = 0.0
                    for i in range(N):
                        dv = v_hat[t, i, k] - ub
                        s2 += dv * dv
                        r = xt[k] - v_hat[t, i, k]
                        qi = qlevels[i]
                        sb += qi * r if r >= 0.0 else (qi - 1.0) * r
                    s2 /= N
                    sb /= N
                    if s2 > var_floor:
                        s2f_k[k] = s2
                        flo_k[k] = 0.0
                    else:
                        s2f_k[k] = var_floor
                        flo_k[k] = 1.0
                    sb_k[k] = sb

        dz = np.zeros(K)
        dxp = np.zeros(K)
        dgam = np.zeros(K)
        cat[:K] = gamma[t]
        cat[K:] = mt

        for i in range(N):
            dvh = dvh_common.copy()
            qi = qlevels[i]
            for k in range(K):
                if mt[k] > 0.0:
                    r = xt[k] - v_hat[t, i, k]
                    gq = -qi if r >= 0.0 else (1.0 - qi)
                    dvh[k] += cLq * gq
                    if cN != 0.0:
                        s2f = s2f_k[k]
                        term = gq / (2.0 * N * s2f)
                        if flo_k[k] == 0.0:
                            dv = v_hat[t, i, k] - v_raw_mean[t, k]
                            term += dv / N * (1.0 / s2f - sb_k[k] / (s2f * s2f))
                        dvh[k] += cN * term
            bti = beta[t, i]
            db = dvh * (z_feat[t] - x_hist[t])
            dz += dvh * bti
            dxp += dvh * (1.0 - bti)
            du = db * bti * (1.0 - bti)
            gW_comb[i] += du.reshape(K, 1) * cat.reshape(1, 2 * K)
            gb_comb[i] += du
            dgam += np.dot(W_combTg[i], du)

        dz += cL2 * mt * np.sign(z_feat[t] - xt)
        gW_feat += dz.reshape(K, 1) * x_comp[t].reshape(1, K)
        gb_feat += dz
        dxc = np.dot(feat_ndT, dz)

        if use_decay == 1:
            dpre = dgam * gamma[t]
            gb_dec += dpre
            da = np.where(dec_act[t] > 0.0, 1.0, 0.0) * (-dpre)
            if decay_diagonal == 1:
                for k in range(K):
                    gdec_eff[k, k] += da[k] * delta[t, k]
            else:
                gdec_eff += da.reshape(K, 1) * delta[t].reshape(1, K)

        dxp += dxc * (1.0 - mt)
        dxp += cL1 * mt * np.sign(x_hist[t] - xt)
        gW_hist += dxp.reshape(K, 1) * hp.reshape(1, H)
        gb_hist += dxp
        dh = dh_new + np.dot(W_histT, dxp)

    # the masked diagonal of the feature regression never enters the loss
    for k in range(K):
        gW_feat[k, k] = 0.0

    if use_decay == 1:
        if constrain_decay == 1:
            gW_dec += gdec_eff * (1.0 / (1.0 + np.exp(-W_dec)))
        else:
            gW_dec += gdec_eff


_unpack = jit(_unpack)
direction_forward = jit(direction_forward)
direction_backward = jit(direction_backward)
