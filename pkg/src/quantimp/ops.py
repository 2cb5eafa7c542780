"""Single-step building blocks of the recurrent imputer.

These are the readable, one-step-at-a-time versions of the operations that
:mod:`quantimp.kernels` fuses into whole-window passes. They exist as the
reference surface for tests and for anyone poking at the model
interactively; the training path never calls them in a loop.
"""

import numpy as np


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


def history_regress(h_prev, W_hist, b_hist):
    """Provisional estimate of the current step from the hidden state."""
    return W_hist @ h_prev + b_hist


def complement(x_t, m_t, x_hist):
    """Fill unobserved coordinates of ``x_t`` with the history estimate."""
    return m_t * x_t + (1.0 - m_t) * x_hist


def temporal_decay(delta_t, W_dec, b_dec):
    """Decay factor gamma = exp(-max(0, W_dec @ delta) + b_dec), gamma > 0.

    ``W_dec`` is the effective (already nonnegativity-constrained, if
    enabled) weight matrix.
    """
    return np.exp(b_dec - np.maximum(W_dec @ delta_t, 0.0))


def feature_regress(x_comp, W_feat, b_feat):
    """Cross-feature estimate; the diagonal of ``W_feat`` is masked so a
    feature never predicts itself from its own current value."""
    W = np.array(W_feat, dtype=float, copy=True)
    np.fill_diagonal(W, 0.0)
    return W @ x_comp + b_feat


def head_combine(z_feat, x_hist, gamma, m_t, W_comb_i, b_comb_i):
    """Convex combination of feature and history estimates for one head.

    Returns ``(v_hat, beta)`` where ``beta`` is the sigmoid gate computed
    from the concatenated decay factor and mask.
    """
    beta = sigmoid(W_comb_i @ np.concatenate([gamma, m_t]) + b_comb_i)
    v_hat = beta * z_feat + (1.0 - beta) * x_hist
    return v_hat, beta


def replace(x_t, m_t, v_hat):
    """Keep observed values bit-identically, fill the rest from ``v_hat``."""
    return m_t * x_t + (1.0 - m_t) * v_hat


def lstm_step(v_t, h_prev, c_prev, W_in, W_rec, b_cell):
    """One gated recurrent update; gate order i, f, g, o. |h| <= 1."""
    H = h_prev.shape[0]
    zc = W_in @ v_t + W_rec @ h_prev + b_cell
    i = sigmoid(zc[:H])
    f = sigmoid(zc[H:2 * H])
    g = np.tanh(zc[2 * H:3 * H])
    o = sigmoid(zc[3 * H:])
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c
