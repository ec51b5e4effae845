"""Pure-numpy fused LSTM cell kernel (fallback backend).

Weight layout: W (4h, d), U (4h, h), b (4h,), gate blocks stacked in the
order input, forget, output, candidate.  ``literal_cell`` switches the
candidate activation from tanh to sigmoid.
"""

from __future__ import annotations

import numpy as np


def cell_forward(x, h_prev, c_prev, W, U, b, literal_cell):
    h = h_prev.shape[0]
    pre = W @ x + U @ h_prev + b
    i = 1.0 / (1.0 + np.exp(-pre[:h]))
    f = 1.0 / (1.0 + np.exp(-pre[h : 2 * h]))
    o = 1.0 / (1.0 + np.exp(-pre[2 * h : 3 * h]))
    if literal_cell:
        g = 1.0 / (1.0 + np.exp(-pre[3 * h :]))
    else:
        g = np.tanh(pre[3 * h :])
    c_new = f * c_prev + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    hc = np.concatenate([h_new, c_new])
    cache = (i, f, o, g, tc)
    return hc, cache


def cell_backward(gh, gc, x, h_prev, c_prev, W, U, cache, literal_cell):
    i, f, o, g, tc = cache
    h = h_prev.shape[0]

    do = gh * tc
    dc = gc + gh * o * (1.0 - tc * tc)
    di = dc * g
    df = dc * c_prev
    dg = dc * i
    dc_prev = dc * f

    dpre = np.empty(4 * h)
    dpre[:h] = di * i * (1.0 - i)
    dpre[h : 2 * h] = df * f * (1.0 - f)
    dpre[2 * h : 3 * h] = do * o * (1.0 - o)
    if literal_cell:
        dpre[3 * h :] = dg * g * (1.0 - g)
    else:
        dpre[3 * h :] = dg * (1.0 - g * g)

    dW = np.outer(dpre, x)
    dU = np.outer(dpre, h_prev)
    db = dpre
    dx = W.T @ dpre
    dh_prev = U.T @ dpre
    return dx, dh_prev, dc_prev, dW, dU, db
