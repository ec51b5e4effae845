# cython: boundscheck=False, wraparound=False, cdivision=True
"""Cython fused LSTM cell kernel (compiled backend).

Same contract as lstm_py: W (4h, d), U (4h, h), b (4h,), gate blocks in
the order input, forget, output, candidate.
"""

from libc.math cimport exp, tanh

import numpy as np


cdef inline double _sigm(double v) nogil:
    return 1.0 / (1.0 + exp(-v))


def cell_forward(double[::1] x, double[::1] h_prev, double[::1] c_prev,
                 double[:, ::1] W, double[:, ::1] U, double[::1] b,
                 bint literal_cell):
    cdef Py_ssize_t H = h_prev.shape[0]
    cdef Py_ssize_t D = x.shape[0]
    cdef Py_ssize_t r, j

    i_arr = np.empty(H)
    f_arr = np.empty(H)
    o_arr = np.empty(H)
    g_arr = np.empty(H)
    tc_arr = np.empty(H)
    hc = np.empty(2 * H)
    cdef double[::1] iv = i_arr, fv = f_arr, ov = o_arr, gv = g_arr
    cdef double[::1] tcv = tc_arr, hcv = hc
    cdef double s, pi, pf, po, pg, cn

    for r in range(H):
        pi = b[r]
        pf = b[H + r]
        po = b[2 * H + r]
        pg = b[3 * H + r]
        for j in range(D):
            s = x[j]
            pi += W[r, j] * s
            pf += W[H + r, j] * s
            po += W[2 * H + r, j] * s
            pg += W[3 * H + r, j] * s
        for j in range(H):
            s = h_prev[j]
            pi += U[r, j] * s
            pf += U[H + r, j] * s
            po += U[2 * H + r, j] * s
            pg += U[3 * H + r, j] * s
        iv[r] = _sigm(pi)
        fv[r] = _sigm(pf)
        ov[r] = _sigm(po)
        gv[r] = _sigm(pg) if literal_cell else tanh(pg)
        cn = fv[r] * c_prev[r] + iv[r] * gv[r]
        tcv[r] = tanh(cn)
        hcv[r] = ov[r] * tcv[r]
        hcv[H + r] = cn

    return hc, (i_arr, f_arr, o_arr, g_arr, tc_arr)


def cell_backward(double[::1] gh, double[::1] gc,
                  double[::1] x, double[::1] h_prev, double[::1] c_prev,
                  double[:, ::1] W, double[:, ::1] U,
                  cache, bint literal_cell):
    cdef double[::1] iv = cache[0], fv = cache[1], ov = cache[2]
    cdef double[::1] gv = cache[3], tcv = cache[4]
    cdef Py_ssize_t H = h_prev.shape[0]
    cdef Py_ssize_t D = x.shape[0]
    cdef Py_ssize_t r, j

    dpre_arr = np.empty(4 * H)
    dc_prev_arr = np.empty(H)
    dW_arr = np.empty((4 * H, D))
    dU_arr = np.empty((4 * H, H))
    dx_arr = np.zeros(D)
    dh_prev_arr = np.zeros(H)
    cdef double[::1] dpre = dpre_arr, dc_prev = dc_prev_arr
    cdef double[::1] dx = dx_arr, dh_prev = dh_prev_arr
    cdef double[:, ::1] dW = dW_arr, dU = dU_arr
    cdef double do, dc, di, df, dg, d

    for r in range(H):
        do = gh[r] * tcv[r]
        dc = gc[r] + gh[r] * ov[r] * (1.0 - tcv[r] * tcv[r])
        di = dc * gv[r]
        df = dc * c_prev[r]
        dg = dc * iv[r]
        dc_prev[r] = dc * fv[r]
        dpre[r] = di * iv[r] * (1.0 - iv[r])
        dpre[H + r] = df * fv[r] * (1.0 - fv[r])
        dpre[2 * H + r] = do * ov[r] * (1.0 - ov[r])
        if literal_cell:
            dpre[3 * H + r] = dg * gv[r] * (1.0 - gv[r])
        else:
            dpre[3 * H + r] = dg * (1.0 - gv[r] * gv[r])

    for r in range(4 * H):
        d = dpre[r]
        for j in range(D):
            dW[r, j] = d * x[j]
            dx[j] += W[r, j] * d
        for j in range(H):
            dU[r, j] = d * h_prev[j]
            dh_prev[j] += U[r, j] * d

    return dx_arr, dh_prev_arr, dc_prev_arr, dW_arr, dU_arr, dpre_arr
