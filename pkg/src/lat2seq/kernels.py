"""Fused LatticeLSTM layer: forward and backward recurrences over a DAG.

Nodes are processed in index order; ``ptr``/``pred`` give each node's
predecessors in CSR form (``pred[ptr[p]:ptr[p+1]]``, all ``< p``).  Each
predecessor edge carries a child-sum weight vector ``wh[e]`` and a
forget-gate bias vector ``bf[e]``.  Gate order in the stacked recurrent
matrix is (input, forget, output, update).

The kernels are plain numpy code compiled with numba when available.  Set
``LAT2SEQ_NUMBA=0`` to run the identical source uncompiled.
"""

from __future__ import annotations

import os

import numpy as np


def _noop_jit(*args, **kwargs):
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f


def _have_numba() -> bool:
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


USE_NUMBA = os.environ.get("LAT2SEQ_NUMBA", "1") != "0" and _have_numba()

if USE_NUMBA:
    from numba import njit
else:
    njit = _noop_jit


def _forward(px_i, px_f, px_o, px_u, Ui_T, Uf_T, Uo_T, Uu_T, ptr, pred, wh, bf):
    N, B, H = px_i.shape
    E = pred.shape[0]
    h = np.zeros((N, B, H))
    c = np.zeros((N, B, H))
    ig = np.empty((N, B, H))
    og = np.empty((N, B, H))
    ug = np.empty((N, B, H))
    tc = np.empty((N, B, H))
    ht = np.zeros((N, B, H))
    fg = np.empty((E, B, H))
    for p in range(N):
        s = ptr[p]
        t = ptr[p + 1]
        htil = np.zeros((B, H))
        for e in range(s, t):
            htil += h[pred[e]] * wh[e]
        ht[p] = htil
        i = 0.5 * np.tanh(0.5 * (px_i[p] + np.dot(htil, Ui_T))) + 0.5
        o = 0.5 * np.tanh(0.5 * (px_o[p] + np.dot(htil, Uo_T))) + 0.5
        u = np.tanh(px_u[p] + np.dot(htil, Uu_T))
        cc = i * u
        for e in range(s, t):
            k = pred[e]
            f = 0.5 * np.tanh(0.5 * (px_f[p] + np.dot(h[k], Uf_T) + bf[e])) + 0.5
            fg[e] = f
            cc += f * c[k]
        ig[p] = i
        og[p] = o
        ug[p] = u
        c[p] = cc
        tcc = np.tanh(cc)
        tc[p] = tcc
        h[p] = o * tcc
    return h, c, ig, og, ug, tc, ht, fg


def _backward(dh_in, dc_in, h, c, ig, og, ug, tc, ht, fg, Ui, Uf, Uo, Uu,
              ptr, pred, wh):
    N, B, H = h.shape
    E = pred.shape[0]
    dh = dh_in.copy()
    dc = dc_in.copy()
    dpx_i = np.zeros((N, B, H))
    dpx_f = np.zeros((N, B, H))
    dpx_o = np.zeros((N, B, H))
    dpx_u = np.zeros((N, B, H))
    dUi = np.zeros((H, H))
    dUf = np.zeros((H, H))
    dUo = np.zeros((H, H))
    dUu = np.zeros((H, H))
    dwh = np.zeros((E, H))
    dbf = np.zeros((E, H))
    for p in range(N - 1, -1, -1):
        s = ptr[p]
        t = ptr[p + 1]
        o = og[p]
        i = ig[p]
        u = ug[p]
        tcc = tc[p]
        dcp = dc[p] + dh[p] * o * (1.0 - tcc * tcc)
        da_o = dh[p] * tcc * o * (1.0 - o)
        da_i = dcp * u * i * (1.0 - i)
        da_u = dcp * i * (1.0 - u * u)
        dpx_i[p] = da_i
        dpx_o[p] = da_o
        dpx_u[p] = da_u
        if t > s:
            htil = ht[p]
            dUi += np.dot(da_i.T, htil)
            dUo += np.dot(da_o.T, htil)
            dUu += np.dot(da_u.T, htil)
            dhtil = np.dot(da_i, Ui) + np.dot(da_o, Uo) + np.dot(da_u, Uu)
            daf_sum = np.zeros((B, H))
            for e in range(s, t):
                k = pred[e]
                f = fg[e]
                dc[k] += dcp * f
                da_f = dcp * c[k] * f * (1.0 - f)
                daf_sum += da_f
                dbf[e] = da_f.sum(axis=0)
                dUf += np.dot(da_f.T, h[k])
                dh[k] += np.dot(da_f, Uf) + dhtil * wh[e]
                dwh[e] = (dhtil * h[k]).sum(axis=0)
            dpx_f[p] = daf_sum
    return dpx_i, dpx_f, dpx_o, dpx_u, dUi, dUf, dUo, dUu, dwh, dbf


forward_kernel = njit(cache=True)(_forward)
backward_kernel = njit(cache=True)(_backward)
forward_py = _forward
backward_py = _backward


def lattice_lstm_forward(px, U, ptr, pred, wh, bf, use_numba=None):
    """Run the recurrence.  ``px`` is (N, B, 4H) input projections including
    biases; ``U`` is (4H, H).  Returns ``(h, c, cache)``."""
    H = U.shape[1]
    fwd = forward_kernel if (USE_NUMBA if use_numba is None else use_numba) else forward_py
    parts = [np.ascontiguousarray(px[..., j * H:(j + 1) * H]) for j in range(4)]
    Us = [np.ascontiguousarray(U[j * H:(j + 1) * H]) for j in range(4)]
    out = fwd(*parts, *[np.ascontiguousarray(u.T) for u in Us],
              np.ascontiguousarray(ptr, dtype=np.int64), np.ascontiguousarray(pred, dtype=np.int64),
              np.ascontiguousarray(wh, dtype=np.float64), np.ascontiguousarray(bf, dtype=np.float64))
    h, c = out[0], out[1]
    return h, c, (out, Us)


def lattice_lstm_backward(dh, dc, cache, ptr, pred, wh, use_numba=None):
    (h, c, ig, og, ug, tc, ht, fg), Us = cache
    bwd = backward_kernel if (USE_NUMBA if use_numba is None else use_numba) else backward_py
    res = bwd(np.ascontiguousarray(dh), np.ascontiguousarray(dc), h, c, ig, og, ug, tc, ht, fg,
              *Us, np.ascontiguousarray(ptr, dtype=np.int64), np.ascontiguousarray(pred, dtype=np.int64),
              np.ascontiguousarray(wh, dtype=np.float64))
    dpx = np.concatenate(res[0:4], axis=-1)
    dU = np.concatenate(res[4:8], axis=0)
    return dpx, dU, res[8], res[9]
