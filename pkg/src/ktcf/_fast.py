"""Optional numba kernels for the hot LSTM loops.

The counterfactual search runs hundreds of forward/backward passes over a
single short sequence, where numpy's per-call overhead dominates. These
kernels mirror the numpy reference implementations in kt_core exactly
(same op order, float64, no fastmath) and are used when numba imports;
everything degrades gracefully to the numpy path otherwise.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        return wrap


@njit(cache=True)
def lstm_forward(base, delta, w_h, b, wy_next, by_next, r):
    """Forward over one KC sequence, batched over relaxed response rows.

    base/delta: (steps, 4H) input-weight rows for the shared KC sequence;
    wy_next/by_next: output head gathered at each step's predicted KC;
    r: (B, steps+1). Returns gate/cell/hidden caches and (B, steps) preds.
    """
    steps, h4 = base.shape
    h_dim = h4 // 4
    n_batch = r.shape[0]
    gates = np.empty((steps, n_batch, h4))
    c_all = np.empty((steps, n_batch, h_dim))
    c_prev = np.empty((steps, n_batch, h_dim))
    h_all = np.empty((steps, n_batch, h_dim))
    preds = np.empty((n_batch, steps))
    h = np.zeros((n_batch, h_dim))
    c = np.zeros((n_batch, h_dim))
    for s in range(steps):
        a = np.dot(h, w_h)
        for bi in range(n_batch):
            r_bs = r[bi, s]
            for j in range(h4):
                a[bi, j] += base[s, j] + r_bs * delta[s, j] + b[j]
        for bi in range(n_batch):
            for j in range(h_dim):
                ig = 1.0 / (1.0 + np.exp(-a[bi, j]))
                fg = 1.0 / (1.0 + np.exp(-a[bi, h_dim + j]))
                gg = np.tanh(a[bi, 2 * h_dim + j])
                og = 1.0 / (1.0 + np.exp(-a[bi, 3 * h_dim + j]))
                gates[s, bi, j] = ig
                gates[s, bi, h_dim + j] = fg
                gates[s, bi, 2 * h_dim + j] = gg
                gates[s, bi, 3 * h_dim + j] = og
                c_prev[s, bi, j] = c[bi, j]
                cn = fg * c[bi, j] + ig * gg
                c[bi, j] = cn
                c_all[s, bi, j] = cn
                hn = og * np.tanh(cn)
                h[bi, j] = hn
                h_all[s, bi, j] = hn
        for bi in range(n_batch):
            z = by_next[s]
            for j in range(h_dim):
                z += h[bi, j] * wy_next[s, j]
            preds[bi, s] = 1.0 / (1.0 + np.exp(-z))
    return gates, c_all, c_prev, h_all, preds


@njit(cache=True)
def lstm_backward_r(gates, c_all, c_prev, delta, w_h_t, wy_next, dlogit):
    """Reverse pass of lstm_forward w.r.t. the relaxed responses."""
    steps, n_batch, h4 = gates.shape
    h_dim = h4 // 4
    dr = np.zeros((n_batch, steps + 1))
    dh = np.zeros((n_batch, h_dim))
    dc = np.zeros((n_batch, h_dim))
    da = np.empty((n_batch, h4))
    for s in range(steps - 1, -1, -1):
        for bi in range(n_batch):
            dl = dlogit[bi, s]
            for j in range(h_dim):
                dh[bi, j] += dl * wy_next[s, j]
        for bi in range(n_batch):
            for j in range(h_dim):
                ig = gates[s, bi, j]
                fg = gates[s, bi, h_dim + j]
                gg = gates[s, bi, 2 * h_dim + j]
                og = gates[s, bi, 3 * h_dim + j]
                tc = np.tanh(c_all[s, bi, j])
                do = dh[bi, j] * tc
                dcj = dc[bi, j] + dh[bi, j] * og * (1.0 - tc * tc)
                da[bi, j] = dcj * gg * ig * (1.0 - ig)
                da[bi, h_dim + j] = dcj * c_prev[s, bi, j] * fg * (1.0 - fg)
                da[bi, 2 * h_dim + j] = dcj * ig * (1.0 - gg * gg)
                da[bi, 3 * h_dim + j] = do * og * (1.0 - og)
                dc[bi, j] = dcj * fg
        for bi in range(n_batch):
            acc = 0.0
            for j in range(h4):
                acc += da[bi, j] * delta[s, j]
            dr[bi, s] = acc
        dh = np.dot(da, w_h_t)
    return dr
