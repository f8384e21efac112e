"""Compiled inner loop for backpropagation through a GRU.

The backward step is pure multiply-add work on (B, H) blocks, where numpy's
per-call overhead dominates; fusing it here is roughly 4x faster.  The
forward step stays in numpy because its tanh calls vectorize there and do
not under numba.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def gru_backward(gt, wh, rz_all, n_all, ghn_all, hs, dgi, dwh, dbh, dh):
    steps, bsz, hid = gt.shape
    dgh = np.empty((bsz, 3 * hid))
    wht = np.ascontiguousarray(wh.T)
    for t in range(steps - 1, -1, -1):
        for b in range(bsz):
            for k in range(hid):
                r = rz_all[t, b, k]
                z = rz_all[t, b, hid + k]
                n = n_all[t, b, k]
                d = dh[b, k] + gt[t, b, k]
                dn_pre = d * (1.0 - z) * (1.0 - n * n)
                dz_pre = d * (hs[t, b, k] - n) * z * (1.0 - z)
                dr_pre = dn_pre * ghn_all[t, b, k] * r * (1.0 - r)
                dgh[b, k] = dr_pre
                dgh[b, hid + k] = dz_pre
                dgh[b, 2 * hid + k] = dn_pre * r
                dgi[t, b, k] = dr_pre
                dgi[t, b, hid + k] = dz_pre
                dgi[t, b, 2 * hid + k] = dn_pre
                dh[b, k] = d * z
        dwh += np.dot(hs[t].T, dgh)
        for b in range(bsz):
            for j in range(3 * hid):
                dbh[j] += dgh[b, j]
        dh += np.dot(dgh, wht)

