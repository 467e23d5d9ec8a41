"""Direct-loop convolution kernels for stride-1 layers with few channels.

For a 3 -> 3 channel 5x5 conv at full input resolution the im2col patch
matrix is 25x larger than the image and the matmul has only three output
rows, so the copy dominates.  These loops touch each input row once per
tap instead.  Inputs must already be zero padded.
"""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def conv_forward(xp, w, out):
    bsz, o_n, h_n, w_n = out.shape
    c_n, k = xp.shape[1], w.shape[2]
    for b in range(bsz):
        for o in range(o_n):
            acc = out[b, o]
            for c in range(c_n):
                for i in range(k):
                    for j in range(k):
                        wv = w[o, c, i, j]
                        for h in range(h_n):
                            row = xp[b, c, h + i]
                            dst = acc[h]
                            for x in range(w_n):
                                dst[x] += wv * row[x + j]


@numba.njit(cache=True)
def conv_grad_weight(xp, g, gw):
    bsz, o_n, h_n, w_n = g.shape
    c_n, k = xp.shape[1], gw.shape[2]
    # one row of partial sums per column tap keeps the inner loop vectorisable
    tmp = np.zeros((k, w_n), dtype=g.dtype)
    for o in range(o_n):
        for c in range(c_n):
            for i in range(k):
                tmp[:] = 0
                for b in range(bsz):
                    for h in range(h_n):
                        row = xp[b, c, h + i]
                        gr = g[b, o, h]
                        for j in range(k):
                            t = tmp[j]
                            for x in range(w_n):
                                t[x] += gr[x] * row[x + j]
                for j in range(k):
                    gw[o, c, i, j] += tmp[j].sum()


@numba.njit(cache=True)
def conv_grad_input(w, g, gxp):
    bsz, o_n, h_n, w_n = g.shape
    c_n, k = gxp.shape[1], w.shape[2]
    for b in range(bsz):
        for c in range(c_n):
            for o in range(o_n):
                for h in range(h_n):
                    gr = g[b, o, h]
                    for i in range(k):
                        dst = gxp[b, c, h + i]
                        for j in range(k):
                            wv = w[o, c, i, j]
                            for x in range(w_n):
                                dst[x + j] += wv * gr[x]
