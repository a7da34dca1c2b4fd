# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: integral images, conv forward, cascade window scan,
and the boosting split search.

Numerical contract: bit-identical results to ``_kernels_py`` (same operation
order, same float widths, same tie-breaking). The build uses
-ffp-contract=off so mul+add rounding matches numpy's.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()

BACKEND_NAME = "compiled"


def integral_images(cnp.float32_t[:, :, ::1] planes):
    cdef Py_ssize_t c = planes.shape[0]
    cdef Py_ssize_t h = planes.shape[1]
    cdef Py_ssize_t w = planes.shape[2]
    out = np.zeros((c, h + 1, w + 1), dtype=np.float64)
    cdef cnp.float64_t[:, :, ::1] tab = out
    cdef Py_ssize_t ci, y, x
    cdef double rs
    with nogil:
        for ci in range(c):
            for y in range(h):
                rs = 0.0
                for x in range(w):
                    rs = rs + <double> planes[ci, y, x]
                    tab[ci, y + 1, x + 1] = tab[ci, y, x + 1] + rs
    return out


def conv_forward(cnp.float32_t[:, :, ::1] inp,
                 cnp.float32_t[:, :, :, ::1] weights,
                 cnp.float32_t[::1] bias,
                 int stride, int pad, bint relu, bint pool):
    cdef Py_ssize_t cin = inp.shape[0]
    cdef Py_ssize_t h = inp.shape[1]
    cdef Py_ssize_t w = inp.shape[2]
    cdef Py_ssize_t out_c = weights.shape[0]
    cdef Py_ssize_t kh = weights.shape[2]
    cdef Py_ssize_t kw = weights.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1

    # zero-padded copy keeps the inner loop branchless; padded taps add
    # +-0.0 which leaves the accumulator bit-identical to skipping them
    pad_arr = np.zeros((cin, h + 2 * pad, w + 2 * pad), dtype=np.float32)
    pad_arr[:, pad:pad + h, pad:pad + w] = inp
    cdef cnp.float32_t[:, :, ::1] padded = pad_arr

    acc_arr = np.zeros((out_c, oh, ow), dtype=np.float64)
    cdef cnp.float64_t[:, :, ::1] acc = acc_arr
    cdef cnp.float64_t[:, :, ::1] pooled
    cdef Py_ssize_t oc, oy, ox, c, ky, kx
    cdef double wv, s
    with nogil:
        for oc in range(out_c):
            for oy in range(oh):
                # row accumulation: per output pixel the taps still arrive
                # in (c, ky, kx) order, matching the numpy fallback
                for c in range(cin):
                    for ky in range(kh):
                        for kx in range(kw):
                            wv = <double> weights[oc, c, ky, kx]
                            for ox in range(ow):
                                acc[oc, oy, ox] = acc[oc, oy, ox] + wv * \
                                    <double> padded[c, oy * stride + ky,
                                                    ox * stride + kx]
                for ox in range(ow):
                    s = acc[oc, oy, ox] + <double> bias[oc]
                    if relu and s < 0.0:
                        s = 0.0
                    acc[oc, oy, ox] = s

    cdef Py_ssize_t ph, pw
    cdef double a, b, c2, d, m1, m2
    if pool:
        ph = oh // 2
        pw = ow // 2
        pooled_arr = np.empty((out_c, ph, pw), dtype=np.float64)
        pooled = pooled_arr
        with nogil:
            for oc in range(out_c):
                for oy in range(ph):
                    for ox in range(pw):
                        a = acc[oc, 2 * oy, 2 * ox]
                        b = acc[oc, 2 * oy + 1, 2 * ox]
                        c2 = acc[oc, 2 * oy, 2 * ox + 1]
                        d = acc[oc, 2 * oy + 1, 2 * ox + 1]
                        m1 = a if a > b else b
                        m2 = c2 if c2 > d else d
                        pooled[oc, oy, ox] = m1 if m1 > m2 else m2
        return pooled_arr.astype(np.float32)
    return acc_arr.astype(np.float32)


cdef inline double _rect_sum(const cnp.float64_t[:, :, ::1] tab, Py_ssize_t c,
                             Py_ssize_t y0, Py_ssize_t x0,
                             Py_ssize_t y1, Py_ssize_t x1) nogil:
    # ((a - b) - c) + d, same association as the fallback
    return tab[c, y1, x1] - tab[c, y0, x1] - tab[c, y1, x0] + tab[c, y0, x0]


cdef inline double _rect_sum4(const cnp.float64_t[:, :, :, ::1] tab, Py_ssize_t s,
                              Py_ssize_t c, Py_ssize_t y0, Py_ssize_t x0,
                              Py_ssize_t y1, Py_ssize_t x1) nogil:
    return tab[s, c, y1, x1] - tab[s, c, y0, x1] - tab[s, c, y1, x0] + tab[s, c, y0, x0]


def scan_cascade(cnp.float32_t[:, :, ::1] planes,
                 cnp.float64_t[:, :, ::1] tables,
                 int win_h, int win_w, int step_y, int step_x,
                 cnp.int8_t[:, ::1] kind,
                 cnp.int32_t[:, ::1] chan,
                 cnp.int32_t[:, ::1] chan_b,
                 cnp.int32_t[:, :, ::1] rect,
                 cnp.int32_t[:, :, ::1] rect_b,
                 cnp.float64_t[:, ::1] thr,
                 cnp.int8_t[:, ::1] pol,
                 cnp.float64_t[:, ::1] leaf,
                 cnp.float64_t[::1] reject,
                 int t0,
                 cnp.float64_t[:, ::1] cum0,
                 bint early_exit):
    cdef Py_ssize_t h = planes.shape[1]
    cdef Py_ssize_t w = planes.shape[2]
    cdef Py_ssize_t ny = (h - win_h) // step_y + 1
    cdef Py_ssize_t nx = (w - win_w) // step_x + 1
    cdef Py_ssize_t n_trees = kind.shape[0]
    cdef Py_ssize_t n_internal = kind.shape[1]
    cdef Py_ssize_t n_leaves = leaf.shape[1]
    cdef int depth = 0
    while (1 << depth) < n_leaves:
        depth += 1

    score_arr = np.zeros((ny, nx), dtype=np.float64)
    stop_arr = np.full((ny, nx), -1, dtype=np.int32)
    cdef cnp.float64_t[:, ::1] score = score_arr
    cdef cnp.int32_t[:, ::1] stop = stop_arr

    cdef Py_ssize_t gy, gx, oy, ox, t, node
    cdef int lvl
    cdef cnp.int8_t k
    cdef double v, cum
    cdef bint left
    cdef Py_ssize_t y0, x0, y0b, x0b
    with nogil:
        for gy in range(ny):
            oy = gy * step_y
            for gx in range(nx):
                ox = gx * step_x
                cum = cum0[gy, gx]
                for t in range(t0, n_trees):
                    node = 0
                    for lvl in range(depth):
                        k = kind[t, node]
                        if k < 0:
                            left = True
                        else:
                            if k == 0:
                                v = <double> planes[chan[t, node],
                                                    oy + rect[t, node, 1],
                                                    ox + rect[t, node, 0]]
                            elif k == 1:
                                y0 = oy + rect[t, node, 1]
                                x0 = ox + rect[t, node, 0]
                                v = _rect_sum(tables, chan[t, node], y0, x0,
                                              y0 + rect[t, node, 3],
                                              x0 + rect[t, node, 2])
                            else:
                                y0 = oy + rect[t, node, 1]
                                x0 = ox + rect[t, node, 0]
                                y0b = oy + rect_b[t, node, 1]
                                x0b = ox + rect_b[t, node, 0]
                                v = _rect_sum(tables, chan[t, node], y0, x0,
                                              y0 + rect[t, node, 3],
                                              x0 + rect[t, node, 2]) \
                                    - _rect_sum(tables, chan_b[t, node], y0b, x0b,
                                                y0b + rect_b[t, node, 3],
                                                x0b + rect_b[t, node, 2])
                            if pol[t, node] > 0:
                                left = v < thr[t, node]
                            else:
                                left = v >= thr[t, node]
                        node = 2 * node + 1 + (0 if left else 1)
                    cum = cum + leaf[t, node - n_internal]
                    if early_exit and cum < reject[t]:
                        stop[gy, gx] = <cnp.int32_t> t
                        break
                score[gy, gx] = cum
    return score_arr, stop_arr


def _best_split_scan(cnp.float64_t[:, ::1] vals,
                     cnp.int8_t[::1] y,
                     cnp.float64_t[::1] w,
                     int n_bins, Py_ssize_t f_offset):
    """Min/max + weighted histogram + edge scan over a block of feature values.

    vals: (m, B) float64, sample-major. Returns (err, feat, bin_edge, vmin,
    vmax) with feat as a global index (f_offset added); feat is -1 if no
    splittable column exists in the block.
    """
    cdef Py_ssize_t m = vals.shape[0]
    cdef Py_ssize_t nb = vals.shape[1]
    vmin_arr = np.empty(nb, dtype=np.float64)
    vmax_arr = np.empty(nb, dtype=np.float64)
    inv_arr = np.zeros(nb, dtype=np.float64)
    hp_arr = np.zeros((nb, n_bins), dtype=np.float64)
    hn_arr = np.zeros((nb, n_bins), dtype=np.float64)
    cdef cnp.float64_t[::1] vmin = vmin_arr
    cdef cnp.float64_t[::1] vmax = vmax_arr
    cdef cnp.float64_t[::1] inv = inv_arr
    cdef cnp.float64_t[:, ::1] hp = hp_arr
    cdef cnp.float64_t[:, ::1] hn = hn_arr

    cdef Py_ssize_t i, f, b, j
    cdef double v, best_err, err, pl, nl, pr, nr, el, er, tp, tn, cpj, cnj
    cdef Py_ssize_t best_f = -1, best_j = -1
    cdef double best_vmin = 0.0, best_vmax = 0.0
    with nogil:
        for f in range(nb):
            vmin[f] = vals[0, f]
            vmax[f] = vals[0, f]
        for i in range(1, m):
            for f in range(nb):
                v = vals[i, f]
                if v < vmin[f]:
                    vmin[f] = v
                if v > vmax[f]:
                    vmax[f] = v
        for f in range(nb):
            if vmax[f] > vmin[f]:
                inv[f] = n_bins / (vmax[f] - vmin[f])
        for i in range(m):
            for f in range(nb):
                b = <Py_ssize_t> floor((vals[i, f] - vmin[f]) * inv[f])
                if b < 0:
                    b = 0
                elif b > n_bins - 1:
                    b = n_bins - 1
                if y[i] > 0:
                    hp[f, b] = hp[f, b] + w[i]
                else:
                    hn[f, b] = hn[f, b] + w[i]

        best_err = 1e308
        for f in range(nb):
            if vmax[f] <= vmin[f]:
                continue
            # prefix sums in place, matching np.cumsum order
            for b in range(1, n_bins):
                hp[f, b] = hp[f, b] + hp[f, b - 1]
                hn[f, b] = hn[f, b] + hn[f, b - 1]
            tp = hp[f, n_bins - 1]
            tn = hn[f, n_bins - 1]
            for j in range(1, n_bins):
                cpj = hp[f, j - 1]
                cnj = hn[f, j - 1]
                pl = cpj
                nl = cnj
                pr = tp - cpj
                nr = tn - cnj
                el = pl if pl < nl else nl
                er = pr if pr < nr else nr
                err = el + er
                if err < best_err:
                    best_err = err
                    best_f = f
                    best_j = j
                    best_vmin = vmin[f]
                    best_vmax = vmax[f]
    if best_f < 0:
        return (float("inf"), -1, -1, 0.0, 0.0)
    return (best_err, <Py_ssize_t> (f_offset + best_f), best_j, best_vmin, best_vmax)


def best_split_zero(cnp.float32_t[:, ::1] data,
                    cnp.int64_t[::1] idx,
                    cnp.int8_t[::1] labels,
                    cnp.float64_t[::1] weights,
                    int n_bins):
    cdef Py_ssize_t m = idx.shape[0]
    cdef Py_ssize_t n_feat = data.shape[1]
    y_arr = np.empty(m, dtype=np.int8)
    w_arr = np.empty(m, dtype=np.float64)
    cdef cnp.int8_t[::1] y = y_arr
    cdef cnp.float64_t[::1] w = w_arr
    cdef Py_ssize_t i, f0, f1, f, nb
    for i in range(m):
        y[i] = labels[idx[i]]
        w[i] = weights[idx[i]]

    cdef Py_ssize_t block = 1024
    cdef cnp.float64_t[:, ::1] vals
    best = (float("inf"), -1, -1, 0.0, 0.0)
    for f0 in range(0, n_feat, block):
        f1 = min(f0 + block, n_feat)
        nb = f1 - f0
        vals_arr = np.empty((m, nb), dtype=np.float64)
        vals = vals_arr
        with nogil:
            for i in range(m):
                for f in range(nb):
                    vals[i, f] = <double> data[idx[i], f0 + f]
        cand = _best_split_scan(vals, y, w, n_bins, f0)
        if cand[0] < best[0]:
            best = cand
    return best


def best_split_high(cnp.float64_t[:, :, :, ::1] tables,
                    cnp.int32_t[:, ::1] rects,
                    cnp.int64_t[::1] idx,
                    cnp.int8_t[::1] labels,
                    cnp.float64_t[::1] weights,
                    int n_bins):
    cdef Py_ssize_t m = idx.shape[0]
    cdef Py_ssize_t n_feat = rects.shape[0]
    y_arr = np.empty(m, dtype=np.int8)
    w_arr = np.empty(m, dtype=np.float64)
    cdef cnp.int8_t[::1] y = y_arr
    cdef cnp.float64_t[::1] w = w_arr
    cdef Py_ssize_t i
    for i in range(m):
        y[i] = labels[idx[i]]
        w[i] = weights[idx[i]]

    cdef Py_ssize_t block = 512
    cdef cnp.float64_t[:, ::1] vals
    best = (float("inf"), -1, -1, 0.0, 0.0)
    cdef Py_ssize_t f0, f1, f, nb, s, fg
    for f0 in range(0, n_feat, block):
        f1 = min(f0 + block, n_feat)
        nb = f1 - f0
        vals_arr = np.empty((m, nb), dtype=np.float64)
        vals = vals_arr
        with nogil:
            for i in range(m):
                s = idx[i]
                for f in range(nb):
                    fg = f0 + f
                    vals[i, f] = _rect_sum4(tables, s, rects[fg, 0],
                                            rects[fg, 2], rects[fg, 1],
                                            rects[fg, 2] + rects[fg, 4],
                                            rects[fg, 1] + rects[fg, 3]) \
                        - _rect_sum4(tables, s, rects[fg, 5],
                                     rects[fg, 7], rects[fg, 6],
                                     rects[fg, 7] + rects[fg, 9],
                                     rects[fg, 6] + rects[fg, 8])
        cand = _best_split_scan(vals, y, w, n_bins, f0)
        if cand[0] < best[0]:
            best = cand
    return best
