"""Pure-numpy implementations of the hot kernels.

This is the fallback backend used when the compiled extension is unavailable
(and the reference the extension is tested against). Every function here has
a twin in ``_kernels.pyx`` with identical numerical behaviour: the same
operation order, the same float widths, the same tie-breaking. Keep the two
in sync, down to the parenthesisation of the rectangle-sum expression.

Packed cascade layout (built by ``cascade._pack_stage``): trees are complete
binary trees of uniform depth; node arrays are (T, n_nodes), leaves
(T, 2**depth). ``kind`` is -1 for a pass-through leaf node (descend left),
0 = single pixel, 1 = rectangle sum, 2 = rectangle-sum difference.
"""

import numpy as np

BACKEND_NAME = "fallback"


def integral_images(planes):
    """Summed-area tables with a zero top row/left column.

    planes: (C, H, W) float32. Returns (C, H+1, W+1) float64 where
    tab[c, y, x] is the sum of planes[c, :y, :x]; row-then-column
    accumulation order (matches the compiled kernel bit for bit).
    """
    c, h, w = planes.shape
    tab = np.zeros((c, h + 1, w + 1), dtype=np.float64)
    tab[:, 1:, 1:] = np.cumsum(np.cumsum(planes.astype(np.float64), axis=2), axis=1)
    return tab


def conv_forward(inp, weights, bias, stride, pad, relu, pool):
    """Cross-correlation + bias, optional relu, optional 2x2/2 max-pool.

    inp: (C, H, W) float32; weights: (O, C, kh, kw) float32; bias: (O,) float32.
    Accumulates in float64 tap by tap in (c, ky, kx) order, returns float32.
    """
    cin, h, w = inp.shape
    out_c, _, kh, kw = weights.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    padded = np.zeros((cin, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    padded[:, pad:pad + h, pad:pad + w] = inp
    w64 = weights.astype(np.float64)
    acc = np.zeros((out_c, oh, ow), dtype=np.float64)
    for c in range(cin):
        for ky in range(kh):
            for kx in range(kw):
                win = padded[c, ky:ky + (oh - 1) * stride + 1:stride,
                             kx:kx + (ow - 1) * stride + 1:stride]
                acc += w64[:, c, ky, kx][:, None, None] * win
    acc += bias.astype(np.float64)[:, None, None]
    if relu:
        np.maximum(acc, 0.0, out=acc)
    if pool:
        ph, pw = oh // 2, ow // 2
        a = acc[:, :2 * ph:2, :2 * pw:2]
        b = acc[:, 1:2 * ph:2, :2 * pw:2]
        c2 = acc[:, :2 * ph:2, 1:2 * pw:2]
        d = acc[:, 1:2 * ph:2, 1:2 * pw:2]
        acc = np.maximum(np.maximum(a, b), np.maximum(c2, d))
    return acc.astype(np.float32)


def _rect_sum(tab, c, y0, x0, y1, x1):
    # ((a - b) - c) + d, same association as the compiled kernel
    return tab[c, y1, x1] - tab[c, y0, x1] - tab[c, y1, x0] + tab[c, y0, x0]


def scan_cascade(planes, tables, win_h, win_w, step_y, step_x,
                 kind, chan, chan_b, rect, rect_b, thr, pol, leaf,
                 reject, t0, cum0, early_exit):
    """Evaluate trees [t0, T) on every stride-aligned window of one plane set.

    Returns (score (ny, nx) float64, stop (ny, nx) int32) where stop is the
    absolute index of the rejecting tree or -1 if the window was never
    rejected. cum0 carries scores from earlier stages.
    """
    c_, h, w = planes.shape
    ny = (h - win_h) // step_y + 1
    nx = (w - win_w) // step_x + 1
    n = ny * nx
    oy = (np.repeat(np.arange(ny), nx) * step_y).astype(np.int64)
    ox = (np.tile(np.arange(nx), ny) * step_x).astype(np.int64)
    cum = np.ascontiguousarray(cum0, dtype=np.float64).reshape(n).copy()
    stop = np.full(n, -1, dtype=np.int32)
    alive = np.ones(n, dtype=bool)

    n_trees = kind.shape[0]
    depth = int(np.log2(leaf.shape[1]) + 0.5)
    n_internal = kind.shape[1]

    for t in range(t0, n_trees):
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        node = np.zeros(idx.size, dtype=np.int64)
        for _ in range(depth):
            k = kind[t, node]
            v = np.zeros(idx.size, dtype=np.float64)
            m0 = k == 0
            if m0.any():
                sel = node[m0]
                v[m0] = planes[chan[t, sel],
                               oy[idx[m0]] + rect[t, sel, 1],
                               ox[idx[m0]] + rect[t, sel, 0]]
            m1 = k == 1
            if m1.any():
                sel = node[m1]
                y0 = oy[idx[m1]] + rect[t, sel, 1]
                x0 = ox[idx[m1]] + rect[t, sel, 0]
                v[m1] = _rect_sum(tables, chan[t, sel], y0, x0,
                                  y0 + rect[t, sel, 3], x0 + rect[t, sel, 2])
            m2 = k == 2
            if m2.any():
                sel = node[m2]
                y0 = oy[idx[m2]] + rect[t, sel, 1]
                x0 = ox[idx[m2]] + rect[t, sel, 0]
                sa = _rect_sum(tables, chan[t, sel], y0, x0,
                               y0 + rect[t, sel, 3], x0 + rect[t, sel, 2])
                y0b = oy[idx[m2]] + rect_b[t, sel, 1]
                x0b = ox[idx[m2]] + rect_b[t, sel, 0]
                sb = _rect_sum(tables, chan_b[t, sel], y0b, x0b,
                               y0b + rect_b[t, sel, 3], x0b + rect_b[t, sel, 2])
                v[m2] = sa - sb
            go_left = np.where(
                k < 0, True,
                np.where(pol[t, node] > 0, v < thr[t, node], v >= thr[t, node]))
            node = 2 * node + 1 + (~go_left).astype(np.int64)
        cum[idx] += leaf[t, node - n_internal]
        if early_exit:
            rejected = idx[cum[idx] < reject[t]]
            if rejected.size:
                stop[rejected] = t
                alive[rejected] = False
    return cum.reshape(ny, nx), stop.reshape(ny, nx)


def best_split_zero(data, idx, labels, weights, n_bins):
    """Best (feature, bin-edge) split of zero-order feature columns.

    data: (n, F) float32, sample-major; idx: samples at this node; labels ±1;
    weights: float64 over all n samples. Returns
    (err, feat, bin_edge, vmin, vmax); feat -1 when no feature is splittable.
    Error for a split is min(posL, negL) + min(posR, negR); ties resolve to
    the lowest feature index, then the lowest bin edge.
    """
    m = idx.size
    n_feat = data.shape[1]
    y = labels[idx]
    w = weights[idx]
    wp = np.where(y > 0, w, 0.0)
    wn = np.where(y > 0, 0.0, w)
    best_err = np.inf
    best = (-1, -1, 0.0, 0.0)
    block = 1024
    for f0 in range(0, n_feat, block):
        f1 = min(f0 + block, n_feat)
        nb = f1 - f0
        sub = data[idx, f0:f1].astype(np.float64)
        vmin = sub.min(axis=0)
        vmax = sub.max(axis=0)
        ok = vmax > vmin
        if not ok.any():
            continue
        inv = np.zeros(nb)
        inv[ok] = n_bins / (vmax[ok] - vmin[ok])
        bins = np.floor((sub - vmin) * inv).astype(np.int64)
        np.clip(bins, 0, n_bins - 1, out=bins)
        hp = np.zeros((nb, n_bins), dtype=np.float64)
        hn = np.zeros((nb, n_bins), dtype=np.float64)
        cols = np.broadcast_to(np.arange(nb), (m, nb))
        np.add.at(hp, (cols, bins), wp[:, None])
        np.add.at(hn, (cols, bins), wn[:, None])
        cp = np.cumsum(hp, axis=1)
        cn = np.cumsum(hn, axis=1)
        pos_l = cp[:, :-1]
        neg_l = cn[:, :-1]
        pos_r = cp[:, -1:] - pos_l
        neg_r = cn[:, -1:] - neg_l
        err = np.minimum(pos_l, neg_l) + np.minimum(pos_r, neg_r)
        err[~ok] = np.inf
        j = int(np.argmin(err))
        fi, bj = divmod(j, n_bins - 1)
        if err.flat[j] < best_err:
            best_err = float(err.flat[j])
            best = (f0 + fi, bj + 1, float(vmin[fi]), float(vmax[fi]))
    return (best_err,) + best


def high_feature_values(tables, ca, xa, ya, wa, ha, cb, xb, yb, wb, hb, idx):
    """(m, F) float64 values of rect-difference features over samples idx."""
    t = tables
    i = idx[:, None]
    sa = (t[i, ca, ya + ha, xa + wa] - t[i, ca, ya, xa + wa]
          - t[i, ca, ya + ha, xa] + t[i, ca, ya, xa])
    sb = (t[i, cb, yb + hb, xb + wb] - t[i, cb, yb, xb + wb]
          - t[i, cb, yb + hb, xb] + t[i, cb, yb, xb])
    return sa - sb


def best_split_high(tables, rects, idx, labels, weights, n_bins):
    """Best split over rect-difference features evaluated from per-sample tables.

    tables: (n, C, H+1, W+1) float64; rects: (F, 10) int32 columns
    [ch_a, xa, ya, wa, ha, ch_b, xb, yb, wb, hb]. Same contract as
    best_split_zero.
    """
    m = idx.size
    n_feat = rects.shape[0]
    y = labels[idx]
    w = weights[idx]
    wp = np.where(y > 0, w, 0.0)
    wn = np.where(y > 0, 0.0, w)
    best_err = np.inf
    best = (-1, -1, 0.0, 0.0)
    block = 512
    for f0 in range(0, n_feat, block):
        f1 = min(f0 + block, n_feat)
        nb = f1 - f0
        r = rects[f0:f1]
        sub = high_feature_values(tables, r[:, 0], r[:, 1], r[:, 2], r[:, 3],
                                  r[:, 4], r[:, 5], r[:, 6], r[:, 7], r[:, 8],
                                  r[:, 9], idx)
        vmin = sub.min(axis=0)
        vmax = sub.max(axis=0)
        ok = vmax > vmin
        if not ok.any():
            continue
        inv = np.zeros(nb)
        inv[ok] = n_bins / (vmax[ok] - vmin[ok])
        bins = np.floor((sub - vmin) * inv).astype(np.int64)
        np.clip(bins, 0, n_bins - 1, out=bins)
        hp = np.zeros((nb, n_bins), dtype=np.float64)
        hn = np.zeros((nb, n_bins), dtype=np.float64)
        cols = np.broadcast_to(np.arange(nb), (m, nb))
        np.add.at(hp, (cols, bins), wp[:, None])
        np.add.at(hn, (cols, bins), wn[:, None])
        cp = np.cumsum(hp, axis=1)
        cn = np.cumsum(hn, axis=1)
        pos_l = cp[:, :-1]
        neg_l = cn[:, :-1]
        pos_r = cp[:, -1:] - pos_l
        neg_r = cn[:, -1:] - neg_l
        err = np.minimum(pos_l, neg_l) + np.minimum(pos_r, neg_r)
        err[~ok] = np.inf
        j = int(np.argmin(err))
        fi, bj = divmod(j, n_bins - 1)
        if err.flat[j] < best_err:
            best_err = float(err.flat[j])
            best = (f0 + fi, bj + 1, float(vmin[fi]), float(vmax[fi]))
    return (best_err,) + best
