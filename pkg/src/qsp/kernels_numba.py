"""numba @njit twins of the hot kernels in `qsp.kernels`.

Only imported when the numba backend is active.  The integer kernels run
entirely in int64; the float kernel accumulates per output site in a fixed
loop order, which is enough because quantised inputs make every partial sum
exactly representable.
"""

import numpy as np
from numba import njit, prange


@njit(cache=True)
def _pad_f64(x, pad):
    cin, h, wdt = x.shape
    xp = np.zeros((cin, h + 2 * pad, wdt + 2 * pad), np.float64)
    xp[:, pad : pad + h, pad : pad + wdt] = x
    return xp


@njit(cache=True)
def _pad_i64(x, pad):
    cin, h, wdt = x.shape
    xp = np.zeros((cin, h + 2 * pad, wdt + 2 * pad), np.int64)
    xp[:, pad : pad + h, pad : pad + wdt] = x
    return xp


@njit(cache=True, parallel=True)
def conv2d_f64_nb(x, w, bias, pad):
    cin, h, wdt = x.shape
    cout = w.shape[0]
    k = w.shape[2]
    ho = h + 2 * pad - k + 1
    wo = wdt + 2 * pad - k + 1
    xp = _pad_f64(x, pad) if pad else x
    out = np.empty((cout, ho, wo), np.float64)
    for co in prange(cout):
        acc = np.full((ho, wo), bias[co])
        for ci in range(cin):
            for di in range(k):
                for dj in range(k):
                    wv = w[co, ci, di, dj]
                    for i in range(ho):
                        row = xp[ci, i + di]
                        for j in range(wo):
                            acc[i, j] += wv * row[j + dj]
        out[co] = acc
    return out


@njit(cache=True, parallel=True)
def conv2d_i64_nb(x, w, bias, pad):
    cin, h, wdt = x.shape
    cout = w.shape[0]
    k = w.shape[2]
    ho = h + 2 * pad - k + 1
    wo = wdt + 2 * pad - k + 1
    xp = _pad_i64(x, pad) if pad else x
    out = np.empty((cout, ho, wo), np.int64)
    for co in prange(cout):
        acc = np.full((ho, wo), bias[co])
        for ci in range(cin):
            for di in range(k):
                for dj in range(k):
                    wv = w[co, ci, di, dj]
                    for i in range(ho):
                        row = xp[ci, i + di]
                        for j in range(wo):
                            acc[i, j] += wv * row[j + dj]
        out[co] = acc
    return out


@njit(cache=True, parallel=True)
def maxpool2x2_nb(x):
    c, h, w = x.shape
    out = np.empty((c, h // 2, w // 2), x.dtype)
    for ch in prange(c):
        for i in range(h // 2):
            for j in range(w // 2):
                a = x[ch, 2 * i, 2 * j]
                b = x[ch, 2 * i, 2 * j + 1]
                cc = x[ch, 2 * i + 1, 2 * j]
                d = x[ch, 2 * i + 1, 2 * j + 1]
                m = a
                if b > m:
                    m = b
                if cc > m:
                    m = cc
                if d > m:
                    m = d
                out[ch, i, j] = m
    return out


@njit(cache=True, parallel=True)
def threshold_count_nb(flat, thresholds):
    c, n = flat.shape
    nt = thresholds.shape[1]
    out = np.empty((c, n), np.int64)
    for ch in prange(c):
        row = thresholds[ch]
        for i in range(n):
            v = flat[ch, i]
            # binary search: count of row entries <= v
            lo, hi = 0, nt
            while lo < hi:
                mid = (lo + hi) // 2
                if row[mid] <= v:
                    lo = mid + 1
                else:
                    hi = mid
            out[ch, i] = lo
    return out


@njit(cache=True)
def nms_greedy_nb(xs, ys, radius):
    n = xs.shape[0]
    keep = np.zeros(n, np.bool_)
    kept_x = np.empty(n, np.float64)
    kept_y = np.empty(n, np.float64)
    m = 0
    for i in range(n):
        ok = True
        for j in range(m):
            dx = abs(xs[i] - kept_x[j])
            dy = abs(ys[i] - kept_y[j])
            if dx <= radius and dy <= radius:
                ok = False
                break
        if ok:
            keep[i] = True
            kept_x[m] = xs[i]
            kept_y[m] = ys[i]
            m += 1
    return keep
