"""Hot numeric kernels with numpy and numba implementations.

Dispatch is decided once at import from `qsp.backend`.  Every kernel here
has the property that the numba and numpy paths agree bitwise on
integer-valued data; sums stay below 2**53 so even the float64 GEMM route
for integer convolution is exact.
"""

import numpy as np

from . import backend

_F64_EXACT_LIMIT = 1 << 52  # stay clear of the 2**53 integer ceiling


# -- pure numpy implementations ------------------------------------------


def _im2col(x: np.ndarray, k: int, pad: int):
    """Unfold (C,H,W) into (C*k*k, Ho*Wo) patches; returns (cols, Ho, Wo)."""
    c, h, w = x.shape
    if pad:
        xp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, pad : pad + h, pad : pad + w] = x
    else:
        xp = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    ho, wo = win.shape[1], win.shape[2]
    # (C, Ho, Wo, k, k) -> (C, k, k, Ho*Wo) -> (C*k*k, Ho*Wo)
    return win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo), ho, wo


def conv2d_f64_np(x, w, bias, pad):
    cols, ho, wo = _im2col(x, w.shape[2], pad)
    out = w.reshape(w.shape[0], -1) @ cols
    out += bias[:, None]
    return out.reshape(w.shape[0], ho, wo)


def conv2d_i64_np(x, w, bias, pad):
    k = w.shape[2]
    cols, ho, wo = _im2col(x, k, pad)
    # worst-case |accumulator| bound decides whether the BLAS float64
    # route is exact; it is for every graph the budget check admits
    bound = (
        int(np.abs(w).max(initial=0))
        * int(np.abs(x).max(initial=0))
        * k
        * k
        * x.shape[0]
    )
    if 0 < bound < _F64_EXACT_LIMIT:
        out = w.reshape(w.shape[0], -1).astype(np.float64) @ cols.astype(np.float64)
        out = out.astype(np.int64)
    else:
        out = w.reshape(w.shape[0], -1) @ cols
    out += bias[:, None]
    return out.reshape(w.shape[0], ho, wo)


def maxpool2x2_np(x):
    c, h, w = x.shape
    return x.reshape(c, h // 2, 2, w // 2, 2).max(axis=(2, 4))


def threshold_count_np(x, thresholds):
    """Count per entry how many of its channel's ascending thresholds it reaches.

    x: (C, H, W); thresholds: (C, n) non-decreasing rows. Returns int64 (C, H, W).
    """
    c = x.shape[0]
    flat = x.reshape(c, -1)
    out = np.empty(flat.shape, dtype=np.int64)
    for ch in range(c):
        out[ch] = np.searchsorted(thresholds[ch], flat[ch], side="right")
    return out.reshape(x.shape)


def nms_greedy_np(xs, ys, radius):
    """Greedy Chebyshev suppression over points already sorted by priority."""
    n = xs.shape[0]
    keep = np.zeros(n, dtype=bool)
    kept_x = np.empty(n)
    kept_y = np.empty(n)
    m = 0
    for i in range(n):
        if m:
            if (
                np.maximum(
                    np.abs(kept_x[:m] - xs[i]), np.abs(kept_y[:m] - ys[i])
                ).min()
                <= radius
            ):
                continue
        keep[i] = True
        kept_x[m] = xs[i]
        kept_y[m] = ys[i]
        m += 1
    return keep


# -- dispatch --------------------------------------------------------------

if backend.use_numba():
    from . import kernels_numba as _nb

    def conv2d_f64(x, w, bias, pad):
        return _nb.conv2d_f64_nb(x, w, bias, pad)

    def conv2d_i64(x, w, bias, pad):
        return _nb.conv2d_i64_nb(x, w, bias, pad)

    def maxpool2x2_i64(x):
        return _nb.maxpool2x2_nb(x)

    def maxpool2x2_f64(x):
        return _nb.maxpool2x2_nb(x)

    def threshold_count(x, thresholds):
        c = x.shape[0]
        out = _nb.threshold_count_nb(
            np.ascontiguousarray(x.reshape(c, -1)), np.ascontiguousarray(thresholds)
        )
        return out.reshape(x.shape)

    def nms_greedy(xs, ys, radius):
        return _nb.nms_greedy_nb(xs, ys, float(radius))

else:
    conv2d_f64 = conv2d_f64_np
    conv2d_i64 = conv2d_i64_np
    maxpool2x2_i64 = maxpool2x2_np
    maxpool2x2_f64 = maxpool2x2_np
    threshold_count = threshold_count_np
    nms_greedy = nms_greedy_np
