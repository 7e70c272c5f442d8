"""Hot inner loops, each with a numba and a pure-numpy implementation.

The public names ``col2im_accumulate``, ``percentile_rank`` and ``fdii_scan``
dispatch to one or the other according to
:data:`s2sdrought._accel.USE_NUMBA`.  Both paths are deterministic: every
output element is reduced in a fixed order, so results do not depend on
thread partitioning.

Convolution kernels work on inputs that are already padded; padding policy
lives in :mod:`s2sdrought.nn`.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import USE_NUMBA, njit

# im2col buffers above this many elements are built one kernel row at a time
_IM2COL_LIMIT = 4_000_000


def conv_out_size(n, k, stride):
    return (n - k) // stride + 1


# ---------------------------------------------------------------------------
# convolution: GEMM work goes through BLAS (np.tensordot); only the col2im
# scatter-add differs between backends.


def _windows(xp, k, stride, ho, wo):
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _row_blocks(n_elems, k):
    """Kernel-row blocks keeping each im2col buffer under the size limit."""
    rows = max(1, min(k, _IM2COL_LIMIT * k // max(n_elems, 1)))
    return [(r, min(r + rows, k)) for r in range(0, k, rows)]


def conv_forward(xp, w, stride):
    """Cross-correlation of padded ``xp[B,Ci,Hp,Wp]`` with ``w[Co,Ci,k,k]``."""
    b, ci, hp, wp = xp.shape
    co, _, k, _ = w.shape
    ho, wo = conv_out_size(hp, k, stride), conv_out_size(wp, k, stride)
    win = _windows(xp, k, stride, ho, wo)  # [B, Ci, Ho, Wo, k, k]
    blocks = _row_blocks(b * ci * ho * wo * k * k, k)
    if len(blocks) == 1:
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    else:
        out = np.zeros((b, ho, wo, co))
        for r0, r1 in blocks:
            out += np.tensordot(win[:, :, :, :, r0:r1, :], w[:, :, r0:r1, :], axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv_backward_weight(xp, gy, stride, k):
    b, ci, hp, wp = xp.shape
    _, co, ho, wo = gy.shape
    win = _windows(xp, k, stride, ho, wo)
    blocks = _row_blocks(b * ci * ho * wo * k * k, k)
    if len(blocks) == 1:
        return np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))
    gw = np.empty((co, ci, k, k))
    for r0, r1 in blocks:
        gw[:, :, r0:r1, :] = np.tensordot(gy, win[:, :, :, :, r0:r1, :], axes=([0, 2, 3], [0, 2, 3]))
    return gw


def conv_backward_input(gy, w, stride, hp, wp):
    """Gradient w.r.t. the padded input; also the transposed-convolution map."""
    b, co, ho, wo = gy.shape
    _, ci, k, _ = w.shape
    gxp = np.zeros((b, ci, hp, wp))
    for r0, r1 in _row_blocks(b * ci * ho * wo * k * k, k):
        cols = np.tensordot(gy, w[:, :, r0:r1, :], axes=([1], [0]))  # [B, Ho, Wo, Ci, kr, k]
        col2im_accumulate(gxp, np.ascontiguousarray(cols), r0, stride)
    return gxp


def col2im_accumulate_numpy(gxp, cols, row0, stride):
    """``gxp[b, c, y*s + row0 + i, z*s + j] += cols[b, y, z, c, i, j]``."""
    _, ho, wo, _, kr, kc = cols.shape
    hspan = (ho - 1) * stride + 1
    wspan = (wo - 1) * stride + 1
    c2 = cols.transpose(0, 3, 1, 2, 4, 5)
    for i in range(kr):
        r = row0 + i
        for j in range(kc):
            gxp[:, :, r : r + hspan : stride, j : j + wspan : stride] += c2[..., i, j]


def percentile_rank_numpy(values, pools):
    """Plotting-position percentile of ``values[m]`` within ``pools[m, :]``.

    rank = (#pool < v) + 1 when v is absent from the pool, otherwise the
    mid-rank of its tie block; percentile = 100 * rank / (N + 1) with N the
    number of finite pool entries.  NaN values or empty pools give NaN.
    """
    v = values[:, None]
    n = np.isfinite(pools).sum(axis=1)
    below = (pools < v).sum(axis=1)
    ties = (pools == v).sum(axis=1)
    rank = below + np.where(ties > 0, (ties + 1) / 2.0, 1.0)
    out = 100.0 * rank / (n + 1.0)
    out[~np.isfinite(values) | (n == 0)] = np.nan
    return out


def fdii_scan_numpy(pct, max_window, drop_min, end_max, rate_baseline, severity_cap):
    """Per-column flash-drought intensity scan over pentad percentiles ``pct[P, M]``.

    Returns (fd_int, dro_sev, onset, end, duration) arrays of length M.
    """
    p, m = pct.shape
    best_rate = np.zeros(m)
    onset = np.full(m, -1, dtype=np.int64)
    end = np.full(m, -1, dtype=np.int64)
    for t in range(p - 1):
        start = pct[t]
        for n in range(1, max_window + 1):
            if t + n >= p:
                break
            stop = pct[t + n]
            drop = start - stop
            ok = np.isfinite(drop) & (stop < end_max) & (drop >= drop_min)
            rate = np.where(ok, drop / n, 0.0)
            better = ok & (rate > best_rate)
            best_rate = np.where(better, rate, best_rate)
            onset = np.where(better, t, onset)
            end = np.where(better, t + n, end)
    dro_sev = np.zeros(m)
    duration = np.zeros(m, dtype=np.int64)
    for col in np.nonzero(end >= 0)[0]:
        total = 0.0
        count = 0
        e = end[col]
        while e + count < p and count < severity_cap:
            val = pct[e + count, col]
            if not val < end_max:
                break
            total += end_max - val
            count += 1
        dro_sev[col] = total / count
        duration[col] = count
    return best_rate / rate_baseline, dro_sev, onset, end, duration


# ---------------------------------------------------------------------------
# numba path


@njit
def col2im_accumulate_numba(gxp, cols, row0, stride):
    b, ho, wo, ci, kr, kc = cols.shape
    for bb in range(b):
        for y in range(ho):
            for z in range(wo):
                for c in range(ci):
                    for i in range(kr):
                        row = y * stride + row0 + i
                        for j in range(kc):
                            gxp[bb, c, row, z * stride + j] += cols[bb, y, z, c, i, j]


@njit
def percentile_rank_numba(values, pools):
    m, q = pools.shape
    out = np.empty(m)
    for r in range(m):
        v = values[r]
        n = 0
        below = 0
        ties = 0
        for s in range(q):
            x = pools[r, s]
            if np.isfinite(x):
                n += 1
                if x < v:
                    below += 1
                elif x == v:
                    ties += 1
        if not np.isfinite(v) or n == 0:
            out[r] = np.nan
            continue
        rank = below + ((ties + 1) / 2.0 if ties > 0 else 1.0)
        out[r] = 100.0 * rank / (n + 1.0)
    return out


@njit
def _fdii_scan_numba(pct, max_window, drop_min, end_max, rate_baseline, severity_cap):
    p, m = pct.shape
    fd_int = np.zeros(m)
    dro_sev = np.zeros(m)
    onset = np.full(m, -1, dtype=np.int64)
    end = np.full(m, -1, dtype=np.int64)
    duration = np.zeros(m, dtype=np.int64)
    for col in range(m):
        best = 0.0
        for t in range(p - 1):
            start = pct[t, col]
            for n in range(1, max_window + 1):
                if t + n >= p:
                    break
                stop = pct[t + n, col]
                drop = start - stop
                if np.isfinite(drop) and stop < end_max and drop >= drop_min:
                    rate = drop / n
                    if rate > best:
                        best = rate
                        onset[col] = t
                        end[col] = t + n
        if end[col] >= 0:
            total = 0.0
            count = 0
            e = end[col]
            while e + count < p and count < severity_cap:
                val = pct[e + count, col]
                if not val < end_max:
                    break
                total += end_max - val
                count += 1
            dro_sev[col] = total / count
            duration[col] = count
        fd_int[col] = best / rate_baseline
    return fd_int, dro_sev, onset, end, duration


def fdii_scan_numba(pct, max_window, drop_min, end_max, rate_baseline, severity_cap):
    return _fdii_scan_numba(
        np.ascontiguousarray(pct, dtype=np.float64),
        int(max_window),
        float(drop_min),
        float(end_max),
        float(rate_baseline),
        int(severity_cap),
    )


# ---------------------------------------------------------------------------
# dispatch

if USE_NUMBA:
    col2im_accumulate = col2im_accumulate_numba
    percentile_rank = percentile_rank_numba
    fdii_scan = fdii_scan_numba
else:
    col2im_accumulate = col2im_accumulate_numpy
    percentile_rank = percentile_rank_numpy
    fdii_scan = fdii_scan_numpy
