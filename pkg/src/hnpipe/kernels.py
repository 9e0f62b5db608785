"""Hot inner loops, each in two flavours.

Every kernel exists as a numba ``@njit`` loop (``*_nb``) and as a vectorised
numpy function (``*_np``).  The public name is bound to the numba version
unless numba is missing or ``HNPIPE_DISABLE_NUMBA`` is set.  Both flavours are
kept importable so the test-suite and ``benchmarks/bench_kernels.py`` can check
them against each other.
"""
from types import SimpleNamespace

import numpy as np

from ._accel import HAVE_NUMBA, njit

# ---------------------------------------------------------------------------
# per-pixel 3x3 statistics + Sobel magnitude
#
# ``chans`` is (C, H, W); output is (H, W, 4C) ordered per channel as
# [raw, mean, std, sobel], every value divided by ``denom``.


def pixel_features_np(chans, denom, out):
    c_n, h, w = chans.shape
    inv = 1.0 / denom
    for c in range(c_n):
        img = chans[c]
        p = np.pad(img, 1, mode="edge")
        win = [p[dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)]
        s = win[0].copy()
        for k in range(1, 9):
            s += win[k]
        mean = s / 9.0
        d = win[0] - mean
        ss = d * d
        for k in range(1, 9):
            d = win[k] - mean
            ss += d * d
        # win index = 3*dy + dx
        gx = (win[2] + 2.0 * win[5] + win[8]) - (win[0] + 2.0 * win[3] + win[6])
        gy = (win[6] + 2.0 * win[7] + win[8]) - (win[0] + 2.0 * win[1] + win[2])
        out[..., 4 * c] = img * inv
        out[..., 4 * c + 1] = mean * inv
        out[..., 4 * c + 2] = np.sqrt(ss / 9.0) * inv
        out[..., 4 * c + 3] = np.sqrt(gx * gx + gy * gy) * inv
    return out


@njit(cache=True)
def pixel_features_nb(chans, denom, out):
    c_n, h, w = chans.shape
    inv = 1.0 / denom
    # edge-padded copies of the three rows keep clamps out of the inner loop,
    # and a contiguous per-row buffer lets it vectorise
    up = np.empty(w + 2)
    mid = np.empty(w + 2)
    dn = np.empty(w + 2)
    f = np.empty((4, w))
    for c in range(c_n):
        o = 4 * c
        for i in range(h):
            iu = max(i - 1, 0)
            idn = min(i + 1, h - 1)
            for j in range(w):
                up[j + 1] = chans[c, iu, j]
                mid[j + 1] = chans[c, i, j]
                dn[j + 1] = chans[c, idn, j]
            up[0] = up[1]
            mid[0] = mid[1]
            dn[0] = dn[1]
            up[w + 1] = up[w]
            mid[w + 1] = mid[w]
            dn[w + 1] = dn[w]
            for j in range(w):
                a0 = up[j]
                a1 = up[j + 1]
                a2 = up[j + 2]
                a3 = mid[j]
                a4 = mid[j + 1]
                a5 = mid[j + 2]
                a6 = dn[j]
                a7 = dn[j + 1]
                a8 = dn[j + 2]
                # same summation order as the numpy flavour
                mean = (a0 + a1 + a2 + a3 + a4 + a5 + a6 + a7 + a8) / 9.0
                d0 = a0 - mean
                d1 = a1 - mean
                d2 = a2 - mean
                d3 = a3 - mean
                d4 = a4 - mean
                d5 = a5 - mean
                d6 = a6 - mean
                d7 = a7 - mean
                d8 = a8 - mean
                ss = d0 * d0 + d1 * d1 + d2 * d2 + d3 * d3 + d4 * d4 + d5 * d5 + d6 * d6 + d7 * d7 + d8 * d8
                gx = (a2 + 2.0 * a5 + a8) - (a0 + 2.0 * a3 + a6)
                gy = (a6 + 2.0 * a7 + a8) - (a0 + 2.0 * a1 + a2)
                f[0, j] = a4 * inv
                f[1, j] = mean * inv
                f[2, j] = np.sqrt(ss / 9.0) * inv
                f[3, j] = np.sqrt(gx * gx + gy * gy) * inv
            for j in range(w):
                out[i, j, o] = f[0, j]
                out[i, j, o + 1] = f[1, j]
                out[i, j, o + 2] = f[2, j]
                out[i, j, o + 3] = f[3, j]
    return out


# ---------------------------------------------------------------------------
# rotation about the image centre (inverse mapping, constant fill outside)

_EDGE_TOL = 1e-9


def _rotation_source(h, w, cos_t, sin_t):
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dy = (np.arange(h, dtype=np.float64) - cy)[:, None]
    dx = (np.arange(w, dtype=np.float64) - cx)[None, :]
    sy = cy + (-sin_t * dx + cos_t * dy)
    sx = cx + (cos_t * dx + sin_t * dy)
    return sy, sx


def rotate_np(img, cos_t, sin_t, fill, nearest):
    h, w = img.shape
    sy, sx = _rotation_source(h, w, cos_t, sin_t)
    if nearest:
        iy = np.floor(sy + 0.5).astype(np.int64)
        ix = np.floor(sx + 0.5).astype(np.int64)
        inside = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        return np.where(inside, img[np.clip(iy, 0, h - 1), np.clip(ix, 0, w - 1)], fill)
    inside = (sy >= -_EDGE_TOL) & (sy <= h - 1 + _EDGE_TOL) & (sx >= -_EDGE_TOL) & (sx <= w - 1 + _EDGE_TOL)
    y = np.clip(sy, 0.0, h - 1.0)
    x = np.clip(sx, 0.0, w - 1.0)
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = y - y0
    fx = x - x0
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    return np.where(inside, top * (1.0 - fy) + bot * fy, fill)


@njit(cache=True)
def rotate_nb(img, cos_t, sin_t, fill, nearest):
    h, w = img.shape
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    out = np.empty((h, w))
    for i in range(h):
        dy = i - cy
        for j in range(w):
            dx = j - cx
            yy = cy + (-sin_t * dx + cos_t * dy)
            xx = cx + (cos_t * dx + sin_t * dy)
            if nearest:
                iy = int(np.floor(yy + 0.5))
                ix = int(np.floor(xx + 0.5))
                if iy < 0 or iy >= h or ix < 0 or ix >= w:
                    out[i, j] = fill
                else:
                    out[i, j] = img[iy, ix]
                continue
            if yy < -_EDGE_TOL or yy > h - 1 + _EDGE_TOL or xx < -_EDGE_TOL or xx > w - 1 + _EDGE_TOL:
                out[i, j] = fill
                continue
            y = min(max(yy, 0.0), h - 1.0)
            x = min(max(xx, 0.0), w - 1.0)
            # clamped to >= 0, so truncation is floor
            y0 = int(y)
            x0 = int(x)
            y1 = min(y0 + 1, h - 1)
            x1 = min(x0 + 1, w - 1)
            fy = y - y0
            fx = x - x0
            top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
            bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
            out[i, j] = top * (1.0 - fy) + bot * fy
    return out


# ---------------------------------------------------------------------------
# soft-Dice loss and gradient for per-pixel linear-softmax models
#
# ``x`` is (N, F) pixel features, ``gt`` (N,) labels in {0, 1, 2}.  The loss is
# 1 - mean(Dice_1, Dice_2) with smoothing ``eps``.  The single-head kernels
# return (loss, dW, db); the fusion kernels additionally take the CT/PET
# stream weights and return gradients for all six arrays.


def _softmax_rows(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _dice_dprobs_np(p, gt, eps):
    loss = 1.0
    dp = np.zeros_like(p)
    for c in (1, 2):
        gc = (gt == c).astype(np.float64)
        inter = float(p[:, c] @ gc)
        denom = p[:, c].sum() + gc.sum() + eps
        loss -= 0.5 * (2.0 * inter + eps) / denom
        dp[:, c] = -0.5 * (2.0 * gc / denom - (2.0 * inter + eps) / (denom * denom))
    return loss, dp


def _softmax_back_np(p, dp):
    return p * (dp - (p * dp).sum(axis=1, keepdims=True))


def head_probs_np(x, w, b):
    return _softmax_rows(x @ w.T + b)


def fusion_probs_np(x, w_ct, b_ct, w_pet, b_pet, w_f, b_f):
    k = w_ct.shape[1]
    q = np.concatenate([_softmax_rows(x[:, :k] @ w_ct.T + b_ct), _softmax_rows(x[:, k:] @ w_pet.T + b_pet)], axis=1)
    return _softmax_rows(q @ w_f.T + b_f)


def dice_head_grad_np(x, gt, w, b, eps):
    p = _softmax_rows(x @ w.T + b)
    loss, dp = _dice_dprobs_np(p, gt, eps)
    dz = _softmax_back_np(p, dp)
    return loss, dz.T @ x, dz.sum(axis=0)


def dice_fusion_grad_np(x, gt, w_ct, b_ct, w_pet, b_pet, w_f, b_f, eps):
    k = w_ct.shape[1]
    q = np.concatenate([_softmax_rows(x[:, :k] @ w_ct.T + b_ct), _softmax_rows(x[:, k:] @ w_pet.T + b_pet)], axis=1)
    p = _softmax_rows(q @ w_f.T + b_f)
    loss, dp = _dice_dprobs_np(p, gt, eps)
    dz = _softmax_back_np(p, dp)
    dq = dz @ w_f
    dz_ct = _softmax_back_np(q[:, :3], dq[:, :3])
    dz_pet = _softmax_back_np(q[:, 3:], dq[:, 3:])
    return (loss, dz_ct.T @ x[:, :k], dz_ct.sum(axis=0), dz_pet.T @ x[:, k:], dz_pet.sum(axis=0),
            dz.T @ q, dz.sum(axis=0))


# The exps run through numpy: its SIMD exp is several times faster than the
# scalar libm call a numba loop makes, and exp dominates the forward pass.
# Numba passes write max-shifted logits, numpy exponentiates in place, and the
# next pass normalises.


@njit(cache=True, inline="always")
def _linear3(x, r, off, k, w, b):
    z0 = b[0]
    z1 = b[1]
    z2 = b[2]
    for f in range(k):
        xf = x[r, off + f]
        z0 += w[0, f] * xf
        z1 += w[1, f] * xf
        z2 += w[2, f] * xf
    return z0, z1, z2


@njit(cache=True, inline="always")
def _shift3(z0, z1, z2, e, r, o):
    m = max(z0, max(z1, z2))
    e[r, o] = z0 - m
    e[r, o + 1] = z1 - m
    e[r, o + 2] = z2 - m


@njit(cache=True, inline="always")
def _normalise3(e, r, o):
    s = e[r, o] + e[r, o + 1] + e[r, o + 2]
    e[r, o] /= s
    e[r, o + 1] /= s
    e[r, o + 2] /= s


@njit(cache=True)
def _head_logits_nb(x, w, b, p):
    nf = x.shape[1]
    for r in range(x.shape[0]):
        z0, z1, z2 = _linear3(x, r, 0, nf, w, b)
        _shift3(z0, z1, z2, p, r, 0)


@njit(cache=True)
def _stream_logits_nb(x, w_ct, b_ct, w_pet, b_pet, q):
    k = w_ct.shape[1]
    for r in range(x.shape[0]):
        z0, z1, z2 = _linear3(x, r, 0, k, w_ct, b_ct)
        _shift3(z0, z1, z2, q, r, 0)
        z0, z1, z2 = _linear3(x, r, k, k, w_pet, b_pet)
        _shift3(z0, z1, z2, q, r, 3)


@njit(cache=True)
def _fusion_logits_nb(q, w_f, b_f, p):
    """Normalise both exponentiated streams in ``q``, then fill ``p`` with shifted fusion logits."""
    for r in range(q.shape[0]):
        _normalise3(q, r, 0)
        _normalise3(q, r, 3)
        c0 = q[r, 0]
        c1 = q[r, 1]
        c2 = q[r, 2]
        t0 = q[r, 3]
        t1 = q[r, 4]
        t2 = q[r, 5]
        z0 = b_f[0] + w_f[0, 0] * c0 + w_f[0, 1] * c1 + w_f[0, 2] * c2 + w_f[0, 3] * t0 + w_f[0, 4] * t1 + w_f[0, 5] * t2
        z1 = b_f[1] + w_f[1, 0] * c0 + w_f[1, 1] * c1 + w_f[1, 2] * c2 + w_f[1, 3] * t0 + w_f[1, 4] * t1 + w_f[1, 5] * t2
        z2 = b_f[2] + w_f[2, 0] * c0 + w_f[2, 1] * c1 + w_f[2, 2] * c2 + w_f[2, 3] * t0 + w_f[2, 4] * t1 + w_f[2, 5] * t2
        _shift3(z0, z1, z2, p, r, 0)


@njit(cache=True)
def _normalise_rows_nb(p):
    for r in range(p.shape[0]):
        _normalise3(p, r, 0)


def head_probs_nb(x, w, b):
    p = np.empty((x.shape[0], 3))
    _head_logits_nb(x, w, b, p)
    np.exp(p, out=p)
    _normalise_rows_nb(p)
    return p


def _fusion_forward_nb(x, w_ct, b_ct, w_pet, b_pet, w_f, b_f):
    q = np.empty((x.shape[0], 6))
    p = np.empty((x.shape[0], 3))
    _stream_logits_nb(x, w_ct, b_ct, w_pet, b_pet, q)
    np.exp(q, out=q)
    _fusion_logits_nb(q, w_f, b_f, p)
    np.exp(p, out=p)
    _normalise_rows_nb(p)
    return q, p


def fusion_probs_nb(x, w_ct, b_ct, w_pet, b_pet, w_f, b_f):
    return _fusion_forward_nb(x, w_ct, b_ct, w_pet, b_pet, w_f, b_f)[1]


@njit(cache=True)
def _dice_stats_nb(p, gt, eps):
    n = p.shape[0]
    i1 = 0.0
    i2 = 0.0
    s1 = 0.0
    s2 = 0.0
    g1 = 0.0
    g2 = 0.0
    for r in range(n):
        s1 += p[r, 1]
        s2 += p[r, 2]
        if gt[r] == 1:
            i1 += p[r, 1]
            g1 += 1.0
        elif gt[r] == 2:
            i2 += p[r, 2]
            g2 += 1.0
    d1 = s1 + g1 + eps
    d2 = s2 + g2 + eps
    loss = 1.0 - 0.5 * ((2.0 * i1 + eps) / d1 + (2.0 * i2 + eps) / d2)
    a1 = (2.0 * i1 + eps) / (d1 * d1)
    a2 = (2.0 * i2 + eps) / (d2 * d2)
    return loss, d1, d2, a1, a2


@njit(cache=True, inline="always")
def _dice_dz_nb(p, r, gt_r, d1, d2, a1, a2):
    """Gradient of the loss w.r.t. the logits of row ``r``."""
    dp1 = -0.5 * ((2.0 / d1 if gt_r == 1 else 0.0) - a1)
    dp2 = -0.5 * ((2.0 / d2 if gt_r == 2 else 0.0) - a2)
    s = p[r, 1] * dp1 + p[r, 2] * dp2
    return p[r, 0] * (0.0 - s), p[r, 1] * (dp1 - s), p[r, 2] * (dp2 - s)


@njit(cache=True)
def _head_back_nb(x, gt, p, eps):
    n, nf = x.shape
    loss, d1, d2, a1, a2 = _dice_stats_nb(p, gt, eps)
    dw = np.zeros((3, nf))
    db = np.zeros(3)
    for r in range(n):
        dz0, dz1, dz2 = _dice_dz_nb(p, r, gt[r], d1, d2, a1, a2)
        db[0] += dz0
        db[1] += dz1
        db[2] += dz2
        for f in range(nf):
            xf = x[r, f]
            dw[0, f] += dz0 * xf
            dw[1, f] += dz1 * xf
            dw[2, f] += dz2 * xf
    return loss, dw, db


def dice_head_grad_nb(x, gt, w, b, eps):
    return _head_back_nb(x, gt, head_probs_nb(x, w, b), eps)


@njit(cache=True, inline="always")
def _stream_back_nb(x, r, off, k, q, o, dq, dw, db):
    s = q[r, o] * dq[0] + q[r, o + 1] * dq[1] + q[r, o + 2] * dq[2]
    for c in range(3):
        dz = q[r, o + c] * (dq[c] - s)
        db[c] += dz
        for f in range(k):
            dw[c, f] += dz * x[r, off + f]


@njit(cache=True)
def _fusion_back_nb(x, gt, q, p, w_f, k, eps):
    n = x.shape[0]
    loss, d1, d2, a1, a2 = _dice_stats_nb(p, gt, eps)
    dw_ct = np.zeros((3, k))
    db_ct = np.zeros(3)
    dw_pet = np.zeros((3, k))
    db_pet = np.zeros(3)
    dw_f = np.zeros((3, 6))
    db_f = np.zeros(3)
    dq_ct = np.empty(3)
    dq_pet = np.empty(3)
    for r in range(n):
        dz0, dz1, dz2 = _dice_dz_nb(p, r, gt[r], d1, d2, a1, a2)
        db_f[0] += dz0
        db_f[1] += dz1
        db_f[2] += dz2
        for j in range(6):
            qj = q[r, j]
            dw_f[0, j] += dz0 * qj
            dw_f[1, j] += dz1 * qj
            dw_f[2, j] += dz2 * qj
        for j in range(3):
            dq_ct[j] = dz0 * w_f[0, j] + dz1 * w_f[1, j] + dz2 * w_f[2, j]
            dq_pet[j] = dz0 * w_f[0, 3 + j] + dz1 * w_f[1, 3 + j] + dz2 * w_f[2, 3 + j]
        _stream_back_nb(x, r, 0, k, q, 0, dq_ct, dw_ct, db_ct)
        _stream_back_nb(x, r, k, k, q, 3, dq_pet, dw_pet, db_pet)
    return loss, dw_ct, db_ct, dw_pet, db_pet, dw_f, db_f


def dice_fusion_grad_nb(x, gt, w_ct, b_ct, w_pet, b_pet, w_f, b_f, eps):
    q, p = _fusion_forward_nb(x, w_ct, b_ct, w_pet, b_pet, w_f, b_f)
    return _fusion_back_nb(x, gt, q, p, w_f, w_ct.shape[1], eps)


# ---------------------------------------------------------------------------
# trilinear sampling on a rectilinear grid of source coordinates


def _linear_matrix(coords, n):
    c = np.clip(np.asarray(coords, dtype=np.float64), 0.0, n - 1.0)
    i0 = np.floor(c).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    f = c - i0
    m = np.zeros((c.size, n))
    rows = np.arange(c.size)
    np.add.at(m, (rows, i0), 1.0 - f)
    np.add.at(m, (rows, i1), f)
    return m


def trilinear_np(vol, cx, cy, cz):
    vol = np.asarray(vol, dtype=np.float64)
    nx, ny, nz = vol.shape
    out = np.tensordot(_linear_matrix(cx, nx), vol, axes=(1, 0))
    out = np.tensordot(_linear_matrix(cy, ny), out, axes=(1, 1)).transpose(1, 0, 2)
    out = np.tensordot(out, _linear_matrix(cz, nz), axes=(2, 1))
    return out


@njit(cache=True)
def trilinear_nb(vol, cx, cy, cz):
    nx, ny, nz = vol.shape
    mx, my, mz = cx.size, cy.size, cz.size
    ix0 = np.empty(mx, np.int64)
    ix1 = np.empty(mx, np.int64)
    fx = np.empty(mx)
    for a in range(mx):
        c = min(max(cx[a], 0.0), nx - 1.0)
        ix0[a] = int(np.floor(c))
        ix1[a] = min(ix0[a] + 1, nx - 1)
        fx[a] = c - ix0[a]
    iy0 = np.empty(my, np.int64)
    iy1 = np.empty(my, np.int64)
    fy = np.empty(my)
    for b in range(my):
        c = min(max(cy[b], 0.0), ny - 1.0)
        iy0[b] = int(np.floor(c))
        iy1[b] = min(iy0[b] + 1, ny - 1)
        fy[b] = c - iy0[b]
    iz0 = np.empty(mz, np.int64)
    iz1 = np.empty(mz, np.int64)
    fz = np.empty(mz)
    for k in range(mz):
        c = min(max(cz[k], 0.0), nz - 1.0)
        iz0[k] = int(np.floor(c))
        iz1[k] = min(iz0[k] + 1, nz - 1)
        fz[k] = c - iz0[k]
    out = np.empty((mx, my, mz))
    for a in range(mx):
        x0, x1, wx = ix0[a], ix1[a], fx[a]
        for b in range(my):
            y0, y1, wy = iy0[b], iy1[b], fy[b]
            for k in range(mz):
                z0, z1, wz = iz0[k], iz1[k], fz[k]
                c00 = vol[x0, y0, z0] * (1.0 - wx) + vol[x1, y0, z0] * wx
                c10 = vol[x0, y1, z0] * (1.0 - wx) + vol[x1, y1, z0] * wx
                c01 = vol[x0, y0, z1] * (1.0 - wx) + vol[x1, y0, z1] * wx
                c11 = vol[x0, y1, z1] * (1.0 - wx) + vol[x1, y1, z1] * wx
                c0 = c00 * (1.0 - wy) + c10 * wy
                c1 = c01 * (1.0 - wy) + c11 * wy
                out[a, b, k] = c0 * (1.0 - wz) + c1 * wz
    return out


# ---------------------------------------------------------------------------
# exact greedy split search over one feature
#
# Inputs are the node rows with a present value for the feature, sorted by
# that value.  Candidates sit between consecutive distinct values.  Both
# kernels return (gain, threshold, default_left); gain = -inf means "no
# admissible candidate".


def _midpoint(a, b):
    mid = 0.5 * (a + b)
    if mid >= b:
        mid = a
    return mid


def best_split_sse_np(xs, ys, miss_sum, miss_cnt):
    n = xs.size
    if n < 2:
        return -np.inf, 0.0, True
    csum = np.cumsum(ys)[:-1]
    n_left = np.arange(1, n, dtype=np.float64)
    n_right = n - n_left
    total = csum[-1] + ys[-1]
    miss_left = n_left >= n_right
    sl = csum + np.where(miss_left, miss_sum, 0.0)
    sr = (total - csum) + np.where(miss_left, 0.0, miss_sum)
    nl = n_left + np.where(miss_left, miss_cnt, 0.0)
    nr = n_right + np.where(miss_left, 0.0, miss_cnt)
    all_sum = total + miss_sum
    gains = sl * sl / nl + sr * sr / nr - all_sum * all_sum / (n + miss_cnt)
    valid = xs[:-1] != xs[1:]
    if not valid.any():
        return -np.inf, 0.0, True
    gains = np.where(valid, gains, -np.inf)
    i = int(np.argmax(gains))
    return float(gains[i]), _midpoint(xs[i], xs[i + 1]), bool(miss_left[i])


@njit(cache=True)
def best_split_sse_nb(xs, ys, miss_sum, miss_cnt):
    n = xs.size
    best = -np.inf
    thr = 0.0
    dleft = True
    if n < 2:
        return best, thr, dleft
    total = 0.0
    csum = np.empty(n)
    for i in range(n):
        total += ys[i]
        csum[i] = total
    all_sum = total + miss_sum
    base = all_sum * all_sum / (n + miss_cnt)
    for i in range(n - 1):
        if xs[i] == xs[i + 1]:
            continue
        n_left = i + 1.0
        n_right = n - n_left
        ml = n_left >= n_right
        if ml:
            sl = csum[i] + miss_sum
            sr = total - csum[i]
            nl = n_left + miss_cnt
            nr = n_right
        else:
            sl = csum[i]
            sr = (total - csum[i]) + miss_sum
            nl = n_left
            nr = n_right + miss_cnt
        g = sl * sl / nl + sr * sr / nr - base
        if g > best:
            best = g
            mid = 0.5 * (xs[i] + xs[i + 1])
            if mid >= xs[i + 1]:
                mid = xs[i]
            thr = mid
            dleft = ml
    return best, thr, dleft


def best_split_newton_np(xs, gs, hs, miss_g, miss_h, lam, min_child_weight):
    n = xs.size
    if n < 2:
        return -np.inf, 0.0, True
    gl = np.cumsum(gs)[:-1]
    hl = np.cumsum(hs)[:-1]
    gt = gl[-1] + gs[-1]
    ht = hl[-1] + hs[-1]
    gr = gt - gl
    hr = ht - hl
    g_all = gt + miss_g
    h_all = ht + miss_h
    parent = g_all * g_all / (h_all + lam)
    # missing rows sent left
    gl_a, hl_a = gl + miss_g, hl + miss_h
    gain_l = 0.5 * (gl_a * gl_a / (hl_a + lam) + gr * gr / (hr + lam) - parent)
    ok_l = (hl_a >= min_child_weight) & (hr >= min_child_weight)
    # missing rows sent right
    gr_b, hr_b = gr + miss_g, hr + miss_h
    gain_r = 0.5 * (gl * gl / (hl + lam) + gr_b * gr_b / (hr_b + lam) - parent)
    ok_r = (hl >= min_child_weight) & (hr_b >= min_child_weight)
    valid = xs[:-1] != xs[1:]
    gain_l = np.where(valid & ok_l, gain_l, -np.inf)
    gain_r = np.where(valid & ok_r, gain_r, -np.inf)
    left_wins = gain_l >= gain_r
    gains = np.where(left_wins, gain_l, gain_r)
    i = int(np.argmax(gains))
    if gains[i] == -np.inf:
        return -np.inf, 0.0, True
    return float(gains[i]), _midpoint(xs[i], xs[i + 1]), bool(left_wins[i])


@njit(cache=True)
def best_split_newton_nb(xs, gs, hs, miss_g, miss_h, lam, min_child_weight):
    n = xs.size
    best = -np.inf
    thr = 0.0
    dleft = True
    if n < 2:
        return best, thr, dleft
    cg = np.empty(n)
    ch = np.empty(n)
    sg = 0.0
    sh = 0.0
    for i in range(n):
        sg += gs[i]
        sh += hs[i]
        cg[i] = sg
        ch[i] = sh
    gt = sg
    ht = sh
    g_all = gt + miss_g
    h_all = ht + miss_h
    parent = g_all * g_all / (h_all + lam)
    for i in range(n - 1):
        if xs[i] == xs[i + 1]:
            continue
        gl = cg[i]
        hl = ch[i]
        gr = gt - gl
        hr = ht - hl
        gl_a = gl + miss_g
        hl_a = hl + miss_h
        g_l = -np.inf
        if hl_a >= min_child_weight and hr >= min_child_weight:
            g_l = 0.5 * (gl_a * gl_a / (hl_a + lam) + gr * gr / (hr + lam) - parent)
        gr_b = gr + miss_g
        hr_b = hr + miss_h
        g_r = -np.inf
        if hl >= min_child_weight and hr_b >= min_child_weight:
            g_r = 0.5 * (gl * gl / (hl + lam) + gr_b * gr_b / (hr_b + lam) - parent)
        if g_l >= g_r:
            g = g_l
            ml = True
        else:
            g = g_r
            ml = False
        if g > best:
            best = g
            mid = 0.5 * (xs[i] + xs[i + 1])
            if mid >= xs[i + 1]:
                mid = xs[i]
            thr = mid
            dleft = ml
    return best, thr, dleft


# ---------------------------------------------------------------------------
# tree traversal; NaN features follow the node's default direction


def tree_predict_np(feature, threshold, default_left, left, right, value, x):
    node = np.zeros(x.shape[0], dtype=np.int64)
    rows = np.arange(x.shape[0])
    active = feature[node] >= 0
    while active.any():
        r = rows[active]
        nd = node[r]
        v = x[r, feature[nd]]
        go_left = np.where(np.isnan(v), default_left[nd], v <= threshold[nd])
        node[r] = np.where(go_left, left[nd], right[nd])
        active = feature[node] >= 0
    return value[node]


@njit(cache=True)
def tree_predict_nb(feature, threshold, default_left, left, right, value, x):
    n = x.shape[0]
    out = np.empty(n)
    for r in range(n):
        nd = 0
        while feature[nd] >= 0:
            v = x[r, feature[nd]]
            if np.isnan(v):
                go_left = default_left[nd]
            else:
                go_left = v <= threshold[nd]
            nd = left[nd] if go_left else right[nd]
        out[r] = value[nd]
    return out


# ---------------------------------------------------------------------------
# concordance pair counting


def concordance_counts_np(scores, times, events):
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events, dtype=np.float64)
    comparable = (t[:, None] < t[None, :]) & (e[:, None] == 1.0)
    conc = comparable & (s[:, None] < s[None, :])
    ties = comparable & (s[:, None] == s[None, :])
    return int(conc.sum()), int(ties.sum()), int(comparable.sum())


@njit(cache=True)
def concordance_counts_nb(scores, times, events):
    n = scores.size
    conc = 0
    ties = 0
    comp = 0
    for i in range(n):
        if events[i] != 1.0:
            continue
        for j in range(n):
            if times[i] < times[j]:
                comp += 1
                if scores[i] < scores[j]:
                    conc += 1
                elif scores[i] == scores[j]:
                    ties += 1
    return conc, ties, comp


# ---------------------------------------------------------------------------
# path-dependent TreeSHAP
#
# The unique path of a node lives at buf[off:off + ud + 1]; a child copies its
# parent's path to the next free offset, so an explicit stack (hot child on
# top) replaces recursion and the numba build needs no recursive types.


def _build_tree_shap(jit):
    @jit
    def extend(zf, of, fd, pw, off, ud, pz, po, pi):
        zf[off + ud] = pz
        of[off + ud] = po
        fd[off + ud] = pi
        pw[off + ud] = 1.0 if ud == 0 else 0.0
        for i in range(ud - 1, -1, -1):
            pw[off + i + 1] += po * pw[off + i] * (i + 1) / (ud + 1)
            pw[off + i] = pz * pw[off + i] * (ud - i) / (ud + 1)

    @jit
    def unwind(zf, of, fd, pw, off, ud, idx):
        o = of[off + idx]
        z = zf[off + idx]
        nxt = pw[off + ud]
        for i in range(ud - 1, -1, -1):
            if o != 0.0:
                tmp = pw[off + i]
                pw[off + i] = nxt * (ud + 1) / ((i + 1) * o)
                nxt = tmp - pw[off + i] * z * (ud - i) / (ud + 1)
            else:
                pw[off + i] = pw[off + i] * (ud + 1) / (z * (ud - i))
        for i in range(idx, ud):
            fd[off + i] = fd[off + i + 1]
            zf[off + i] = zf[off + i + 1]
            of[off + i] = of[off + i + 1]

    @jit
    def unwound_sum(zf, of, pw, off, ud, idx):
        o = of[off + idx]
        z = zf[off + idx]
        nxt = pw[off + ud]
        total = 0.0
        if o != 0.0:
            for i in range(ud - 1, -1, -1):
                tmp = nxt / ((i + 1) * o)
                total += tmp
                nxt = pw[off + i] - tmp * z * (ud - i)
        else:
            for i in range(ud - 1, -1, -1):
                total += pw[off + i] / (z * (ud - i))
        return total * (ud + 1)

    @jit
    def tree_shap(feature, threshold, default_left, left, right, value, cover, depth, x, phi):
        n_buf = (depth + 2) * (depth + 3)
        zf = np.zeros(n_buf)
        of = np.zeros(n_buf)
        fd = np.zeros(n_buf, dtype=np.int64)
        pw = np.zeros(n_buf)
        n_stack = 2 * depth + 4
        s_node = np.zeros(n_stack, dtype=np.int64)
        s_ud = np.zeros(n_stack, dtype=np.int64)
        s_poff = np.zeros(n_stack, dtype=np.int64)
        s_pz = np.zeros(n_stack)
        s_po = np.zeros(n_stack)
        s_pi = np.zeros(n_stack, dtype=np.int64)
        for r in range(x.shape[0]):
            top = 0
            s_node[0] = 0
            s_ud[0] = 0
            s_poff[0] = 0
            s_pz[0] = 1.0
            s_po[0] = 1.0
            s_pi[0] = -1
            while top >= 0:
                node = s_node[top]
                ud = s_ud[top]
                poff = s_poff[top]
                pz = s_pz[top]
                po = s_po[top]
                pi = s_pi[top]
                top -= 1
                off = poff + ud
                if ud > 0:
                    for i in range(ud):
                        zf[off + i] = zf[poff + i]
                        of[off + i] = of[poff + i]
                        fd[off + i] = fd[poff + i]
                        pw[off + i] = pw[poff + i]
                extend(zf, of, fd, pw, off, ud, pz, po, pi)
                f = feature[node]
                if f < 0:
                    for i in range(1, ud + 1):
                        w = unwound_sum(zf, of, pw, off, ud, i)
                        phi[r, fd[off + i]] += w * (of[off + i] - zf[off + i]) * value[node]
                    continue
                v = x[r, f]
                if np.isnan(v):
                    go_left = default_left[node]
                else:
                    go_left = v <= threshold[node]
                hot = left[node] if go_left else right[node]
                cold = right[node] if go_left else left[node]
                iz = 1.0
                io = 1.0
                k = 1
                while k <= ud:
                    if fd[off + k] == f:
                        break
                    k += 1
                if k <= ud:
                    iz = zf[off + k]
                    io = of[off + k]
                    unwind(zf, of, fd, pw, off, ud, k)
                    ud -= 1
                c = cover[node]
                # cold first so the hot subtree is finished before it is read
                top += 1
                s_node[top] = cold
                s_ud[top] = ud + 1
                s_poff[top] = off
                s_pz[top] = iz * cover[cold] / c
                s_po[top] = 0.0
                s_pi[top] = f
                top += 1
                s_node[top] = hot
                s_ud[top] = ud + 1
                s_poff[top] = off
                s_pz[top] = iz * cover[hot] / c
                s_po[top] = io
                s_pi[top] = f
        return phi

    return tree_shap


tree_shap_np = _build_tree_shap(lambda f: f)
tree_shap_nb = _build_tree_shap(njit) if HAVE_NUMBA else None


# ---------------------------------------------------------------------------

numpy_kernels = SimpleNamespace(
    pixel_features=pixel_features_np,
    rotate=rotate_np,
    dice_head_grad=dice_head_grad_np,
    dice_fusion_grad=dice_fusion_grad_np,
    head_probs=head_probs_np,
    fusion_probs=fusion_probs_np,
    trilinear=trilinear_np,
    best_split_sse=best_split_sse_np,
    best_split_newton=best_split_newton_np,
    concordance_counts=concordance_counts_np,
    tree_predict=tree_predict_np,
    tree_shap=tree_shap_np,
)

if HAVE_NUMBA:
    numba_kernels = SimpleNamespace(
        pixel_features=pixel_features_nb,
        rotate=rotate_nb,
        dice_head_grad=dice_head_grad_nb,
        dice_fusion_grad=dice_fusion_grad_nb,
        head_probs=head_probs_nb,
        fusion_probs=fusion_probs_nb,
        trilinear=trilinear_nb,
        best_split_sse=best_split_sse_nb,
        best_split_newton=best_split_newton_nb,
        concordance_counts=concordance_counts_nb,
        tree_predict=tree_predict_nb,
        tree_shap=tree_shap_nb,
    )
    active = numba_kernels
else:
    numba_kernels = None
    active = numpy_kernels


def pixel_features(chans, denom=255.0, out=None):
    """(C, H, W) or (H, W) image -> (H, W, 4C) features; ``out`` may be a preallocated buffer."""
    chans = np.asarray(chans, dtype=np.float64)
    if chans.ndim == 2:
        chans = chans[None]
    c_n, h, w = chans.shape
    if out is None:
        out = np.empty((h, w, 4 * c_n))
    elif out.shape != (h, w, 4 * c_n) or not out.flags.c_contiguous:
        raise ValueError(f"out must be a contiguous {(h, w, 4 * c_n)} array")
    return active.pixel_features(np.ascontiguousarray(chans), float(denom), out)


def rotate(img, angle_deg, fill=0.0, nearest=False):
    th = np.deg2rad(angle_deg)
    out = active.rotate(np.ascontiguousarray(img, dtype=np.float64), float(np.cos(th)), float(np.sin(th)), float(fill), bool(nearest))
    return np.asarray(out)


def dice_head_grad(x, gt, w, b, eps):
    loss, dw, db = active.dice_head_grad(
        np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(gt, dtype=np.int64),
        np.ascontiguousarray(w, dtype=np.float64), np.ascontiguousarray(b, dtype=np.float64), float(eps),
    )
    return float(loss), dw, db


def dice_fusion_grad(x, gt, w_ct, b_ct, w_pet, b_pet, w_f, b_f, eps):
    c = lambda a: np.ascontiguousarray(a, dtype=np.float64)  # noqa: E731
    out = active.dice_fusion_grad(
        c(x), np.ascontiguousarray(gt, dtype=np.int64), c(w_ct), c(b_ct), c(w_pet), c(b_pet), c(w_f), c(b_f), float(eps),
    )
    return (float(out[0]),) + tuple(out[1:])


def head_probs(x, w, b):
    c = lambda a: np.ascontiguousarray(a, dtype=np.float64)  # noqa: E731
    return active.head_probs(c(x), c(w), c(b))


def fusion_probs(x, w_ct, b_ct, w_pet, b_pet, w_f, b_f):
    c = lambda a: np.ascontiguousarray(a, dtype=np.float64)  # noqa: E731
    return active.fusion_probs(c(x), c(w_ct), c(b_ct), c(w_pet), c(b_pet), c(w_f), c(b_f))


def trilinear(vol, cx, cy, cz):
    return active.trilinear(
        np.ascontiguousarray(vol, dtype=np.float64),
        np.ascontiguousarray(cx, dtype=np.float64),
        np.ascontiguousarray(cy, dtype=np.float64),
        np.ascontiguousarray(cz, dtype=np.float64),
    )


def best_split_sse(xs, ys, miss_sum=0.0, miss_cnt=0.0):
    g, t, d = active.best_split_sse(xs, ys, float(miss_sum), float(miss_cnt))
    return float(g), float(t), bool(d)


def best_split_newton(xs, gs, hs, miss_g, miss_h, lam, min_child_weight):
    g, t, d = active.best_split_newton(xs, gs, hs, float(miss_g), float(miss_h), float(lam), float(min_child_weight))
    return float(g), float(t), bool(d)


def concordance_counts(scores, times, events):
    c, t, n = active.concordance_counts(
        np.ascontiguousarray(scores, dtype=np.float64),
        np.ascontiguousarray(times, dtype=np.float64),
        np.ascontiguousarray(events, dtype=np.float64),
    )
    return int(c), int(t), int(n)


def tree_predict(feature, threshold, default_left, left, right, value, x):
    return active.tree_predict(feature, threshold, default_left, left, right, value, np.ascontiguousarray(x, dtype=np.float64))


def tree_shap(feature, threshold, default_left, left, right, value, cover, depth, x, phi):
    """Add one tree's path-dependent SHAP values for every row of ``x`` into ``phi``."""
    return active.tree_shap(
        feature, threshold, default_left, left, right, value, cover, int(depth),
        np.ascontiguousarray(x, dtype=np.float64), phi,
    )
