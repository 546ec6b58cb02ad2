"""numba kernels behind hashgrid.py. Positions arrive in unit-cube coordinates.

Loops run level-outer so each level's table stays hot in cache while the
points stream through. All accumulation is serial and in point order.
"""

import numba
import numpy as np

PRIME_Y = 2654435761
PRIME_Z = 805459861

_jit = numba.njit(cache=True, fastmath=True)


@numba.njit(cache=True, inline="always")
def _locate(u, n):
    # clamp into [0, 1]; the far face belongs to cell n-1
    p = min(max(u, 0.0), 1.0) * n
    c = min(int(p), n - 1)
    return c, p - c


@numba.njit(cache=True, inline="always")
def _row(cx, cy, cz, side, mask, dense):
    if dense:
        return cx + side * (cy + side * cz)
    # only the low log2(size) bits survive the mask, so 64-bit products are fine
    return (cx ^ (cy * PRIME_Y) ^ (cz * PRIME_Z)) & mask


@_jit
def encode_fwd(u, table, res, offsets, sizes, dense, d, out):
    S = u.shape[0]
    acc = np.zeros(d)
    for l in range(res.shape[0]):
        n = res[l]
        base = offsets[l]
        side = n + 1
        mask = sizes[l] - 1
        dn = dense[l]
        for s in range(S):
            c0, f0 = _locate(u[s, 0], n)
            c1, f1 = _locate(u[s, 1], n)
            c2, f2 = _locate(u[s, 2], n)
            for j in range(d):
                acc[j] = 0.0
            for corner in range(8):
                b0 = corner & 1
                b1 = (corner >> 1) & 1
                b2 = corner >> 2
                w = (f0 if b0 else 1.0 - f0) * (f1 if b1 else 1.0 - f1) * (f2 if b2 else 1.0 - f2)
                idx = base + _row(c0 + b0, c1 + b1, c2 + b2, side, mask, dn)
                for j in range(d):
                    acc[j] += w * table[idx, j]
            for j in range(d):
                out[s, l * d + j] = acc[j]


@_jit
def encode_bwd(u, grad, res, offsets, sizes, dense, d, gtable):
    S = u.shape[0]
    for l in range(res.shape[0]):
        n = res[l]
        base = offsets[l]
        side = n + 1
        mask = sizes[l] - 1
        dn = dense[l]
        for s in range(S):
            c0, f0 = _locate(u[s, 0], n)
            c1, f1 = _locate(u[s, 1], n)
            c2, f2 = _locate(u[s, 2], n)
            for corner in range(8):
                b0 = corner & 1
                b1 = (corner >> 1) & 1
                b2 = corner >> 2
                w = (f0 if b0 else 1.0 - f0) * (f1 if b1 else 1.0 - f1) * (f2 if b2 else 1.0 - f2)
                idx = base + _row(c0 + b0, c1 + b1, c2 + b2, side, mask, dn)
                for j in range(d):
                    gtable[idx, j] += w * grad[s, l * d + j]


@_jit
def encode_jac(u, table, res, offsets, sizes, dense, d, out, jac):
    """Features plus d(features)/du, shape (S, L*d, 3). Zero along axes clamped from outside."""
    S = u.shape[0]
    for l in range(res.shape[0]):
        n = res[l]
        base = offsets[l]
        side = n + 1
        mask = sizes[l] - 1
        dn = dense[l]
        for s in range(S):
            in0 = 1.0 if 0.0 <= u[s, 0] <= 1.0 else 0.0
            in1 = 1.0 if 0.0 <= u[s, 1] <= 1.0 else 0.0
            in2 = 1.0 if 0.0 <= u[s, 2] <= 1.0 else 0.0
            c0, f0 = _locate(u[s, 0], n)
            c1, f1 = _locate(u[s, 1], n)
            c2, f2 = _locate(u[s, 2], n)
            for j in range(d):
                k = l * d + j
                out[s, k] = 0.0
                jac[s, k, 0] = 0.0
                jac[s, k, 1] = 0.0
                jac[s, k, 2] = 0.0
            for corner in range(8):
                b0 = corner & 1
                b1 = (corner >> 1) & 1
                b2 = corner >> 2
                w0 = f0 if b0 else 1.0 - f0
                w1 = f1 if b1 else 1.0 - f1
                w2 = f2 if b2 else 1.0 - f2
                s0 = 1.0 if b0 else -1.0
                s1 = 1.0 if b1 else -1.0
                s2 = 1.0 if b2 else -1.0
                w = w0 * w1 * w2
                dw0 = in0 * s0 * w1 * w2 * n
                dw1 = in1 * w0 * s1 * w2 * n
                dw2 = in2 * w0 * w1 * s2 * n
                idx = base + _row(c0 + b0, c1 + b1, c2 + b2, side, mask, dn)
                for j in range(d):
                    k = l * d + j
                    t = table[idx, j]
                    out[s, k] += w * t
                    jac[s, k, 0] += dw0 * t
                    jac[s, k, 1] += dw1 * t
                    jac[s, k, 2] += dw2 * t


@_jit
def encode_bwd_directional(u, v, grad, res, offsets, sizes, dense, d, gtable):
    """Scatter grad weighted by the derivative of each corner weight along v (unit-cube units).

    This is the table gradient of <grad, J(u) v> where J = d(features)/du.
    """
    S = u.shape[0]
    for l in range(res.shape[0]):
        n = res[l]
        base = offsets[l]
        side = n + 1
        mask = sizes[l] - 1
        dn = dense[l]
        for s in range(S):
            v0 = v[s, 0] if 0.0 <= u[s, 0] <= 1.0 else 0.0
            v1 = v[s, 1] if 0.0 <= u[s, 1] <= 1.0 else 0.0
            v2 = v[s, 2] if 0.0 <= u[s, 2] <= 1.0 else 0.0
            c0, f0 = _locate(u[s, 0], n)
            c1, f1 = _locate(u[s, 1], n)
            c2, f2 = _locate(u[s, 2], n)
            for corner in range(8):
                b0 = corner & 1
                b1 = (corner >> 1) & 1
                b2 = corner >> 2
                w0 = f0 if b0 else 1.0 - f0
                w1 = f1 if b1 else 1.0 - f1
                w2 = f2 if b2 else 1.0 - f2
                s0 = 1.0 if b0 else -1.0
                s1 = 1.0 if b1 else -1.0
                s2 = 1.0 if b2 else -1.0
                dw = n * (v0 * s0 * w1 * w2 + v1 * w0 * s1 * w2 + v2 * w0 * w1 * s2)
                idx = base + _row(c0 + b0, c1 + b1, c2 + b2, side, mask, dn)
                for j in range(d):
                    gtable[idx, j] += dw * grad[s, l * d + j]


@_jit
def corner_lookup(u, res, offsets, sizes, dense, idx_out, w_out):
    """Global table rows and trilinear weights of the 8 corners per level."""
    S = u.shape[0]
    for l in range(res.shape[0]):
        n = res[l]
        side = n + 1
        mask = sizes[l] - 1
        dn = dense[l]
        for s in range(S):
            c0, f0 = _locate(u[s, 0], n)
            c1, f1 = _locate(u[s, 1], n)
            c2, f2 = _locate(u[s, 2], n)
            for corner in range(8):
                b0 = corner & 1
                b1 = (corner >> 1) & 1
                b2 = corner >> 2
                w_out[s, l, corner] = (
                    (f0 if b0 else 1.0 - f0) * (f1 if b1 else 1.0 - f1) * (f2 if b2 else 1.0 - f2)
                )
                idx_out[s, l, corner] = offsets[l] + _row(c0 + b0, c1 + b1, c2 + b2, side, mask, dn)


# d == 2 specializations: scalar accumulators keep everything in registers


@_jit
def encode_fwd_d2(u, table, res, offsets, sizes, dense, out):
    S = u.shape[0]
    for l in range(res.shape[0]):
        n = res[l]
        base = offsets[l]
        side = n + 1
        mask = sizes[l] - 1
        dn = dense[l]
        for s in range(S):
            c0, f0 = _locate(u[s, 0], n)
            c1, f1 = _locate(u[s, 1], n)
            c2, f2 = _locate(u[s, 2], n)
            a0 = 0.0
            a1 = 0.0
            for corner in range(8):
                b0 = corner & 1
                b1 = (corner >> 1) & 1
                b2 = corner >> 2
                w = (f0 if b0 else 1.0 - f0) * (f1 if b1 else 1.0 - f1) * (f2 if b2 else 1.0 - f2)
                idx = base + _row(c0 + b0, c1 + b1, c2 + b2, side, mask, dn)
                a0 += w * table[idx, 0]
                a1 += w * table[idx, 1]
            out[s, 2 * l] = a0
            out[s, 2 * l + 1] = a1


@_jit
def encode_bwd_d2(u, grad, res, offsets, sizes, dense, gtable):
    S = u.shape[0]
    for l in range(res.shape[0]):
        n = res[l]
        base = offsets[l]
        side = n + 1
        mask = sizes[l] - 1
        dn = dense[l]
        for s in range(S):
            c0, f0 = _locate(u[s, 0], n)
            c1, f1 = _locate(u[s, 1], n)
            c2, f2 = _locate(u[s, 2], n)
            g0 = grad[s, 2 * l]
            g1 = grad[s, 2 * l + 1]
            if g0 == 0.0 and g1 == 0.0:
                continue
            for corner in range(8):
                b0 = corner & 1
                b1 = (corner >> 1) & 1
                b2 = corner >> 2
                w = (f0 if b0 else 1.0 - f0) * (f1 if b1 else 1.0 - f1) * (f2 if b2 else 1.0 - f2)
                idx = base + _row(c0 + b0, c1 + b1, c2 + b2, side, mask, dn)
                gtable[idx, 0] += w * g0
                gtable[idx, 1] += w * g1


@_jit
def encode_jac_d2(u, table, res, offsets, sizes, dense, out, jac):
    S = u.shape[0]
    for l in range(res.shape[0]):
        n = res[l]
        base = offsets[l]
        side = n + 1
        mask = sizes[l] - 1
        dn = dense[l]
        for s in range(S):
            in0 = 1.0 if 0.0 <= u[s, 0] <= 1.0 else 0.0
            in1 = 1.0 if 0.0 <= u[s, 1] <= 1.0 else 0.0
            in2 = 1.0 if 0.0 <= u[s, 2] <= 1.0 else 0.0
            c0, f0 = _locate(u[s, 0], n)
            c1, f1 = _locate(u[s, 1], n)
            c2, f2 = _locate(u[s, 2], n)
            a0 = 0.0
            a1 = 0.0
            j00 = 0.0
            j01 = 0.0
            j02 = 0.0
            j10 = 0.0
            j11 = 0.0
            j12 = 0.0
            for corner in range(8):
                b0 = corner & 1
                b1 = (corner >> 1) & 1
                b2 = corner >> 2
                w0 = f0 if b0 else 1.0 - f0
                w1 = f1 if b1 else 1.0 - f1
                w2 = f2 if b2 else 1.0 - f2
                s0 = 1.0 if b0 else -1.0
                s1 = 1.0 if b1 else -1.0
                s2 = 1.0 if b2 else -1.0
                w = w0 * w1 * w2
                dw0 = in0 * s0 * w1 * w2 * n
                dw1 = in1 * w0 * s1 * w2 * n
                dw2 = in2 * w0 * w1 * s2 * n
                idx = base + _row(c0 + b0, c1 + b1, c2 + b2, side, mask, dn)
                t0 = table[idx, 0]
                t1 = table[idx, 1]
                a0 += w * t0
                a1 += w * t1
                j00 += dw0 * t0
                j01 += dw1 * t0
                j02 += dw2 * t0
                j10 += dw0 * t1
                j11 += dw1 * t1
                j12 += dw2 * t1
            out[s, 2 * l] = a0
            out[s, 2 * l + 1] = a1
            jac[s, 2 * l, 0] = j00
            jac[s, 2 * l, 1] = j01
            jac[s, 2 * l, 2] = j02
            jac[s, 2 * l + 1, 0] = j10
            jac[s, 2 * l + 1, 1] = j11
            jac[s, 2 * l + 1, 2] = j12
