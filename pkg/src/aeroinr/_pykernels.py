"""Pure-numpy fallbacks for the compiled kernels in ``_ckernels``.

Same contracts: per-point results never depend on which other points share
the call. Matrix products are therefore formed as broadcast multiplies with
contiguous last-axis reductions instead of BLAS calls, whose blocking can
change with batch shape.
"""
from __future__ import annotations

import numpy as np

_CHUNK = 256


def _rowdot(h: np.ndarray, Wt: np.ndarray) -> np.ndarray:
    # h (N, K), Wt (J, K) -> (N, J), one fixed reduction per row
    return (h[:, None, :] * Wt[None, :, :]).sum(axis=-1)


def _encode(x, B, identity):
    n = B.shape[0]
    if identity:
        out = np.zeros((x.shape[0], 2 * n))
        out[:, : x.shape[1]] = x
        return out
    proj = 2.0 * np.pi * _rowdot(x, B)
    return np.concatenate([np.sin(proj), np.cos(proj)], axis=1)


def field_forward(x, B, identity, Ws, bs, phi, W_out, b_out):
    x = np.ascontiguousarray(x, dtype=np.float64)
    N = x.shape[0]
    du = W_out.shape[1]
    h_last = Ws[-1].shape[1]
    WsT = [np.ascontiguousarray(W.T) for W in Ws]
    WoT = np.ascontiguousarray(W_out.T)
    out = np.empty((N, du))
    for lo in range(0, N, _CHUNK):
        xc = x[lo: lo + _CHUNK]
        acc = np.zeros((xc.shape[0], du))
        for s in range(B.shape[0]):
            h = _encode(xc, B[s], bool(identity[s]))
            for l, WT in enumerate(WsT):
                h = np.maximum(_rowdot(h, WT) + bs[l] + phi[l, : WT.shape[0]], 0.0)
            acc = acc + _rowdot(h, WoT[:, s * h_last:(s + 1) * h_last])
        out[lo: lo + _CHUNK] = acc + b_out
    return out


def _closest_points(p, a, b, c):
    """Closest point on triangles (a, b, c) to points p; all (..., 3)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4
    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = d1 / (d1 - d3)
        w_ac = d2 / (d2 - d6)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
    conds = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
    ]
    choices = [
        a,
        b,
        a + v_ab[..., None] * ab,
        c,
        a + w_ac[..., None] * ac,
        b + w_bc[..., None] * (c - b),
    ]
    interior = a + ab * (vb * denom)[..., None] + ac * (vc * denom)[..., None]
    out = interior
    for cond, choice in zip(reversed(conds), reversed(choices)):
        out = np.where(cond[..., None], choice, out)
    return out


def closest_sqdist(points, tris):
    points = np.ascontiguousarray(points, dtype=np.float64)
    tris = np.ascontiguousarray(tris, dtype=np.float64)
    a, b, c = tris[None, :, 0], tris[None, :, 1], tris[None, :, 2]
    step = max(1, 2_000_000 // max(len(tris), 1))
    d_out = np.empty(len(points))
    i_out = np.empty(len(points), dtype=np.int64)
    for lo in range(0, len(points), step):
        p = points[lo: lo + step, None, :]
        q = _closest_points(p, a, b, c)
        d2 = ((p - q) ** 2).sum(-1)
        k = d2.argmin(axis=1)
        i_out[lo: lo + step] = k
        d_out[lo: lo + step] = d2[np.arange(len(k)), k]
    return d_out, i_out


def winding_number(points, tris):
    points = np.ascontiguousarray(points, dtype=np.float64)
    tris = np.ascontiguousarray(tris, dtype=np.float64)
    step = max(1, 2_000_000 // max(len(tris), 1))
    out = np.empty(len(points))
    for lo in range(0, len(points), step):
        p = points[lo: lo + step, None, :]
        a = tris[None, :, 0] - p
        b = tris[None, :, 1] - p
        c = tris[None, :, 2] - p
        la = np.sqrt((a * a).sum(-1))
        lb = np.sqrt((b * b).sum(-1))
        lc = np.sqrt((c * c).sum(-1))
        det = (a * np.cross(b, c)).sum(-1)
        div = la * lb * lc + (a * b).sum(-1) * lc + (b * c).sum(-1) * la + (c * a).sum(-1) * lb
        out[lo: lo + step] = np.arctan2(det, div).sum(axis=1) / (2.0 * np.pi)
    return out
