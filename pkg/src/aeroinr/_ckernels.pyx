# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: modulated-field inference and triangle-mesh queries.

Every per-point result depends only on that point's inputs, with a fixed
accumulation order, so outputs are bitwise independent of batch size and
point order.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, sqrt, atan2, M_PI

cnp.import_array()


cdef void _encode(const double[:, ::1] x, const double[:, ::1] B, bint identity,
                  double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t N = x.shape[0], d = x.shape[1], n = B.shape[0]
    cdef Py_ssize_t p, j, k
    cdef double acc
    for p in range(N):
        if identity:
            for j in range(2 * n):
                out[p, j] = x[p, j] if j < d else 0.0
            continue
        for j in range(n):
            acc = 0.0
            for k in range(d):
                acc = acc + x[p, k] * B[j, k]
            acc = 2.0 * M_PI * acc
            out[p, j] = sin(acc)
            out[p, n + j] = cos(acc)


cdef void _dense_relu(const double[:, ::1] h, const double[:, ::1] W, const double[::1] b,
                      const double[::1] phi, double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t N = h.shape[0], K = W.shape[0], J = W.shape[1]
    cdef Py_ssize_t p, j, k
    cdef double acc
    for p in range(N):
        for j in range(J):
            acc = 0.0
            for k in range(K):
                acc = acc + h[p, k] * W[k, j]
            acc = acc + b[j] + phi[j]
            out[p, j] = acc if acc > 0.0 else 0.0


cdef void _accumulate_out(const double[:, ::1] h, const double[:, ::1] W, Py_ssize_t row0,
                          double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t N = h.shape[0], K = h.shape[1], J = out.shape[1]
    cdef Py_ssize_t p, j, k
    cdef double acc
    for p in range(N):
        for j in range(J):
            acc = out[p, j]
            for k in range(K):
                acc = acc + h[p, k] * W[row0 + k, j]
            out[p, j] = acc


def field_forward(x, B, identity, Ws, bs, phi, W_out, b_out):
    """Shift-modulated multiscale MLP evaluated at every row of ``x``.

    ``B`` is (M, n, d); ``Ws``/``bs`` are the shared hidden layers;
    ``phi`` is (L, h) and ``W_out`` is (M*h, d_u).
    """
    cdef const double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t N = xv.shape[0]
    cdef Py_ssize_t M = B.shape[0]
    cdef Py_ssize_t L = len(Ws)
    cdef Py_ssize_t du = W_out.shape[1]
    cdef Py_ssize_t s, l, p, j, h_last
    out_arr = np.zeros((N, du))
    cdef double[:, ::1] out = out_arr
    cdef const double[:, ::1] Wo = np.ascontiguousarray(W_out, dtype=np.float64)
    cdef const double[::1] bo = np.ascontiguousarray(b_out, dtype=np.float64)
    cdef double[:, ::1] cur
    cdef double[:, ::1] nxt
    cdef const double[:, ::1] Wl
    cdef const double[::1] bl
    cdef const double[::1] pl
    Bc = np.ascontiguousarray(B, dtype=np.float64)
    phic = np.ascontiguousarray(phi, dtype=np.float64)
    h_last = Ws[L - 1].shape[1]
    for s in range(M):
        cur = np.empty((N, 2 * Bc.shape[1]))
        _encode(xv, Bc[s], bool(identity[s]), cur)
        for l in range(L):
            Wl = np.ascontiguousarray(Ws[l], dtype=np.float64)
            bl = np.ascontiguousarray(bs[l], dtype=np.float64)
            pl = phic[l]
            nxt = np.empty((N, Wl.shape[1]))
            _dense_relu(cur, Wl, bl, pl, nxt)
            cur = nxt
        _accumulate_out(cur, Wo, s * h_last, out)
    for p in range(N):
        for j in range(du):
            out[p, j] = out[p, j] + bo[j]
    return out_arr


cdef inline double _dot(double ax, double ay, double az, double bx, double by, double bz) noexcept nogil:
    return ax * bx + ay * by + az * bz


cdef double _tri_sqdist(double px, double py, double pz,
                        double ax, double ay, double az,
                        double bx, double by, double bz,
                        double cx, double cy, double cz) noexcept nogil:
    # closest point on triangle by Voronoi-region classification
    cdef double abx = bx - ax, aby = by - ay, abz = bz - az
    cdef double acx = cx - ax, acy = cy - ay, acz = cz - az
    cdef double apx = px - ax, apy = py - ay, apz = pz - az
    cdef double d1 = _dot(abx, aby, abz, apx, apy, apz)
    cdef double d2 = _dot(acx, acy, acz, apx, apy, apz)
    cdef double qx, qy, qz, v, w, denom
    cdef double bpx, bpy, bpz, d3, d4, vc, cpx, cpy, cpz, d5, d6, vb, va
    if d1 <= 0.0 and d2 <= 0.0:
        qx, qy, qz = ax, ay, az
    else:
        bpx = px - bx; bpy = py - by; bpz = pz - bz
        d3 = _dot(abx, aby, abz, bpx, bpy, bpz)
        d4 = _dot(acx, acy, acz, bpx, bpy, bpz)
        vc = d1 * d4 - d3 * d2
        cpx = px - cx; cpy = py - cy; cpz = pz - cz
        d5 = _dot(abx, aby, abz, cpx, cpy, cpz)
        d6 = _dot(acx, acy, acz, cpx, cpy, cpz)
        vb = d5 * d2 - d1 * d6
        va = d3 * d6 - d5 * d4
        if d3 >= 0.0 and d4 <= d3:
            qx, qy, qz = bx, by, bz
        elif vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
            v = d1 / (d1 - d3)
            qx = ax + v * abx; qy = ay + v * aby; qz = az + v * abz
        elif d6 >= 0.0 and d5 <= d6:
            qx, qy, qz = cx, cy, cz
        elif vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
            w = d2 / (d2 - d6)
            qx = ax + w * acx; qy = ay + w * acy; qz = az + w * acz
        elif va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
            w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
            qx = bx + w * (cx - bx); qy = by + w * (cy - by); qz = bz + w * (cz - bz)
        else:
            denom = 1.0 / (va + vb + vc)
            v = vb * denom
            w = vc * denom
            qx = ax + abx * v + acx * w
            qy = ay + aby * v + acy * w
            qz = az + abz * v + acz * w
    qx = px - qx; qy = py - qy; qz = pz - qz
    return qx * qx + qy * qy + qz * qz


def closest_sqdist(points, tris):
    """Minimum squared distance from each point to a triangle soup.

    ``tris`` is (T, 3, 3). Bounding-sphere culling skips triangles that
    cannot beat the current best.
    """
    cdef const double[:, ::1] P = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[:, :, ::1] Tr = np.ascontiguousarray(tris, dtype=np.float64)
    cdef Py_ssize_t N = P.shape[0], T = Tr.shape[0]
    cent_arr = np.ascontiguousarray(np.asarray(tris).mean(axis=1))
    rad_arr = np.sqrt(((np.asarray(tris) - cent_arr[:, None, :]) ** 2).sum(-1)).max(axis=1)
    cdef const double[:, ::1] C = cent_arr
    cdef const double[::1] R = np.ascontiguousarray(rad_arr)
    out_arr = np.empty(N)
    idx_arr = np.zeros(N, dtype=np.int64)
    cdef double[::1] out = out_arr
    cdef long long[::1] idx = idx_arr
    cdef Py_ssize_t i, t
    cdef double best, dx, dy, dz, lb, d
    with nogil:
        for i in range(N):
            best = 1e300
            for t in range(T):
                dx = P[i, 0] - C[t, 0]; dy = P[i, 1] - C[t, 1]; dz = P[i, 2] - C[t, 2]
                lb = sqrt(dx * dx + dy * dy + dz * dz) - R[t]
                if lb > 0.0 and lb * lb >= best:
                    continue
                d = _tri_sqdist(P[i, 0], P[i, 1], P[i, 2],
                                Tr[t, 0, 0], Tr[t, 0, 1], Tr[t, 0, 2],
                                Tr[t, 1, 0], Tr[t, 1, 1], Tr[t, 1, 2],
                                Tr[t, 2, 0], Tr[t, 2, 1], Tr[t, 2, 2])
                if d < best:
                    best = d
                    idx[i] = t
            out[i] = best
    return out_arr, idx_arr


def winding_number(points, tris):
    """Generalized winding number of a triangle soup around each point."""
    cdef const double[:, ::1] P = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[:, :, ::1] Tr = np.ascontiguousarray(tris, dtype=np.float64)
    cdef Py_ssize_t N = P.shape[0], T = Tr.shape[0]
    out_arr = np.empty(N)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, t
    cdef double ax, ay, az, bx, by, bz, cx, cy, cz, la, lb, lc, det, div, acc
    with nogil:
        for i in range(N):
            acc = 0.0
            for t in range(T):
                ax = Tr[t, 0, 0] - P[i, 0]; ay = Tr[t, 0, 1] - P[i, 1]; az = Tr[t, 0, 2] - P[i, 2]
                bx = Tr[t, 1, 0] - P[i, 0]; by = Tr[t, 1, 1] - P[i, 1]; bz = Tr[t, 1, 2] - P[i, 2]
                cx = Tr[t, 2, 0] - P[i, 0]; cy = Tr[t, 2, 1] - P[i, 1]; cz = Tr[t, 2, 2] - P[i, 2]
                la = sqrt(ax * ax + ay * ay + az * az)
                lb = sqrt(bx * bx + by * by + bz * bz)
                lc = sqrt(cx * cx + cy * cy + cz * cz)
                det = ax * (by * cz - bz * cy) - ay * (bx * cz - bz * cx) + az * (bx * cy - by * cx)
                div = la * lb * lc + _dot(ax, ay, az, bx, by, bz) * lc \
                    + _dot(bx, by, bz, cx, cy, cz) * la + _dot(cx, cy, cz, ax, ay, az) * lb
                acc = acc + atan2(det, div)
            out[i] = acc / (2.0 * M_PI)
    return out_arr
