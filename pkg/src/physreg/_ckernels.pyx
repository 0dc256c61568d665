# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops.  ``_pykernels`` holds the numpy twins with identical semantics."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, ceil, sqrt, fabs, INFINITY
from libc.stdlib cimport malloc, free

cnp.import_array()

ctypedef cnp.int64_t i64


# ---------------------------------------------------------------- grid queries

cdef inline double _trilinear(const double *v, int nx, int ny, int nz,
                              double gx, double gy, double gz) noexcept nogil:
    cdef int i = <int>floor(gx)
    cdef int j = <int>floor(gy)
    cdef int k = <int>floor(gz)
    if i > nx - 2:
        i = nx - 2
    if j > ny - 2:
        j = ny - 2
    if k > nz - 2:
        k = nz - 2
    if i < 0:
        i = 0
    if j < 0:
        j = 0
    if k < 0:
        k = 0
    cdef double fx = gx - i
    cdef double fy = gy - j
    cdef double fz = gz - k
    cdef Py_ssize_t sy = nz, sx = <Py_ssize_t>ny * nz
    cdef const double *p = v + i * sx + j * sy + k
    cdef double c00 = p[0] * (1.0 - fx) + p[sx] * fx
    cdef double c01 = p[1] * (1.0 - fx) + p[sx + 1] * fx
    cdef double c10 = p[sy] * (1.0 - fx) + p[sx + sy] * fx
    cdef double c11 = p[sy + 1] * (1.0 - fx) + p[sx + sy + 1] * fx
    cdef double c0 = c00 * (1.0 - fy) + c10 * fy
    cdef double c1 = c01 * (1.0 - fy) + c11 * fy
    return c0 * (1.0 - fz) + c1 * fz


cdef inline double _query(const double *v, int nx, int ny, int nz,
                          double ox, double oy, double oz, double h, double ih,
                          double x, double y, double z) noexcept nogil:
    cdef double hx = ox + (nx - 1) * h
    cdef double hy = oy + (ny - 1) * h
    cdef double hz = oz + (nz - 1) * h
    cdef double qx = x, qy = y, qz = z
    if qx < ox:
        qx = ox
    elif qx > hx:
        qx = hx
    if qy < oy:
        qy = oy
    elif qy > hy:
        qy = hy
    if qz < oz:
        qz = oz
    elif qz > hz:
        qz = hz
    cdef double dx = x - qx
    cdef double dy = y - qy
    cdef double dz = z - qz
    cdef double val = _trilinear(v, nx, ny, nz, (qx - ox) * ih, (qy - oy) * ih, (qz - oz) * ih)
    cdef double ext = dx * dx + dy * dy + dz * dz
    if ext > 0.0:
        return sqrt(ext) + val
    return val


def sdf_query(const double[:, :, ::1] values, const double[::1] origin, double h,
              const double[:, ::1] pts):
    cdef Py_ssize_t n = pts.shape[0], a
    cdef int nx = values.shape[0], ny = values.shape[1], nz = values.shape[2]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double ox = origin[0], oy = origin[1], oz = origin[2]
    cdef double ih = 1.0 / h
    with nogil:
        for a in range(n):
            o[a] = _query(&values[0, 0, 0], nx, ny, nz, ox, oy, oz, h, ih, pts[a, 0], pts[a, 1], pts[a, 2])
    return out


# ---------------------------------------------------------- point-to-triangle

cdef inline double _pt_tri_d2(double px, double py, double pz,
                              double ax, double ay, double az,
                              double bx, double by, double bz,
                              double cx, double cy, double cz) noexcept nogil:
    cdef double abx = bx - ax, aby = by - ay, abz = bz - az
    cdef double acx = cx - ax, acy = cy - ay, acz = cz - az
    cdef double apx = px - ax, apy = py - ay, apz = pz - az
    cdef double d1 = abx * apx + aby * apy + abz * apz
    cdef double d2 = acx * apx + acy * apy + acz * apz
    cdef double qx, qy, qz, t, denom, vv, ww
    if d1 <= 0.0 and d2 <= 0.0:
        return apx * apx + apy * apy + apz * apz
    cdef double bpx = px - bx, bpy = py - by, bpz = pz - bz
    cdef double d3 = abx * bpx + aby * bpy + abz * bpz
    cdef double d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bpx * bpx + bpy * bpy + bpz * bpz
    cdef double vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        t = d1 / (d1 - d3)
        qx = px - (ax + t * abx)
        qy = py - (ay + t * aby)
        qz = pz - (az + t * abz)
        return qx * qx + qy * qy + qz * qz
    cdef double cpx = px - cx, cpy = py - cy, cpz = pz - cz
    cdef double d5 = abx * cpx + aby * cpy + abz * cpz
    cdef double d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cpx * cpx + cpy * cpy + cpz * cpz
    cdef double vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        t = d2 / (d2 - d6)
        qx = px - (ax + t * acx)
        qy = py - (ay + t * acy)
        qz = pz - (az + t * acz)
        return qx * qx + qy * qy + qz * qz
    cdef double va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        qx = px - (bx + t * (cx - bx))
        qy = py - (by + t * (cy - by))
        qz = pz - (bz + t * (cz - bz))
        return qx * qx + qy * qy + qz * qz
    denom = 1.0 / (va + vb + vc)
    vv = vb * denom
    ww = vc * denom
    qx = px - (ax + abx * vv + acx * ww)
    qy = py - (ay + aby * vv + acy * ww)
    qz = pz - (az + abz * vv + acz * ww)
    return qx * qx + qy * qy + qz * qz


def mesh_distance(const double[:, ::1] verts, const i64[:, ::1] faces, const double[:, ::1] pts):
    """Exact unsigned distance from each point to the triangle soup."""
    cdef Py_ssize_t n = pts.shape[0], nf = faces.shape[0], a, f, best_f
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    bb_np = np.empty((nf, 6), dtype=np.float64)
    cdef double[:, ::1] bb = bb_np
    cdef double px, py, pz, best, d2, gx, gy, gz, g
    cdef i64 i0, i1, i2
    cdef int c
    for f in range(nf):
        for c in range(3):
            bb[f, c] = min(verts[faces[f, 0], c], verts[faces[f, 1], c], verts[faces[f, 2], c])
            bb[f, 3 + c] = max(verts[faces[f, 0], c], verts[faces[f, 1], c], verts[faces[f, 2], c])
    if nf == 0:
        out[:] = INFINITY
        return out
    best_f = 0
    with nogil:
        for a in range(n):
            px = pts[a, 0]
            py = pts[a, 1]
            pz = pts[a, 2]
            f = best_f
            i0 = faces[f, 0]
            i1 = faces[f, 1]
            i2 = faces[f, 2]
            best = _pt_tri_d2(px, py, pz, verts[i0, 0], verts[i0, 1], verts[i0, 2],
                              verts[i1, 0], verts[i1, 1], verts[i1, 2],
                              verts[i2, 0], verts[i2, 1], verts[i2, 2])
            for f in range(nf):
                gx = 0.0
                if px < bb[f, 0]:
                    gx = bb[f, 0] - px
                elif px > bb[f, 3]:
                    gx = px - bb[f, 3]
                gy = 0.0
                if py < bb[f, 1]:
                    gy = bb[f, 1] - py
                elif py > bb[f, 4]:
                    gy = py - bb[f, 4]
                gz = 0.0
                if pz < bb[f, 2]:
                    gz = bb[f, 2] - pz
                elif pz > bb[f, 5]:
                    gz = pz - bb[f, 5]
                g = gx * gx + gy * gy + gz * gz
                if g >= best:
                    continue
                i0 = faces[f, 0]
                i1 = faces[f, 1]
                i2 = faces[f, 2]
                d2 = _pt_tri_d2(px, py, pz, verts[i0, 0], verts[i0, 1], verts[i0, 2],
                                verts[i1, 0], verts[i1, 1], verts[i1, 2],
                                verts[i2, 0], verts[i2, 1], verts[i2, 2])
                if d2 < best:
                    best = d2
                    best_f = f
            o[a] = sqrt(best)
    return out


# ------------------------------------------------------------ ray parity sign

def ray_parity(const double[:, ::1] verts, const i64[:, ::1] faces, const double[::1] origin,
               double h, dims, int axis, double jb, double jc):
    """Inside flags from +axis ray crossings, one ray per grid column.

    The ray through each column is offset by (jb, jc) in the two transverse axes
    so it avoids passing exactly through mesh edges of grid-aligned shapes.
    """
    cdef int n0 = dims[0], n1 = dims[1], n2 = dims[2]
    cdef int na = dims[axis]
    cdef int b = (axis + 1) % 3, c = (axis + 2) % 3
    cdef int nb = dims[b], nc = dims[c]
    cdef Py_ssize_t nf = faces.shape[0], f
    out = np.zeros((n0, n1, n2), dtype=np.uint8)
    cdef cnp.uint8_t[:, :, ::1] o = out
    cdef double *hits = <double *>malloc((nf + 1) * sizeof(double))
    cdef int ib, ic, ia, nh, m, q, cnt
    cdef double yb, yc, ub0, uc0, ub1, uc1, ub2, uc2, w0, w1, w2, area, xa, tmp
    cdef int idx[3]
    try:
        with nogil:
            for ib in range(nb):
                yb = origin[b] + ib * h + jb
                for ic in range(nc):
                    yc = origin[c] + ic * h + jc
                    nh = 0
                    for f in range(nf):
                        ub0 = verts[faces[f, 0], b]
                        uc0 = verts[faces[f, 0], c]
                        ub1 = verts[faces[f, 1], b]
                        uc1 = verts[faces[f, 1], c]
                        ub2 = verts[faces[f, 2], b]
                        uc2 = verts[faces[f, 2], c]
                        if yb < ub0 and yb < ub1 and yb < ub2:
                            continue
                        if yb > ub0 and yb > ub1 and yb > ub2:
                            continue
                        if yc < uc0 and yc < uc1 and yc < uc2:
                            continue
                        if yc > uc0 and yc > uc1 and yc > uc2:
                            continue
                        w0 = (ub2 - ub1) * (yc - uc1) - (uc2 - uc1) * (yb - ub1)
                        w1 = (ub0 - ub2) * (yc - uc2) - (uc0 - uc2) * (yb - ub2)
                        w2 = (ub1 - ub0) * (yc - uc0) - (uc1 - uc0) * (yb - ub0)
                        area = w0 + w1 + w2
                        if area == 0.0:
                            continue
                        if area > 0.0:
                            if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                                continue
                        else:
                            if w0 > 0.0 or w1 > 0.0 or w2 > 0.0:
                                continue
                        xa = (w0 * verts[faces[f, 0], axis] + w1 * verts[faces[f, 1], axis]
                              + w2 * verts[faces[f, 2], axis]) / area
                        # insertion sort keeps hits ascending
                        m = nh
                        while m > 0 and hits[m - 1] > xa:
                            hits[m] = hits[m - 1]
                            m -= 1
                        hits[m] = xa
                        nh += 1
                    q = 0
                    for ia in range(na):
                        xa = origin[axis] + ia * h
                        while q < nh and hits[q] <= xa:
                            q += 1
                        cnt = nh - q
                        if cnt % 2 == 1:
                            idx[axis] = ia
                            idx[b] = ib
                            idx[c] = ic
                            o[idx[0], idx[1], idx[2]] = 1
    finally:
        free(hits)
    return out


# --------------------------------------------------------- pruned pose scoring

cdef inline bint _gt(double s1, i64 i1, double s2, i64 i2) noexcept nogil:
    return s1 > s2 or (s1 == s2 and i1 > i2)


cdef void _sift_down(double *hs, i64 *hi, int n, int pos) noexcept nogil:
    cdef int child, big
    cdef double ts
    cdef i64 ti
    while True:
        child = 2 * pos + 1
        if child >= n:
            return
        big = child
        if child + 1 < n and _gt(hs[child + 1], hi[child + 1], hs[child], hi[child]):
            big = child + 1
        if _gt(hs[big], hi[big], hs[pos], hi[pos]):
            ts = hs[pos]
            hs[pos] = hs[big]
            hs[big] = ts
            ti = hi[pos]
            hi[pos] = hi[big]
            hi[big] = ti
            pos = big
        else:
            return


cdef void _sift_up(double *hs, i64 *hi, int pos) noexcept nogil:
    cdef int parent
    cdef double ts
    cdef i64 ti
    while pos > 0:
        parent = (pos - 1) // 2
        if _gt(hs[pos], hi[pos], hs[parent], hi[parent]):
            ts = hs[pos]
            hs[pos] = hs[parent]
            hs[parent] = ts
            ti = hi[pos]
            hi[pos] = hi[parent]
            hi[parent] = ti
            pos = parent
        else:
            return


def _shell_min(values) -> float:
    v = np.asarray(values)
    if min(v.shape) <= 4:
        return -1.0
    inner = v[2:-2, 2:-2, 2:-2]
    mask = np.ones(v.shape, dtype=bool)
    mask[2:-2, 2:-2, 2:-2] = False
    return float(v[mask].min()) if inner.size else -1.0


def score_topk(const double[:, :, ::1] values, const double[::1] origin, double h,
               const double[:, :, ::1] base, const double[:, :, ::1] srot,
               const double[:, ::1] offsets, double delta, int k_keep, i64 r0,
               double init_thr=INFINITY):
    """Exact top-k robust sums over the rotation x offset product.

    Candidate (r, t) maps measured point j to ``base[r, j] - srot[r] @ offsets[t]``
    in the object frame.  Its sum is ``sum_j rho(|sdf|)`` accumulated in j order.
    A candidate is abandoned as soon as its partial sum reaches the current k-th
    best, which cannot change the result because every term is non-negative.
    Flat ids are ``(r0 + r) * n_offsets + t``.  Candidates whose sum strictly
    exceeds ``init_thr`` are dropped too (a bound known from a previous pass).
    """
    cdef Py_ssize_t nr = base.shape[0], npt = base.shape[1], nt = offsets.shape[0]
    cdef Py_ssize_t r, t, j
    cdef int nx = values.shape[0], ny = values.shape[1], nz = values.shape[2]
    cdef double ox = origin[0], oy = origin[1], oz = origin[2]
    cdef double dd = delta * delta
    cdef double ih = 1.0 / h
    cdef double wx, wy, wz, acc, thr, d, d2
    cdef const double *vp = &values[0, 0, 0]
    cdef const double *bp
    cdef const double *sp
    cdef const double *op
    cdef int count = 0
    cdef bint dead
    cdef i64 fid
    cdef double px, py, pz, ex, lb
    cdef double hx = ox + (nx - 1) * h, hy = oy + (ny - 1) * h, hz = oz + (nz - 1) * h
    if k_keep < 1:
        raise ValueError("k_keep must be positive")
    # a clamped query interpolates inside one of the two outermost node layers
    cdef double shell_min = _shell_min(values)
    cdef bint shell_ok = shell_min >= 0.0 and nx > 3 and ny > 3 and nz > 3
    cdef double *hs = <double *>malloc(k_keep * sizeof(double))
    cdef i64 *hi = <i64 *>malloc(k_keep * sizeof(i64))
    try:
        with nogil:
            for r in range(nr):
                sp = &srot[r, 0, 0]
                bp = &base[r, 0, 0]
                for t in range(nt):
                    op = &offsets[t, 0]
                    wx = sp[0] * op[0] + sp[1] * op[1] + sp[2] * op[2]
                    wy = sp[3] * op[0] + sp[4] * op[1] + sp[5] * op[2]
                    wz = sp[6] * op[0] + sp[7] * op[1] + sp[8] * op[2]
                    thr = hs[0] if count == k_keep else INFINITY
                    acc = 0.0
                    dead = False
                    for j in range(npt):
                        px = bp[3 * j] - wx
                        py = bp[3 * j + 1] - wy
                        pz = bp[3 * j + 2] - wz
                        if shell_ok:
                            # outside the grid |sdf| >= distance to the box + shell minimum
                            ex = 0.0
                            if px < ox:
                                ex = ex + (ox - px) * (ox - px)
                            elif px > hx:
                                ex = ex + (px - hx) * (px - hx)
                            if py < oy:
                                ex = ex + (oy - py) * (oy - py)
                            elif py > hy:
                                ex = ex + (py - hy) * (py - hy)
                            if pz < oz:
                                ex = ex + (oz - pz) * (oz - pz)
                            elif pz > hz:
                                ex = ex + (pz - hz) * (pz - hz)
                            if ex > 0.0:
                                d = sqrt(ex) + shell_min
                                d2 = d * d
                                lb = acc + (d2 / (d2 + dd)) * (1.0 - 1e-9)
                                if lb >= thr or lb > init_thr:
                                    dead = True
                                    break
                        d = fabs(_query(vp, nx, ny, nz, ox, oy, oz, h, ih, px, py, pz))
                        d2 = d * d
                        acc = acc + d2 / (d2 + dd)
                        if acc >= thr or acc > init_thr:
                            dead = True
                            break
                    if dead:
                        continue
                    fid = (r0 + r) * nt + t
                    if count < k_keep:
                        hs[count] = acc
                        hi[count] = fid
                        _sift_up(hs, hi, count)
                        count += 1
                    else:
                        hs[0] = acc
                        hi[0] = fid
                        _sift_down(hs, hi, count, 0)
        sums = np.array([hs[a] for a in range(count)], dtype=np.float64)
        ids = np.array([hi[a] for a in range(count)], dtype=np.int64)
    finally:
        free(hs)
        free(hi)
    order = np.lexsort((ids, sums))
    return sums[order], ids[order]


cdef inline double _edge(double au, double av, double bu, double bv, double pu, double pv) noexcept nogil:
    return (bu - au) * (pv - av) - (bv - av) * (pu - au)


cdef inline double _cedge(const double[:, ::1] uv, i64 ia, i64 ib, double pu, double pv) noexcept nogil:
    # evaluate with a canonical vertex order so shared edges cancel exactly
    if ia < ib:
        return _edge(uv[ia, 0], uv[ia, 1], uv[ib, 0], uv[ib, 1], pu, pv)
    return -_edge(uv[ib, 0], uv[ib, 1], uv[ia, 0], uv[ia, 1], pu, pv)


def rasterize(const double[:, ::1] vcam, const i64[:, ::1] faces, double fx, double fy,
              double cx, double cy, int width, int height, double znear):
    """Z-buffer at integer pixel coordinates; returns (depth, face id)."""
    cdef Py_ssize_t nv = vcam.shape[0], nf = faces.shape[0], f, a
    depth_np = np.full((height, width), INFINITY, dtype=np.float64)
    fid_np = np.full((height, width), -1, dtype=np.int64)
    uv_np = np.zeros((nv, 2), dtype=np.float64)
    cdef double[:, ::1] depth = depth_np
    cdef i64[:, ::1] fid = fid_np
    cdef double[:, ::1] uv = uv_np
    cdef i64 i0, i1, i2
    cdef double z0, z1, z2, area, w0, w1, w2, zz, sgn, umin, umax, vmin, vmax
    cdef int px, py, u0, u1, v0, v1
    with nogil:
        for a in range(nv):
            if vcam[a, 2] > znear:
                uv[a, 0] = fx * vcam[a, 0] / vcam[a, 2] + cx
                uv[a, 1] = fy * vcam[a, 1] / vcam[a, 2] + cy
        for f in range(nf):
            i0 = faces[f, 0]
            i1 = faces[f, 1]
            i2 = faces[f, 2]
            z0 = vcam[i0, 2]
            z1 = vcam[i1, 2]
            z2 = vcam[i2, 2]
            if z0 <= znear or z1 <= znear or z2 <= znear:
                continue
            area = _cedge(uv, i1, i2, uv[i0, 0], uv[i0, 1])
            if area == 0.0:
                continue
            sgn = 1.0 if area > 0.0 else -1.0
            umin = min(uv[i0, 0], uv[i1, 0], uv[i2, 0])
            umax = max(uv[i0, 0], uv[i1, 0], uv[i2, 0])
            vmin = min(uv[i0, 1], uv[i1, 1], uv[i2, 1])
            vmax = max(uv[i0, 1], uv[i1, 1], uv[i2, 1])
            if umax < 0.0 or vmax < 0.0 or umin > width - 1 or vmin > height - 1:
                continue
            u0 = <int>ceil(umin) if umin > 0.0 else 0
            u1 = <int>floor(umax) if umax < width - 1 else width - 1
            v0 = <int>ceil(vmin) if vmin > 0.0 else 0
            v1 = <int>floor(vmax) if vmax < height - 1 else height - 1
            for py in range(v0, v1 + 1):
                for px in range(u0, u1 + 1):
                    w0 = sgn * _cedge(uv, i1, i2, px, py)
                    if w0 < 0.0:
                        continue
                    w1 = sgn * _cedge(uv, i2, i0, px, py)
                    if w1 < 0.0:
                        continue
                    w2 = sgn * _cedge(uv, i0, i1, px, py)
                    if w2 < 0.0:
                        continue
                    zz = w0 + w1 + w2
                    if zz <= 0.0:
                        continue
                    zz = zz / (w0 / z0 + w1 / z1 + w2 / z2)
                    if zz < depth[py, px]:
                        depth[py, px] = zz
                        fid[py, px] = f
    return depth_np, fid_np
