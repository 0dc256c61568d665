"""Numpy implementations of the compiled kernels (same signatures and semantics)."""

from __future__ import annotations

import numpy as np


def _trilinear(values: np.ndarray, g: np.ndarray) -> np.ndarray:
    dims = np.array(values.shape)
    base = np.clip(np.floor(g).astype(np.int64), 0, dims - 2)
    f = g - base
    i, j, k = base[:, 0], base[:, 1], base[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    v = values
    c00 = v[i, j, k] * (1.0 - fx) + v[i + 1, j, k] * fx
    c01 = v[i, j, k + 1] * (1.0 - fx) + v[i + 1, j, k + 1] * fx
    c10 = v[i, j + 1, k] * (1.0 - fx) + v[i + 1, j + 1, k] * fx
    c11 = v[i, j + 1, k + 1] * (1.0 - fx) + v[i + 1, j + 1, k + 1] * fx
    c0 = c00 * (1.0 - fy) + c10 * fy
    c1 = c01 * (1.0 - fy) + c11 * fy
    return c0 * (1.0 - fz) + c1 * fz


def sdf_query(values, origin, h, pts):
    values = np.asarray(values, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    hi = origin + (np.array(values.shape) - 1) * h
    q = np.minimum(np.maximum(pts, origin), hi)
    diff = pts - q
    ext = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
    val = _trilinear(values, (q - origin) * (1.0 / h))
    out = val.copy()
    outside = ext > 0.0
    out[outside] = np.sqrt(ext[outside]) + val[outside]
    return out


def _pt_tri_d2(p, a, b, c):
    """Squared distance, broadcasting points (n,1,3) against triangles (1,m,3)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.sum(ab * ap, -1)
    d2 = np.sum(ac * ap, -1)
    bp = p - b
    d3 = np.sum(ab * bp, -1)
    d4 = np.sum(ac * bp, -1)
    cp = p - c
    d5 = np.sum(ab * cp, -1)
    d6 = np.sum(ac * cp, -1)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4
    shape = d1.shape
    q = np.zeros(shape + (3,))
    done = np.zeros(shape, dtype=bool)

    def take(mask, pt):
        nonlocal done
        m = mask & ~done
        q[m] = np.broadcast_to(pt, shape + (3,))[m]
        done = done | m

    with np.errstate(divide="ignore", invalid="ignore"):
        take((d1 <= 0) & (d2 <= 0), a)
        take((d3 >= 0) & (d4 <= d3), b)
        t = d1 / (d1 - d3)
        take((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + t[..., None] * ab)
        take((d6 >= 0) & (d5 <= d6), c)
        t = d2 / (d2 - d6)
        take((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + t[..., None] * ac)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        take((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + t[..., None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        inner = a + ab * (vb * denom)[..., None] + ac * (vc * denom)[..., None]
        take(np.ones(shape, dtype=bool), inner)
    diff = p - q
    return np.sum(diff * diff, -1)


def mesh_distance(verts, faces, pts, chunk: int = 256):
    verts = np.asarray(verts, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if len(faces) == 0:
        return np.full(len(pts), np.inf)
    a = verts[faces[:, 0]][None]
    b = verts[faces[:, 1]][None]
    c = verts[faces[:, 2]][None]
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        p = pts[s:s + chunk, None, :]
        out[s:s + chunk] = np.sqrt(_pt_tri_d2(p, a, b, c).min(axis=1))
    return out


def ray_parity(verts, faces, origin, h, dims, axis, jb, jc):
    verts = np.asarray(verts, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    dims = tuple(int(d) for d in dims)
    b, c = (axis + 1) % 3, (axis + 2) % 3
    out = np.zeros(dims, dtype=np.uint8)
    tri = verts[faces]  # (m, 3, 3)
    ub, uc, ua = tri[:, :, b], tri[:, :, c], tri[:, :, axis]
    xa_nodes = origin[axis] + np.arange(dims[axis]) * h
    for ib in range(dims[b]):
        yb = origin[b] + ib * h + jb
        for ic in range(dims[c]):
            yc = origin[c] + ic * h + jc
            w0 = (ub[:, 2] - ub[:, 1]) * (yc - uc[:, 1]) - (uc[:, 2] - uc[:, 1]) * (yb - ub[:, 1])
            w1 = (ub[:, 0] - ub[:, 2]) * (yc - uc[:, 2]) - (uc[:, 0] - uc[:, 2]) * (yb - ub[:, 2])
            w2 = (ub[:, 1] - ub[:, 0]) * (yc - uc[:, 0]) - (uc[:, 1] - uc[:, 0]) * (yb - ub[:, 0])
            area = w0 + w1 + w2
            pos = (area > 0) & (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
            neg = (area < 0) & (w0 <= 0) & (w1 <= 0) & (w2 <= 0)
            hit = pos | neg
            if not hit.any():
                continue
            xa = (w0[hit] * ua[hit, 0] + w1[hit] * ua[hit, 1] + w2[hit] * ua[hit, 2]) / area[hit]
            xa = np.sort(xa)
            above = len(xa) - np.searchsorted(xa, xa_nodes, side="right")
            inside = (above % 2 == 1).astype(np.uint8)
            idx = [slice(None)] * 3
            idx[b], idx[c] = ib, ic
            out[tuple(idx)] = inside
    return out


def score_topk(values, origin, h, base, srot, offsets, delta, k_keep, r0, init_thr=np.inf):
    if k_keep < 1:
        raise ValueError("k_keep must be positive")
    values = np.asarray(values, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    base = np.asarray(base, dtype=np.float64)
    srot = np.asarray(srot, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    nr, npt, _ = base.shape
    nt = len(offsets)
    dd = delta * delta
    best_s = np.empty(0)
    best_i = np.empty(0, dtype=np.int64)
    for r in range(nr):
        m = srot[r]
        # same expression order as the compiled loop, so sums match bit for bit
        w = np.stack([m[a, 0] * offsets[:, 0] + m[a, 1] * offsets[:, 1] + m[a, 2] * offsets[:, 2]
                      for a in range(3)], axis=1)
        acc = np.zeros(nt)
        for j in range(npt):
            d = np.abs(sdf_query(values, origin, h, base[r, j][None, :] - w))
            d2 = d * d
            acc = acc + d2 / (d2 + dd)
        ids = (r0 + r) * nt + np.arange(nt, dtype=np.int64)
        keep = acc <= init_thr
        s = np.concatenate([best_s, acc[keep]])
        i = np.concatenate([best_i, ids[keep]])
        order = np.lexsort((i, s))[:k_keep]
        best_s, best_i = s[order], i[order]
    return best_s, best_i


def _cedge(uv, ia, ib, pu, pv):
    lo = np.minimum(ia, ib)
    hi = np.maximum(ia, ib)
    e = (uv[hi, 0] - uv[lo, 0]) * (pv - uv[lo, 1]) - (uv[hi, 1] - uv[lo, 1]) * (pu - uv[lo, 0])
    return e if ia < ib else -e


def rasterize(vcam, faces, fx, fy, cx, cy, width, height, znear):
    vcam = np.asarray(vcam, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    depth = np.full((height, width), np.inf)
    fid = np.full((height, width), -1, dtype=np.int64)
    uv = np.zeros((len(vcam), 2))
    ok = vcam[:, 2] > znear
    uv[ok, 0] = fx * vcam[ok, 0] / vcam[ok, 2] + cx
    uv[ok, 1] = fy * vcam[ok, 1] / vcam[ok, 2] + cy
    for f, (i0, i1, i2) in enumerate(faces):
        z0, z1, z2 = vcam[i0, 2], vcam[i1, 2], vcam[i2, 2]
        if z0 <= znear or z1 <= znear or z2 <= znear:
            continue
        area = _cedge(uv, i1, i2, uv[i0, 0], uv[i0, 1])
        if area == 0.0:
            continue
        sgn = 1.0 if area > 0 else -1.0
        us, vs = uv[[i0, i1, i2], 0], uv[[i0, i1, i2], 1]
        if us.max() < 0 or vs.max() < 0 or us.min() > width - 1 or vs.min() > height - 1:
            continue
        u0 = int(np.ceil(us.min())) if us.min() > 0 else 0
        u1 = int(np.floor(us.max())) if us.max() < width - 1 else width - 1
        v0 = int(np.ceil(vs.min())) if vs.min() > 0 else 0
        v1 = int(np.floor(vs.max())) if vs.max() < height - 1 else height - 1
        if u1 < u0 or v1 < v0:
            continue
        pv, pu = np.mgrid[v0:v1 + 1, u0:u1 + 1].astype(np.float64)
        w0 = sgn * _cedge(uv, i1, i2, pu, pv)
        w1 = sgn * _cedge(uv, i2, i0, pu, pv)
        w2 = sgn * _cedge(uv, i0, i1, pu, pv)
        tot = w0 + w1 + w2
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0) & (tot > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            zz = tot / (w0 / z0 + w1 / z1 + w2 / z2)
        sub_d = depth[v0:v1 + 1, u0:u1 + 1]
        sub_f = fid[v0:v1 + 1, u0:u1 + 1]
        closer = inside & (zz < sub_d)
        sub_d[closer] = zz[closer]
        sub_f[closer] = f
    return depth, fid
