"""Hot inner loops: exact nearest-neighbour scans and splat rasterization.

Two backends implement the same kernels with bit-identical results. The numba
backend is used when numba imports and ``GRASPVOC_NO_NUMBA`` is unset (or "0");
otherwise the chunked numpy backend is selected. Both are importable directly
as ``numpy_impl`` and ``numba_impl`` (the latter is None without numba).
"""

import os
import types

import numpy as np

_CHUNK_ELEMS = 1 << 22


def _disk_offsets(radius):
    r = int(radius)
    offs = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dx * dx + dy * dy <= r * r]
    return np.asarray(offs, dtype=np.int64).reshape(-1, 2)


# ---------------------------------------------------------------- numpy path


def _nearest_np(queries, points):
    m = queries.shape[0]
    n = points.shape[0]
    idx = np.empty(m, dtype=np.int64)
    d2 = np.empty(m, dtype=np.float64)
    px, py, pz = points[:, 0], points[:, 1], points[:, 2]
    step = max(1, _CHUNK_ELEMS // max(n, 1))
    for lo in range(0, m, step):
        q = queries[lo : lo + step]
        dx = q[:, 0:1] - px
        dy = q[:, 1:2] - py
        dz = q[:, 2:3] - pz
        dist = dx * dx + dy * dy + dz * dz
        best = np.argmin(dist, axis=1)  # first occurrence == lowest index
        idx[lo : lo + step] = best
        d2[lo : lo + step] = dist[np.arange(q.shape[0]), best]
    return idx, d2


def _raster_np(cols, rows, depth, width, height, radius, quantile, tol):
    flat = rows * width + cols
    pmin = np.full(width * height, np.inf)
    pmax = np.full(width * height, -np.inf)
    np.minimum.at(pmin, flat, depth)
    np.maximum.at(pmax, flat, depth)
    gmin = pmin.reshape(height, width)
    gmax = pmax.reshape(height, width)
    nmin = np.full((height, width), np.inf)
    nmax = np.full((height, width), -np.inf)
    for dy, dx in _disk_offsets(radius):
        # nmin[y, x] = min over gmin[y + dy, x + dx]
        ys_dst = slice(max(0, -dy), min(height, height - dy))
        xs_dst = slice(max(0, -dx), min(width, width - dx))
        ys_src = slice(max(0, dy), min(height, height + dy))
        xs_src = slice(max(0, dx), min(width, width + dx))
        np.minimum(nmin[ys_dst, xs_dst], gmin[ys_src, xs_src], out=nmin[ys_dst, xs_dst])
        np.maximum(nmax[ys_dst, xs_dst], gmax[ys_src, xs_src], out=nmax[ys_dst, xs_dst])
    lo = nmin.ravel()[flat]
    hi = nmax.ravel()[flat]
    visible = depth <= lo + quantile * (hi - lo) + tol
    return visible, pmin


numpy_impl = types.SimpleNamespace(name="numpy", nearest=_nearest_np, raster=_raster_np)


# ---------------------------------------------------------------- numba path


def _build_numba():
    from numba import njit

    @njit(cache=True)
    def nearest(queries, points):
        m = queries.shape[0]
        n = points.shape[0]
        idx = np.empty(m, dtype=np.int64)
        d2 = np.empty(m, dtype=np.float64)
        for i in range(m):
            qx = queries[i, 0]
            qy = queries[i, 1]
            qz = queries[i, 2]
            best = 0
            bd = np.inf
            for j in range(n):
                dx = qx - points[j, 0]
                dy = qy - points[j, 1]
                dz = qz - points[j, 2]
                d = dx * dx + dy * dy + dz * dz
                if d < bd:
                    bd = d
                    best = j
            idx[i] = best
            d2[i] = bd
        return idx, d2

    @njit(cache=True)
    def _raster(cols, rows, depth, width, height, offsets, quantile, tol):
        n = depth.shape[0]
        pmin = np.full(width * height, np.inf)
        pmax = np.full(width * height, -np.inf)
        for i in range(n):
            p = rows[i] * width + cols[i]
            if depth[i] < pmin[p]:
                pmin[p] = depth[i]
            if depth[i] > pmax[p]:
                pmax[p] = depth[i]
        visible = np.empty(n, dtype=np.bool_)
        for i in range(n):
            lo = np.inf
            hi = -np.inf
            for k in range(offsets.shape[0]):
                y = rows[i] + offsets[k, 0]
                x = cols[i] + offsets[k, 1]
                if y < 0 or y >= height or x < 0 or x >= width:
                    continue
                p = y * width + x
                if pmin[p] < lo:
                    lo = pmin[p]
                if pmax[p] > hi:
                    hi = pmax[p]
            visible[i] = depth[i] <= lo + quantile * (hi - lo) + tol
        return visible, pmin

    def raster(cols, rows, depth, width, height, radius, quantile, tol):
        return _raster(cols, rows, depth, width, height, _disk_offsets(radius), quantile, tol)

    return types.SimpleNamespace(name="numba", nearest=nearest, raster=raster)


try:
    numba_impl = _build_numba()
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_impl = None


def _select():
    flag = os.environ.get("GRASPVOC_NO_NUMBA", "").strip().lower()
    if flag not in ("", "0", "false", "no") or numba_impl is None:
        return numpy_impl
    return numba_impl


active = _select()


def nearest(queries, points):
    """Index (lowest on ties) and squared distance of the nearest point per query."""
    queries = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    return active.nearest(queries, points)


def raster(cols, rows, depth, width, height, radius, quantile, tol=0.0):
    """Per-point visibility and per-pixel nearest depth (inf where empty).

    ``tol`` absorbs rounding noise so a flat neighbourhood counts as all front.
    """
    return active.raster(
        np.ascontiguousarray(cols, dtype=np.int64),
        np.ascontiguousarray(rows, dtype=np.int64),
        np.ascontiguousarray(depth, dtype=np.float64),
        int(width),
        int(height),
        int(radius),
        float(quantile),
        float(tol),
    )
