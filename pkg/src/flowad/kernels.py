"""Hot numeric kernels: numba-jitted loops with pure-numpy fallbacks.

The numba path is the default whenever numba imports; set FLOWAD_NUMBA=0 to
force the numpy fallbacks. Both paths return identical values (the test
suite asserts this), so the flag only trades compile time against
throughput. `benchmarks/bench_kernels.py` compares the two.
"""

from __future__ import annotations

import os

import numpy as np

_env = os.environ.get("FLOWAD_NUMBA", "1").strip().lower()
_want_numba = _env not in ("0", "false", "off", "no")

if _want_numba:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _want_numba = False

USING_NUMBA = _want_numba


def using_numba():
    return USING_NUMBA


def _axis_coords(n_out, n_src):
    """Align-corners sample positions of an output axis in source coordinates."""
    if n_out == 1:
        return np.zeros(1)
    return np.arange(n_out) * (n_src - 1) / (n_out - 1)


# -- pure numpy paths ---------------------------------------------------------


def _bilinear_np(src, out_h, out_w):
    src_h, src_w = src.shape[0], src.shape[1]
    ys = _axis_coords(out_h, src_h)
    xs = _axis_coords(out_w, src_w)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, src_h - 1)
    x1 = np.minimum(x0 + 1, src_w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    a = src[y0][:, x0]
    b = src[y0][:, x1]
    c = src[y1][:, x0]
    d = src[y1][:, x1]
    return (
        a * (1 - wy) * (1 - wx)
        + b * (1 - wy) * wx
        + c * wy * (1 - wx)
        + d * wy * wx
    )


def _bilinear_grad_np(g, src_h, src_w):
    out_h, out_w = g.shape[0], g.shape[1]
    ys = _axis_coords(out_h, src_h)
    xs = _axis_coords(out_w, src_w)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, src_h - 1)
    x1 = np.minimum(x0 + 1, src_w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    buf = np.zeros((src_h, src_w, g.shape[2]), dtype=np.float64)
    gy0 = np.broadcast_to(y0[:, None], (out_h, out_w))
    gy1 = np.broadcast_to(y1[:, None], (out_h, out_w))
    gx0 = np.broadcast_to(x0[None, :], (out_h, out_w))
    gx1 = np.broadcast_to(x1[None, :], (out_h, out_w))
    np.add.at(buf, (gy0, gx0), g * (1 - wy) * (1 - wx))
    np.add.at(buf, (gy0, gx1), g * (1 - wy) * wx)
    np.add.at(buf, (gy1, gx0), g * wy * (1 - wx))
    np.add.at(buf, (gy1, gx1), g * wy * wx)
    return buf


def _label_np(mask):
    """8-connected component labels by iterative min-propagation."""
    h, w = mask.shape
    fg = mask != 0
    labels = np.where(fg, np.arange(h * w, dtype=np.int64).reshape(h, w), -1)
    big = h * w
    while True:
        padded = np.full((h + 2, w + 2), big, dtype=np.int64)
        padded[1:-1, 1:-1] = np.where(fg, labels, big)
        best = padded[1:-1, 1:-1].copy()
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy == 0 and dx == 0:
                    continue
                best = np.minimum(best, padded[1 + dy : h + 1 + dy, 1 + dx : w + 1 + dx])
        new = np.where(fg, best, -1)
        if np.array_equal(new, labels):
            break
        labels = new
    return _compact_labels(labels, fg)


def _compact_labels(labels, fg):
    # relabel by first appearance in row-major order
    flat = labels.reshape(-1)
    seen = {}
    out = np.zeros(labels.size, dtype=np.int32)
    nxt = 0
    for i in np.flatnonzero(fg.reshape(-1)):
        root = flat[i]
        if root not in seen:
            nxt += 1
            seen[root] = nxt
        out[i] = seen[root]
    return out.reshape(labels.shape), nxt


# -- numba paths --------------------------------------------------------------

if USING_NUMBA:

    @njit(cache=True)
    def _bilinear_nb(src, ys, xs):
        out_h = ys.shape[0]
        out_w = xs.shape[0]
        ch = src.shape[2]
        src_h = src.shape[0]
        src_w = src.shape[1]
        out = np.empty((out_h, out_w, ch), dtype=np.float64)
        for i in range(out_h):
            y = ys[i]
            y0 = int(np.floor(y))
            y1 = min(y0 + 1, src_h - 1)
            wy = y - y0
            for j in range(out_w):
                x = xs[j]
                x0 = int(np.floor(x))
                x1 = min(x0 + 1, src_w - 1)
                wx = x - x0
                for c in range(ch):
                    out[i, j, c] = (
                        src[y0, x0, c] * (1 - wy) * (1 - wx)
                        + src[y0, x1, c] * (1 - wy) * wx
                        + src[y1, x0, c] * wy * (1 - wx)
                        + src[y1, x1, c] * wy * wx
                    )
        return out

    @njit(cache=True)
    def _bilinear_grad_nb(g, ys, xs, src_h, src_w):
        out_h = ys.shape[0]
        out_w = xs.shape[0]
        ch = g.shape[2]
        buf = np.zeros((src_h, src_w, ch), dtype=np.float64)
        for i in range(out_h):
            y = ys[i]
            y0 = int(np.floor(y))
            y1 = min(y0 + 1, src_h - 1)
            wy = y - y0
            for j in range(out_w):
                x = xs[j]
                x0 = int(np.floor(x))
                x1 = min(x0 + 1, src_w - 1)
                wx = x - x0
                for c in range(ch):
                    gv = g[i, j, c]
                    buf[y0, x0, c] += gv * (1 - wy) * (1 - wx)
                    buf[y0, x1, c] += gv * (1 - wy) * wx
                    buf[y1, x0, c] += gv * wy * (1 - wx)
                    buf[y1, x1, c] += gv * wy * wx
        return buf

    @njit(cache=True)
    def _label_nb(mask):
        h, w = mask.shape
        parent = np.full(h * w, -1, dtype=np.int64)

        def find(parent, i):
            root = i
            while parent[root] != root:
                root = parent[root]
            while parent[i] != root:
                nxt = parent[i]
                parent[i] = root
                i = nxt
            return root

        for y in range(h):
            for x in range(w):
                if mask[y, x] == 0:
                    continue
                idx = y * w + x
                parent[idx] = idx
                for dy, dx in ((-1, -1), (-1, 0), (-1, 1), (0, -1)):
                    ny = y + dy
                    nx = x + dx
                    if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] != 0:
                        ra = find(parent, idx)
                        rb = find(parent, ny * w + nx)
                        if ra != rb:
                            if ra < rb:
                                parent[rb] = ra
                            else:
                                parent[ra] = rb
        labels = np.zeros((h, w), dtype=np.int32)
        remap = np.full(h * w, 0, dtype=np.int32)
        count = 0
        for y in range(h):
            for x in range(w):
                if mask[y, x] == 0:
                    continue
                root = find(parent, y * w + x)
                if remap[root] == 0:
                    count += 1
                    remap[root] = count
                labels[y, x] = remap[root]
        return labels, count


# -- public surface ------------------------------------------------------------


def bilinear_upsample(src, out_h, out_w):
    """Align-corners bilinear resize of (H, W, ch) float64 to (out_h, out_w, ch)."""
    src = np.ascontiguousarray(src, dtype=np.float64)
    if USING_NUMBA:
        ys = _axis_coords(out_h, src.shape[0])
        xs = _axis_coords(out_w, src.shape[1])
        return _bilinear_nb(src, ys, xs)
    return _bilinear_np(src, out_h, out_w)


def bilinear_upsample_grad(g, src_h, src_w):
    """Adjoint of `bilinear_upsample`: scatter output gradients to the source grid."""
    g = np.ascontiguousarray(g, dtype=np.float64)
    if USING_NUMBA:
        ys = _axis_coords(g.shape[0], src_h)
        xs = _axis_coords(g.shape[1], src_w)
        return _bilinear_grad_nb(g, ys, xs, src_h, src_w)
    return _bilinear_grad_np(g, src_h, src_w)


def label_components(mask):
    """8-connected components of a binary mask.

    Returns (labels, count): labels is int32 with 0 for background and
    1..count for components numbered by first appearance in row-major order.
    """
    mask = np.ascontiguousarray(mask != 0).astype(np.uint8)
    if USING_NUMBA:
        return _label_nb(mask)
    return _label_np(mask)
