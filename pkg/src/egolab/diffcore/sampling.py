"""Differentiable bilinear image sampling and bilinear resizing."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

# slack on the in-bounds test so float rounding at exact border coordinates
# (identity warps) does not flag valid pixels
INBOUNDS_EPS = 1e-6


def bilinear_sample(image, grid):
    """Sample an NCHW image at continuous (u, v) pixel coordinates.

    grid has shape (N, H', W', 2) with u along the width axis and v along
    the height axis, in source-pixel units.  Values at coordinates outside
    [0, W-1] x [0, H-1] are border-clamped; such sites are reported invalid
    in the returned boolean mask of shape (N, 1, H', W').  Differentiable in
    both the image and the grid.
    """
    if not isinstance(image, Tensor):
        image = Tensor(image)
    if not isinstance(grid, Tensor):
        grid = Tensor(grid)
    if image.data.ndim != 4:
        raise ValueError("image must be NCHW")
    if grid.data.ndim != 4 or grid.data.shape[-1] != 2:
        raise ValueError("grid must be (N, H', W', 2)")
    if grid.data.shape[0] != image.data.shape[0]:
        raise ValueError("batch size mismatch between image and grid")

    n, c, h, w = image.data.shape
    _, oh, ow, _ = grid.data.shape
    p = oh * ow

    u = grid.data[..., 0].reshape(n, p)
    v = grid.data[..., 1].reshape(n, p)
    mask = ((u >= -INBOUNDS_EPS) & (u <= w - 1 + INBOUNDS_EPS)
            & (v >= -INBOUNDS_EPS) & (v <= h - 1 + INBOUNDS_EPS))

    uc = np.clip(u, 0.0, w - 1.0)
    vc = np.clip(v, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(uc), w - 2).astype(np.int64) if w > 1 else np.zeros_like(uc, dtype=np.int64)
    y0 = np.minimum(np.floor(vc), h - 2).astype(np.int64) if h > 1 else np.zeros_like(vc, dtype=np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (uc - x0).astype(image.data.dtype)
    wy = (vc - y0).astype(image.data.dtype)

    flat = image.data.reshape(n, c, h * w)
    i00 = (y0 * w + x0)[:, None, :]
    i01 = (y0 * w + x1)[:, None, :]
    i10 = (y1 * w + x0)[:, None, :]
    i11 = (y1 * w + x1)[:, None, :]

    def gather(idx):
        return np.take_along_axis(flat, np.broadcast_to(idx, (n, c, p)), axis=2)

    v00, v01, v10, v11 = gather(i00), gather(i01), gather(i10), gather(i11)
    wxe = wx[:, None, :]
    wye = wy[:, None, :]
    top = v00 + wxe * (v01 - v00)
    bot = v10 + wxe * (v11 - v10)
    out_data = (top + wye * (bot - top)).reshape(n, c, oh, ow)

    def backward(g):
        gf = g.reshape(n, c, p)
        if image.requires_grad:
            w00 = (1 - wxe) * (1 - wye) * gf
            w01 = wxe * (1 - wye) * gf
            w10 = (1 - wxe) * wye * gf
            w11 = wxe * wye * gf
            # one bincount over all (sample, channel, corner) contributions
            base = (np.arange(n * c, dtype=np.int64) * (h * w)).reshape(n, c, 1)
            idx = np.concatenate([i00 + base, i01 + base, i10 + base, i11 + base],
                                 axis=2).reshape(-1)
            vals = np.concatenate([w00, w01, w10, w11], axis=2).reshape(-1)
            acc = np.bincount(idx, weights=vals, minlength=n * c * h * w)
            image._accum(acc.reshape(n, c, h, w).astype(image.data.dtype))
        if grid.requires_grad:
            du = ((1 - wye) * (v01 - v00) + wye * (v11 - v10)) * gf
            dv = ((1 - wxe) * (v10 - v00) + wxe * (v11 - v01)) * gf
            du = du.sum(axis=1)
            dv = dv.sum(axis=1)
            # clamped coordinates have zero derivative w.r.t. the raw grid
            du *= (u > 0) & (u < w - 1)
            dv *= (v > 0) & (v < h - 1)
            gg = np.stack([du, dv], axis=-1).reshape(n, oh, ow, 2)
            grid._accum(gg.astype(grid.data.dtype))

    out = Tensor._from_op(out_data, (image, grid), backward, "bilinear_sample")
    return out, mask.reshape(n, 1, oh, ow)


_RESIZE_GRIDS: dict = {}


def _resize_grid(n, h, w, oh, ow, dtype):
    key = (n, h, w, oh, ow, np.dtype(dtype).str)
    grid = _RESIZE_GRIDS.get(key)
    if grid is None:
        # corner-aligned mapping keeps every sample strictly in bounds
        us = np.linspace(0.0, w - 1.0, ow) if ow > 1 else np.zeros(1)
        vs = np.linspace(0.0, h - 1.0, oh) if oh > 1 else np.zeros(1)
        gu, gv = np.meshgrid(us, vs)
        g = np.stack([gu, gv], axis=-1)[None].repeat(n, axis=0)
        grid = Tensor(g.astype(dtype))
        _RESIZE_GRIDS[key] = grid
    return grid


def upsample_bilinear(x, out_hw):
    """Resize NCHW spatially to (OH, OW) with corner-aligned bilinear weights."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    n, _, h, w = x.data.shape
    oh, ow = out_hw
    if (oh, ow) == (h, w):
        return x
    grid = _resize_grid(n, h, w, oh, ow, x.data.dtype)
    out, _ = bilinear_sample(x, grid)
    return out


def upsample_nearest2x(x):
    """Double NCHW spatial extents by pixel replication (cheap exact adjoint)."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    n, c, h, w = x.data.shape
    out_data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        x._accum(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return Tensor._from_op(out_data, (x,), backward, "upsample_nearest2x")
