"""2-D cross-correlation (conv2d) with exact analytic gradients.

Forward uses an im2col view plus one matmul.  The input gradient is computed
as a stride-1 correlation of the zero-dilated output gradient with the
flipped, channel-swapped kernel; the kernel gradient reuses im2col.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, is_grad_enabled


def _out_extent(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """(N,C,H,W) -> (N, C*kh*kw, OH*OW) patch matrix."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = _out_extent(h, kh, stride, padding)
    ow = _out_extent(w, kw, stride, padding)
    sn, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return view.reshape(n, c * kh * kw, oh * ow), oh, ow


def _corr2d_data(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    o, ci, kh, kw = w.shape
    cols, oh, ow = _im2col(x, kh, kw, stride, padding)
    out = np.matmul(w.reshape(o, ci * kh * kw), cols)
    return out.reshape(x.shape[0], o, oh, ow)


def conv2d(x, w, stride: int = 1, padding: int = 0):
    """Cross-correlate NCHW input with an OIKK kernel.

    Output spatial extent is floor((n + 2*padding - k)/stride) + 1 per axis.
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if not isinstance(w, Tensor):
        w = Tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OIKK kernel")
    n, c, h, width = x.data.shape
    o, ci, kh, kw = w.data.shape
    if ci != c:
        raise ValueError(f"kernel expects {ci} input channels, input has {c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel side must be odd")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if kh > h + 2 * padding or kw > width + 2 * padding:
        raise ValueError("kernel larger than padded input")

    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    out_data = np.matmul(w.data.reshape(o, ci * kh * kw), cols).reshape(n, o, oh, ow)
    # keep the patch matrix for the kernel gradient only when one is coming
    saved_cols = cols if (w.requires_grad and is_grad_enabled()) else None

    def backward(g):
        if x.requires_grad:
            # dilate the output gradient back onto the strided input lattice
            gd_h = (oh - 1) * stride + 1
            gd_w = (ow - 1) * stride + 1
            extra_h = h + 2 * padding - kh - (oh - 1) * stride
            extra_w = width + 2 * padding - kw - (ow - 1) * stride
            gd = np.zeros((n, o, gd_h + extra_h, gd_w + extra_w), dtype=g.dtype)
            gd[:, :, 0:gd_h:stride, 0:gd_w:stride] = g
            w_rot = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx_pad = _corr2d_data(gd, np.ascontiguousarray(w_rot), 1, kh - 1)
            x._accum(gx_pad[:, :, padding:padding + h, padding:padding + width])
        if w.requires_grad:
            gw = np.matmul(g.reshape(n, o, oh * ow),
                           saved_cols.transpose(0, 2, 1)).sum(axis=0)
            w._accum(gw.reshape(o, c, kh, kw))

    return Tensor._from_op(out_data, (x, w), backward, "conv2d")


def _box_valid(x, window: int):
    """Valid-mode uniform window mean via shifted adds (no patch matrix)."""
    k = window
    n, c, hp, wp = x.data.shape
    oh, ow = hp - k + 1, wp - k + 1
    inv = 1.0 / (k * k)
    xd = x.data
    out_data = np.zeros((n, c, oh, ow), dtype=xd.dtype)
    for u in range(k):
        for v in range(k):
            out_data += xd[:, :, u:u + oh, v:v + ow]
    out_data *= inv

    def backward(g):
        # adjoint of a window sum is the window sum of the zero-padded grad
        gp = np.zeros((n, c, oh + 2 * (k - 1), ow + 2 * (k - 1)), dtype=g.dtype)
        gp[:, :, k - 1:k - 1 + oh, k - 1:k - 1 + ow] = g
        dx = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for u in range(k):
            for v in range(k):
                dx += gp[:, :, u:u + hp, v:v + wp]
        dx *= inv
        x._accum(dx)

    return Tensor._from_op(out_data, (x,), backward, "box_filter")


def box_filter(x, window: int, pad_mode: str = "edge"):
    """Per-channel uniform window mean, same spatial size as the input."""
    from .tensor import pad2d

    if not isinstance(x, Tensor):
        x = Tensor(x)
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and >= 1")
    if window == 1:
        return x
    half = window // 2
    return _box_valid(pad2d(x, (half, half, half, half), mode=pad_mode), window)
