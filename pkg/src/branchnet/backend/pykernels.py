"""Pure-numpy implementations of the hot kernels.

This is the fallback backend used when the compiled extension is not
available. Every function here has a signature-identical twin in
``_kernels.pyx``; ``tests/test_backend.py`` checks they agree.

Layout conventions: images and feature maps are (B, C, H, W) row-major,
patch matrices are (B*OH*OW, C*k*k) so a convolution is a single GEMM
against a (C*k*k, F) weight matrix.
"""

import numpy as np

NAME = "python"


def im2col(x, k, stride):
    """Extract k x k patches from an already-padded (B,C,H,W) array.

    Returns a (B*OH*OW, C*k*k) matrix whose rows are flattened patches.
    """
    b, c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    cols = np.empty((b, oh, ow, c, k, k), dtype=x.dtype)
    for i in range(k):
        hi = i + stride * oh
        for j in range(k):
            wj = j + stride * ow
            # (B,C,OH,OW) strided view -> (B,OH,OW,C) slot
            cols[:, :, :, :, i, j] = x[:, :, i:hi:stride, j:wj:stride].transpose(0, 2, 3, 1)
    return cols.reshape(b * oh * ow, c * k * k)


def col2im(cols, b, c, h, w, k, stride):
    """Scatter-add patch gradients back onto a zeroed (B,C,H,W) array.

    Inverse of :func:`im2col` in the adjoint sense: overlapping patch
    positions accumulate.
    """
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    cols = cols.reshape(b, oh, ow, c, k, k)
    x = np.zeros((b, c, h, w), dtype=cols.dtype)
    for i in range(k):
        hi = i + stride * oh
        for j in range(k):
            wj = j + stride * ow
            x[:, :, i:hi:stride, j:wj:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return x


def maxpool2_forward(x):
    """2x2 max pooling with stride 2; odd trailing row/column dropped.

    Returns (out, idx) where idx in {0,1,2,3} is the row-major position of
    the window maximum (first occurrence wins, making backward
    deterministic under ties).
    """
    b, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    win = x[:, :, : 2 * oh, : 2 * ow].reshape(b, c, oh, 2, ow, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh, ow, 4)
    idx = win.argmax(axis=4).astype(np.uint8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=4)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2_backward(dout, idx, h, w):
    """Route each output gradient to its window's argmax position."""
    b, c, oh, ow = dout.shape
    dwin = np.zeros((b, c, oh, ow, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None].astype(np.intp), dout[..., None], axis=4)
    dx = np.zeros((b, c, h, w), dtype=dout.dtype)
    dwin = dwin.reshape(b, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    dx[:, :, : 2 * oh, : 2 * ow] = dwin.reshape(b, c, 2 * oh, 2 * ow)
    return dx


def bilinear_warp(src, m00, m01, m02, m10, m11, m12):
    """Inverse-mapped affine resampling of a (C,H,W) image.

    For output pixel (r, c) the source location is
    ``(m00*r + m01*c + m02, m10*r + m11*c + m12)``; sampling is bilinear
    with edge-replicate behaviour (coordinates clamped to the image).
    """
    ch, h, w = src.shape
    r = np.arange(h, dtype=np.float64)[:, None]
    c = np.arange(w, dtype=np.float64)[None, :]
    sr = np.clip(m00 * r + m01 * c + m02, 0.0, h - 1.0)
    sc = np.clip(m10 * r + m11 * c + m12, 0.0, w - 1.0)
    r0 = np.floor(sr).astype(np.intp)
    c0 = np.floor(sc).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (sr - r0).astype(src.dtype)
    fc = (sc - c0).astype(src.dtype)
    out = np.empty_like(src)
    for ci in range(ch):
        plane = src[ci]
        top = plane[r0, c0] * (1 - fc) + plane[r0, c1] * fc
        bot = plane[r1, c0] * (1 - fc) + plane[r1, c1] * fc
        out[ci] = top * (1 - fr) + bot * fr
    return out
