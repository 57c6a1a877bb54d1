"""Deformable convolution: offset prediction, bilinear sampling and the offset-shifted conv.

Offset fields are [B, 2*kh*kw, Ho, Wo] with tap-major channel pairs: channel
``2*k`` is the row displacement and ``2*k + 1`` the column displacement of tap
``k = i*kw + j``, in input pixels.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .nn import Module, kaiming_uniform
from .tensor import Parameter, Tensor, make_op


def bilinear_sample(feature: np.ndarray, y: float, x: float) -> float:
    """Sample one 2-D plane at a real-valued position; outside the grid reads as zero."""
    h, w = feature.shape
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    total = 0.0
    for yy in (y0, y0 + 1):
        for xx in (x0, x0 + 1):
            if 0 <= yy < h and 0 <= xx < w:
                weight = (1.0 - abs(y - yy)) * (1.0 - abs(x - xx))
                total += weight * float(feature[yy, xx])
    return total


class BilinearGather:
    """Bilinear reads of a row table at many real positions, as a sparse linear map.

    Point ``p`` reads rows ``base[p] + (y*W + x)*step`` of a [N, D] table for the
    (up to four) in-bounds integer corners around ``(py[p], px[p])``.  The same
    sparsity pattern carries the derivative weights with respect to ``py`` and
    ``px`` so the backward is three sparse products.
    """

    def __init__(self, py: np.ndarray, px: np.ndarray, height: int, width: int,
                 base: np.ndarray, step: int, table_rows: int, dtype=None):
        dtype = np.result_type(py, px) if dtype is None else dtype
        py, px, base = (a.ravel() for a in np.broadcast_arrays(py, px, base))
        n = py.size
        y0 = np.floor(py)
        x0 = np.floor(px)
        ly, lx = py - y0, px - x0
        y0 = y0.astype(np.int64)
        x0 = x0.astype(np.int64)
        rows, cols, w, wy, wx = [], [], [], [], []
        point = np.arange(n)
        for dy, fy, gy in ((0, 1 - ly, -1.0), (1, ly, 1.0)):
            for dx, fx, gx in ((0, 1 - lx, -1.0), (1, lx, 1.0)):
                yy, xx = y0 + dy, x0 + dx
                ok = (yy >= 0) & (yy < height) & (xx >= 0) & (xx < width)
                rows.append(point[ok])
                cols.append(base[ok] + (yy[ok] * width + xx[ok]) * step)
                w.append((fy * fx)[ok])
                wy.append((gy * fx)[ok])
                wx.append((fy * gx)[ok])
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        shape = (n, table_rows)
        self.matrix = sp.csr_matrix((np.concatenate(w).astype(dtype), (rows, cols)), shape=shape)
        self.d_y = sp.csr_matrix((np.concatenate(wy).astype(dtype), (rows, cols)), shape=shape)
        self.d_x = sp.csr_matrix((np.concatenate(wx).astype(dtype), (rows, cols)), shape=shape)

    def forward(self, table: np.ndarray) -> np.ndarray:
        return np.asarray(self.matrix @ table)

    def backward(self, grad: np.ndarray, table: np.ndarray):
        """Gradients with respect to the table and to the (py, px) positions."""
        g_table = np.asarray(self.matrix.T @ grad)
        g_y = (grad * np.asarray(self.d_y @ table)).sum(axis=1)
        g_x = (grad * np.asarray(self.d_x @ table)).sum(axis=1)
        return g_table, g_y, g_x


def _sampling_positions(offsets: np.ndarray, kh: int, kw: int, stride: int, padding: int,
                        dilation: int):
    """Absolute (row, col) positions [B, Ho, Wo, K] of every tap."""
    b, _, ho, wo = offsets.shape
    k = kh * kw
    off = offsets.reshape(b, k, 2, ho, wo).transpose(0, 3, 4, 1, 2)  # [B, Ho, Wo, K, 2]
    ti, tj = np.divmod(np.arange(k), kw)
    gy = (np.arange(ho) * stride - padding)[:, None, None] + (ti * dilation)[None, None, :]
    gx = (np.arange(wo) * stride - padding)[None, :, None] + (tj * dilation)[None, None, :]
    return gy[None] + off[..., 0], gx[None] + off[..., 1]


def deform_conv2d_forward(x: np.ndarray, offsets: np.ndarray, weight: np.ndarray,
                          bias: np.ndarray | None, stride: int = 1, padding: int = 0,
                          dilation: int = 1):
    """y(p0) = sum_n w(p_n) * x(p0 + p_n + dp_n), with bilinear reads of x."""
    if x.ndim != 4:
        raise T.ShapeError(f"deform_conv2d expects rank-4 input, got shape {x.shape}")
    b, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if cw != c:
        raise T.ShapeError(f"deform_conv2d: input channels {c} != weight in-channels {cw}")
    ho = T.conv_output_size(h, kh, stride, padding, dilation)
    wo = T.conv_output_size(w, kw, stride, padding, dilation)
    if offsets.shape != (b, 2 * kh * kw, ho, wo):
        raise T.ShapeError(f"deform_conv2d: offset field {offsets.shape} != "
                           f"{(b, 2 * kh * kw, ho, wo)}")
    k = kh * kw
    py, px = _sampling_positions(offsets, kh, kw, stride, padding, dilation)
    base = (np.arange(b) * h * w)[:, None, None, None]
    gather = BilinearGather(py, px, h, w, base, 1, b * h * w, x.dtype)
    table = x.transpose(0, 2, 3, 1).reshape(b * h * w, c)
    sampled = gather.forward(table)  # [B*Ho*Wo*K, C]
    cols = sampled.reshape(b * ho * wo, k, c).transpose(0, 2, 1).reshape(b * ho * wo, c * k)
    out = cols @ weight.reshape(o, -1).T
    if bias is not None:
        out += bias
    out = out.reshape(b, ho, wo, o).transpose(0, 3, 1, 2)
    return out, (gather, table, cols)


def deform_conv2d_backward(grad_out: np.ndarray, cache, x_shape, weight: np.ndarray):
    """Gradients (input, offsets, weight, bias) of :func:`deform_conv2d_forward`."""
    gather, table, cols = cache
    b, c, h, w = x_shape
    o, _, kh, kw = weight.shape
    k = kh * kw
    _, _, ho, wo = grad_out.shape
    g2 = grad_out.transpose(0, 2, 3, 1).reshape(-1, o)
    gw = (g2.T @ cols).reshape(weight.shape)
    gb = g2.sum(axis=0)
    gcols = g2 @ weight.reshape(o, -1)
    gsampled = gcols.reshape(-1, c, k).transpose(0, 2, 1).reshape(-1, c)
    g_table, g_y, g_x = gather.backward(gsampled, table)
    gx = g_table.reshape(b, h, w, c).transpose(0, 3, 1, 2)
    goff = np.stack([g_y.reshape(b, ho, wo, k), g_x.reshape(b, ho, wo, k)], axis=-1)
    goff = goff.transpose(0, 3, 4, 1, 2).reshape(b, 2 * k, ho, wo)
    return gx, goff.astype(grad_out.dtype), gw, gb


def deform_conv2d_op(x: Tensor, offsets: Tensor, weight: Tensor, bias: Tensor | None,
                     stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    out, cache = deform_conv2d_forward(x.data, offsets.data, weight.data,
                                       None if bias is None else bias.data,
                                       stride, padding, dilation)

    def backward(g):
        return deform_conv2d_backward(g, cache, x.shape, weight.data)

    parents = (x, offsets, weight) if bias is None else (x, offsets, weight, bias)
    return make_op(out, parents, backward)


class DeformConv2d(Module):
    """Main convolution weights plus a parallel standard conv that predicts the offsets.

    The offset predictor starts at zero, so a fresh layer is an ordinary convolution.
    """

    def __init__(self, rng, cin: int, cout: int, kernel: int = 3, stride: int = 1,
                 padding: int = 1, dilation: int = 1, bias: bool = True):
        fan_in = cin * kernel * kernel
        self.weight = Parameter(kaiming_uniform(rng, (cout, cin, kernel, kernel), fan_in, np.sqrt(2.0)))
        self.bias = Parameter(np.zeros(cout)) if bias else None
        self.offset_weight = Parameter(np.zeros((2 * kernel * kernel, cin, kernel, kernel)))
        self.offset_bias = Parameter(np.zeros(2 * kernel * kernel))
        self.stride, self.padding, self.dilation = stride, padding, dilation

    def forward(self, x: Tensor) -> Tensor:
        return deform_conv2d(x, self)


def predict_offsets(x: Tensor, layer: DeformConv2d) -> Tensor:
    return T.conv2d(x, layer.offset_weight, layer.offset_bias, layer.stride, layer.padding,
                    layer.dilation)


def deform_conv2d(x: Tensor, layer: DeformConv2d, offsets: Tensor | None = None) -> Tensor:
    """Deformable convolution; offsets default to the layer's own prediction from ``x``."""
    if offsets is None:
        offsets = predict_offsets(x, layer)
    return deform_conv2d_op(x, offsets, layer.weight, layer.bias, layer.stride, layer.padding,
                            layer.dilation)
