"""Dense NCHW float32 tensors and the numerical kernels built on them.

A tensor here is simply a 4-D ``numpy.ndarray`` of dtype float32 laid out as
(batch, channel, height, width), C-contiguous.  Every kernel accumulates in
float64 and rounds the result back to float32, so outputs are deterministic
and reductions stay accurate enough for conservation checks.

Convolution is cross-correlation (no kernel flip) with zero padding.
Max-pool ties go to the first element of a row-major window scan.
"""

import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (BadMagicError, ConfigurationError, FormatError, NonFiniteError, ShapeError,
                     TruncatedError)

FVT_MAGIC = b"FVT1"


def as_tensor(data, *, check_finite=True):
    """Coerce ``data`` to a contiguous float32 NCHW array.

    Arrays with fewer than four dimensions are left-padded with singleton
    axes, so ``[[1, 2], [3, 4]]`` becomes a 1x1x2x2 tensor.
    """
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim > 4:
        raise ShapeError(f"tensor must have at most 4 dimensions, got {arr.ndim}")
    while arr.ndim < 4:
        arr = arr[np.newaxis]
    if check_finite and not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf")
    return np.ascontiguousarray(arr)


def _pair(v, name):
    if np.isscalar(v):
        v = (int(v), int(v))
    v = tuple(int(a) for a in v)
    if len(v) != 2:
        raise ConfigurationError(f"{name} must be an int or a pair, got {v!r}")
    return v


def _out_extent(size, window, stride, pad, axis):
    span = size + 2 * pad - window
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1 along {axis}, got {stride}")
    if window < 1:
        raise ConfigurationError(f"window must be >= 1 along {axis}, got {window}")
    if span < 0:
        raise ConfigurationError(
            f"window {window} does not fit extent {size} (+2*{pad} padding) along {axis}")
    if span % stride:
        raise ConfigurationError(
            f"({size} + 2*{pad} - {window}) / {stride} + 1 is not an integer along {axis}")
    return span // stride + 1


def conv_output_hw(hw, kernel_hw, stride=1, pad=0):
    """Output (height, width) of a convolution or pooling window sweep."""
    sy, sx = _pair(stride, "stride")
    py, px = _pair(pad, "pad")
    kh, kw = _pair(kernel_hw, "window")
    return (_out_extent(hw[0], kh, sy, py, "height"),
            _out_extent(hw[1], kw, sx, px, "width"))


def _check_kernel(input_channels, kernel):
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be 4-D (k_out, c_in, kh, kw), got shape {kernel.shape}")
    if kernel.shape[1] != input_channels:
        raise ShapeError(
            f"input has {input_channels} channels but kernel expects {kernel.shape[1]}")


def _conv_forward64(x, kernel, bias, stride, pad):
    """Cross-correlation in float64. ``x`` and ``kernel`` may be any float dtype."""
    sy, sx = stride
    py, px = pad
    kh, kw = kernel.shape[2:]
    oh, ow = conv_output_hw(x.shape[2:], (kh, kw), stride, pad)
    xp = np.pad(np.asarray(x, dtype=np.float64), ((0, 0), (0, 0), (py, py), (px, px)))
    # windows: (n, c, oh, ow, kh, kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sy, ::sx][:, :, :oh, :ow]
    out = np.tensordot(win, np.asarray(kernel, dtype=np.float64), axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64).reshape(1, -1, 1, 1)
    return out


def _conv_adjoint64(kernel, upstream, input_shape, stride, pad):
    """Adjoint of the bias-free cross-correlation with respect to its input, in float64."""
    sy, sx = stride
    py, px = pad
    n, c, h, w = input_shape
    kh, kw = kernel.shape[2:]
    oh, ow = upstream.shape[2:]
    g = np.asarray(upstream, dtype=np.float64)
    k = np.asarray(kernel, dtype=np.float64)
    acc = np.zeros((n, c, h + 2 * py, w + 2 * px))
    for i in range(kh):
        for j in range(kw):
            # (n, k_out, oh, ow) x (k_out, c) -> (n, c, oh, ow)
            contrib = np.tensordot(g, k[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            acc[:, :, i:i + sy * (oh - 1) + 1:sy, j:j + sx * (ow - 1) + 1:sx] += contrib
    return acc[:, :, py:py + h, px:px + w]


def conv2d(x, kernel, bias=None, stride=1, pad=0):
    """Zero-padded 2-D cross-correlation.

    ``kernel`` has shape (k_out, c_in, kh, kw); ``bias`` has length k_out or
    is None.  Returns a tensor of shape (n, k_out, oh, ow).
    """
    x = as_tensor(x)
    kernel = np.asarray(kernel, dtype=np.float32)
    _check_kernel(x.shape[1], kernel)
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float32).reshape(-1)
        if bias.shape[0] != kernel.shape[0]:
            raise ShapeError(f"bias length {bias.shape[0]} != kernel count {kernel.shape[0]}")
    stride, pad = _pair(stride, "stride"), _pair(pad, "pad")
    return _conv_forward64(x, kernel, bias, stride, pad).astype(np.float32)


def conv2d_input_grad(kernel, upstream, input_shape, stride=1, pad=0):
    """Gradient of ``sum(conv2d(x, kernel) * upstream)`` with respect to ``x``.

    This is the transposed convolution used by every gradient-style backward
    pass; the bias does not enter it.
    """
    kernel = np.asarray(kernel, dtype=np.float32)
    upstream = as_tensor(upstream)
    input_shape = tuple(int(s) for s in input_shape)
    if len(input_shape) != 4:
        raise ShapeError(f"input_shape must have 4 extents, got {input_shape}")
    _check_kernel(input_shape[1], kernel)
    stride, pad = _pair(stride, "stride"), _pair(pad, "pad")
    oh, ow = conv_output_hw(input_shape[2:], kernel.shape[2:], stride, pad)
    expected = (input_shape[0], kernel.shape[0], oh, ow)
    if upstream.shape != expected:
        raise ShapeError(f"upstream shape {upstream.shape} != forward output shape {expected}")
    return _conv_adjoint64(kernel, upstream, input_shape, stride, pad).astype(np.float32)


def maxpool(x, window, stride=None):
    """Max-pool over ``window`` and return ``(values, switches)``.

    ``switches`` has the output's shape and holds, for each output element,
    the flat index ``y * width + x`` of the winning element inside its input
    plane.  Ties resolve to the first element in row-major window order.
    """
    x = as_tensor(x)
    kh, kw = _pair(window, "window")
    sy, sx = _pair(stride if stride is not None else (kh, kw), "stride")
    n, c, h, w = x.shape
    oh, ow = conv_output_hw((h, w), (kh, kw), (sy, sx), 0)
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sy, ::sx][:, :, :oh, :ow]
    flat = win.reshape(n, c, oh, ow, kh * kw)
    arg = np.argmax(flat, axis=-1)
    values = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    dy, dx = np.divmod(arg, kw)
    rows = np.arange(oh).reshape(1, 1, oh, 1) * sy + dy
    cols = np.arange(ow).reshape(1, 1, 1, ow) * sx + dx
    switches = (rows * w + cols).astype(np.int64)
    return np.ascontiguousarray(values, dtype=np.float32), switches


def maxunpool(upstream, switches, input_shape):
    """Scatter ``upstream`` to the positions recorded in ``switches``.

    Values landing on the same input element (overlapping windows) are summed;
    every other position is zero.
    """
    upstream = as_tensor(upstream)
    switches = np.asarray(switches)
    if upstream.shape != switches.shape:
        raise ShapeError(f"upstream shape {upstream.shape} != switches shape {switches.shape}")
    n, c, h, w = (int(s) for s in input_shape)
    if upstream.shape[:2] != (n, c):
        raise ShapeError(f"upstream batch/channels {upstream.shape[:2]} != input {(n, c)}")
    if switches.size and (switches.min() < 0 or switches.max() >= h * w):
        raise AssertionError("switch index outside the input plane")
    out = np.zeros((n * c, h * w))
    planes = np.repeat(np.arange(n * c), switches[0, 0].size if switches.size else 0)
    np.add.at(out, (planes, switches.reshape(-1)), upstream.reshape(-1).astype(np.float64))
    return out.reshape(n, c, h, w).astype(np.float32)


def _pool_geometry(hw, window, stride, global_pool):
    if global_pool:
        return tuple(hw), tuple(hw)
    if window is None:
        raise ConfigurationError("avgpool needs a window unless global_pool is set")
    kh, kw = _pair(window, "window")
    return (kh, kw), _pair(stride if stride is not None else (kh, kw), "stride")


def _avgpool64(x, window, stride):
    kh, kw = window
    sy, sx = stride
    oh, ow = conv_output_hw(x.shape[2:], window, stride, 0)
    win = sliding_window_view(np.asarray(x, dtype=np.float64), (kh, kw), axis=(2, 3))
    return win[:, :, ::sy, ::sx][:, :, :oh, :ow].mean(axis=(4, 5))


def _avgpool_adjoint64(upstream, window, stride, input_shape):
    n, c, h, w = input_shape
    kh, kw = window
    sy, sx = stride
    oh, ow = conv_output_hw((h, w), window, stride, 0)
    if upstream.shape != (n, c, oh, ow):
        raise ShapeError(f"upstream shape {upstream.shape} != pooled shape {(n, c, oh, ow)}")
    g = np.asarray(upstream, dtype=np.float64) / (kh * kw)
    acc = np.zeros((n, c, h, w))
    for i in range(kh):
        for j in range(kw):
            acc[:, :, i:i + sy * (oh - 1) + 1:sy, j:j + sx * (ow - 1) + 1:sx] += g
    return acc


def avgpool(x, window=None, stride=None, global_pool=False):
    """Mean over each window; ``global_pool`` averages each whole channel plane."""
    x = as_tensor(x)
    window, stride = _pool_geometry(x.shape[2:], window, stride, global_pool)
    return _avgpool64(x, window, stride).astype(np.float32)


def avgpool_backward(upstream, window, stride, input_shape, global_pool=False):
    """Spread each upstream value uniformly over its window (divided by window size)."""
    upstream = as_tensor(upstream)
    input_shape = tuple(int(s) for s in input_shape)
    window, stride = _pool_geometry(input_shape[2:], window, stride, global_pool)
    return _avgpool_adjoint64(upstream, window, stride, input_shape).astype(np.float32)


def relu(x):
    return np.maximum(as_tensor(x), np.float32(0))


def save_fvt(tensor):
    """Encode a tensor as ``FVT1`` + four u32 extents + little-endian float32 data."""
    t = as_tensor(tensor, check_finite=False)
    return FVT_MAGIC + struct.pack("<4I", *t.shape) + t.astype("<f4").tobytes()


def load_fvt(blob):
    blob = bytes(blob)
    if blob[:4] != FVT_MAGIC:
        raise BadMagicError(f"expected magic {FVT_MAGIC!r}, got {blob[:4]!r}")
    if len(blob) < 20:
        raise TruncatedError("header shorter than 20 bytes")
    shape = struct.unpack("<4I", blob[4:20])
    count = int(np.prod(shape, dtype=np.int64))
    payload = blob[20:]
    if len(payload) < 4 * count:
        raise TruncatedError(f"expected {4 * count} payload bytes, got {len(payload)}")
    if len(payload) > 4 * count:
        raise FormatError(f"{len(payload) - 4 * count} trailing bytes after tensor data")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    return np.ascontiguousarray(data)
