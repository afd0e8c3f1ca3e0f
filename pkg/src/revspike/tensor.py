"""Dense float32 tensor kernels.

Every kernel is a pure function over numpy arrays in NCHW layout. There is
no automatic differentiation here: the training engine composes the forward
kernels with the adjoint kernels (``*_input_grad`` / ``*_weight_grad``)
explicitly. All kernels validate operand shapes and raise ``ShapeError`` on
mismatch; the only implicit broadcasting allowed anywhere is scalar-times-
tensor.

Convolutions are implemented with im2col + matmul, which is deterministic
and fast enough for desk-scale experiments.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

__all__ = [
    "ShapeError",
    "active_dtype",
    "precision",
    "as_f32",
    "conv2d",
    "conv2d_input_grad",
    "conv2d_weight_grad",
    "dwconv2d",
    "dwconv2d_input_grad",
    "dwconv2d_weight_grad",
    "pwconv2d",
    "pwconv2d_input_grad",
    "pwconv2d_weight_grad",
    "linear",
    "linear_input_grad",
    "linear_weight_grad",
    "resize_nearest",
    "resize_nearest_grad",
    "channel_align",
    "channel_align_grad",
    "global_avg_pool",
    "global_avg_pool_grad",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with a kernel."""


_ACTIVE = {"dtype": np.float32}


def active_dtype():
    """Dtype every kernel computes in. float32 unless overridden by :func:`precision`."""
    return _ACTIVE["dtype"]


@contextmanager
def precision(dtype):
    """Temporarily switch all kernels to ``dtype``.

    Training runs in single precision; finite-difference gradient validation
    needs float64 because the difference quotient at h = 1e-3 sits below
    float32 loss resolution.
    """
    prev = _ACTIVE["dtype"]
    _ACTIVE["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _ACTIVE["dtype"] = prev


def as_f32(x) -> np.ndarray:
    """Return ``x`` as a contiguous array in the active precision (row-major)."""
    return np.ascontiguousarray(x, dtype=active_dtype())


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def _out_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: int):
    _require(stride >= 1, f"stride must be >= 1, got {stride}")
    _require(padding >= 0, f"padding must be >= 0, got {padding}")
    _require(
        kh <= h + 2 * padding and kw <= w + 2 * padding,
        f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}",
    )
    ho, rh = divmod(h + 2 * padding - kh, stride)
    wo, rw = divmod(w + 2 * padding - kw, stride)
    _require(rh == 0 and rw == 0, "non-integer convolution output size")
    return ho + 1, wo + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """[N,C,H,W] -> [N, C, kh, kw, Ho, Wo] patch view (copied, contiguous)."""
    n, c, h, w = x.shape
    ho, wo = _out_hw(h, w, kh, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    # win: [N, C, Hp-kh+1, Wp-kw+1, kh, kw] -> subsample stride, move taps forward
    win = win[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))


def _col2im(cols: np.ndarray, hw, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add [N,C,kh,kw,Ho,Wo] back to [N,C,H,W]."""
    n, c = cols.shape[:2]
    h, w = hw
    ho, wo = cols.shape[4:]
    hp, wp = h + 2 * padding, w + 2 * padding
    out = np.zeros((n, c, hp, wp), dtype=active_dtype())
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# Dense convolution
# ---------------------------------------------------------------------------


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation of ``x``[N,Cin,H,W] with ``w``[Cout,Cin,kh,kw]."""
    x, w = as_f32(x), as_f32(w)
    _require(x.ndim == 4, f"conv2d input must be 4-D, got shape {x.shape}")
    _require(w.ndim == 4, f"conv2d weight must be 4-D, got shape {w.shape}")
    _require(x.shape[1] == w.shape[1], f"channel mismatch: input {x.shape} vs weight {w.shape}")
    n = x.shape[0]
    cout, cin, kh, kw = w.shape
    ho, wo = _out_hw(x.shape[2], x.shape[3], kh, kw, stride, padding)
    cols = _im2col(x, kh, kw, stride, padding).reshape(n, cin * kh * kw, ho * wo)
    out = np.matmul(w.reshape(cout, cin * kh * kw), cols)
    return np.ascontiguousarray(out.reshape(n, cout, ho, wo))


def conv2d_input_grad(w: np.ndarray, dout: np.ndarray, input_hw, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Gradient of conv2d w.r.t. its input; ``input_hw`` is the original (H, W)."""
    w, dout = as_f32(w), as_f32(dout)
    n = dout.shape[0]
    cout, cin, kh, kw = w.shape
    _require(dout.shape[1] == cout, f"channel mismatch: dout {dout.shape} vs weight {w.shape}")
    ho, wo = dout.shape[2:]
    dcols = np.matmul(w.reshape(cout, -1).T, dout.reshape(n, cout, ho * wo))
    dcols = dcols.reshape(n, cin, kh, kw, ho, wo)
    return _col2im(dcols, input_hw, kh, kw, stride, padding)


def conv2d_weight_grad(x: np.ndarray, dout: np.ndarray, kernel_hw, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Gradient of conv2d w.r.t. its weight [Cout,Cin,kh,kw]."""
    x, dout = as_f32(x), as_f32(dout)
    kh, kw = kernel_hw
    n, cin = x.shape[:2]
    cout = dout.shape[1]
    ho, wo = dout.shape[2:]
    cols = _im2col(x, kh, kw, stride, padding).reshape(n, cin * kh * kw, ho * wo)
    dw = np.einsum("nop,ncp->oc", dout.reshape(n, cout, ho * wo), cols, optimize=True)
    return np.ascontiguousarray(dw.reshape(cout, cin, kh, kw).astype(active_dtype()))


# ---------------------------------------------------------------------------
# Depthwise / pointwise convolution
# ---------------------------------------------------------------------------


def dwconv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Per-channel (depthwise) convolution, weight shape [C,1,kh,kw]."""
    x, w = as_f32(x), as_f32(w)
    _require(x.ndim == 4 and w.ndim == 4, "dwconv2d expects 4-D operands")
    _require(w.shape[1] == 1, f"depthwise weight must have shape [C,1,kh,kw], got {w.shape}")
    _require(x.shape[1] == w.shape[0], f"channel mismatch: input {x.shape} vs weight {w.shape}")
    c, _, kh, kw = w.shape
    cols = _im2col(x, kh, kw, stride, padding)  # [N,C,kh,kw,Ho,Wo]
    out = np.einsum("nckuhw,cku->nchw", cols, w[:, 0], optimize=True)
    return np.ascontiguousarray(out.astype(active_dtype()))


def dwconv2d_input_grad(w: np.ndarray, dout: np.ndarray, input_hw, stride: int = 1, padding: int = 0) -> np.ndarray:
    w, dout = as_f32(w), as_f32(dout)
    c, _, kh, kw = w.shape
    dcols = np.einsum("nchw,cku->nckuhw", dout, w[:, 0], optimize=True)
    return _col2im(dcols, input_hw, kh, kw, stride, padding)


def dwconv2d_weight_grad(x: np.ndarray, dout: np.ndarray, kernel_hw, stride: int = 1, padding: int = 0) -> np.ndarray:
    x, dout = as_f32(x), as_f32(dout)
    kh, kw = kernel_hw
    cols = _im2col(x, kh, kw, stride, padding)
    dw = np.einsum("nchw,nckuhw->cku", dout, cols, optimize=True)
    return np.ascontiguousarray(dw[:, None].astype(active_dtype()))


def pwconv2d(x: np.ndarray, w: np.ndarray, stride: int = 1) -> np.ndarray:
    """1x1 convolution: per-pixel linear map over channels, weight [Cout,Cin,1,1].

    A stride > 1 subsamples the input grid before the channel mix, which is
    exactly a strided 1x1 convolution.
    """
    x, w = as_f32(x), as_f32(w)
    _require(x.ndim == 4 and w.ndim == 4, "pwconv2d expects 4-D operands")
    _require(w.shape[2:] == (1, 1), f"pointwise weight must be [Cout,Cin,1,1], got {w.shape}")
    _require(x.shape[1] == w.shape[1], f"channel mismatch: input {x.shape} vs weight {w.shape}")
    if stride > 1:
        x = x[:, :, ::stride, ::stride]
    out = np.einsum("oc,nchw->nohw", w[:, :, 0, 0], x, optimize=True)
    return np.ascontiguousarray(out.astype(active_dtype()))


def pwconv2d_input_grad(w: np.ndarray, dout: np.ndarray, input_hw, stride: int = 1) -> np.ndarray:
    w, dout = as_f32(w), as_f32(dout)
    dx_sub = np.einsum("oc,nohw->nchw", w[:, :, 0, 0], dout, optimize=True).astype(active_dtype())
    if stride == 1:
        return np.ascontiguousarray(dx_sub)
    n, c = dx_sub.shape[:2]
    dx = np.zeros((n, c, *input_hw), dtype=active_dtype())
    dx[:, :, ::stride, ::stride] = dx_sub
    return dx


def pwconv2d_weight_grad(x: np.ndarray, dout: np.ndarray, stride: int = 1) -> np.ndarray:
    x, dout = as_f32(x), as_f32(dout)
    if stride > 1:
        x = x[:, :, ::stride, ::stride]
    dw = np.einsum("nohw,nchw->oc", dout, x, optimize=True)
    return np.ascontiguousarray(dw[:, :, None, None].astype(active_dtype()))


# ---------------------------------------------------------------------------
# Fully connected
# ---------------------------------------------------------------------------


def linear(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x``[N,F] times ``w``[O,F] transposed -> [N,O]."""
    x, w = as_f32(x), as_f32(w)
    _require(x.ndim == 2 and w.ndim == 2, "linear expects 2-D operands")
    _require(x.shape[1] == w.shape[1], f"feature mismatch: input {x.shape} vs weight {w.shape}")
    return np.ascontiguousarray(x @ w.T)


def linear_input_grad(w: np.ndarray, dout: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(as_f32(dout) @ as_f32(w))


def linear_weight_grad(x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(as_f32(dout).T @ as_f32(x))


# ---------------------------------------------------------------------------
# Spatial / channel alignment, pooling
# ---------------------------------------------------------------------------


def _nearest_index(out_size: int, in_size: int) -> np.ndarray:
    return (np.arange(out_size) * in_size) // out_size


def resize_nearest(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize with index map floor(i * H / outH)."""
    x = as_f32(x)
    _require(x.ndim == 4, f"resize_nearest expects 4-D input, got {x.shape}")
    _require(out_h >= 1 and out_w >= 1, "output size must be positive")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return x.copy()
    rows = _nearest_index(out_h, h)
    cols = _nearest_index(out_w, w)
    return np.ascontiguousarray(x[:, :, rows][:, :, :, cols])


def resize_nearest_grad(dout: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Adjoint of resize_nearest: scatter-add back onto the source grid."""
    dout = as_f32(dout)
    n, c, oh, ow = dout.shape
    rows = _nearest_index(oh, in_h)
    cols = _nearest_index(ow, in_w)
    dx = np.zeros((n, c, in_h, in_w), dtype=active_dtype())
    flat = rows[:, None] * in_w + cols[None, :]
    np.add.at(dx.reshape(n, c, in_h * in_w), (slice(None), slice(None), flat.ravel()),
              dout.reshape(n, c, oh * ow))
    return dx


def channel_align(x: np.ndarray, c_out: int) -> np.ndarray:
    """Repeat channels (Cout = k*Cin) or average channel groups (Cin = k*Cout)."""
    x = as_f32(x)
    _require(x.ndim == 4, f"channel_align expects 4-D input, got {x.shape}")
    c_in = x.shape[1]
    if c_out == c_in:
        return x.copy()
    if c_out > c_in:
        _require(c_out % c_in == 0, f"cannot repeat {c_in} channels into {c_out}")
        return np.ascontiguousarray(np.repeat(x, c_out // c_in, axis=1))
    _require(c_in % c_out == 0, f"cannot average {c_in} channels into {c_out}")
    k = c_in // c_out
    n, _, h, w = x.shape
    return np.ascontiguousarray(x.reshape(n, c_out, k, h, w).mean(axis=2, dtype=active_dtype()))


def channel_align_grad(dout: np.ndarray, c_in: int) -> np.ndarray:
    """Adjoint of channel_align for an input with ``c_in`` channels."""
    dout = as_f32(dout)
    c_out = dout.shape[1]
    if c_out == c_in:
        return dout.copy()
    n, _, h, w = dout.shape
    if c_out > c_in:
        k = c_out // c_in
        return np.ascontiguousarray(dout.reshape(n, c_in, k, h, w).sum(axis=2, dtype=active_dtype()))
    k = c_in // c_out
    return np.ascontiguousarray(np.repeat(dout / active_dtype()(k), k, axis=1))


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """[N,C,H,W] -> [N,C] spatial mean."""
    x = as_f32(x)
    _require(x.ndim == 4, f"global_avg_pool expects 4-D input, got {x.shape}")
    return np.ascontiguousarray(x.mean(axis=(2, 3), dtype=active_dtype()))


def global_avg_pool_grad(dout: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    dout = as_f32(dout)
    scale = active_dtype()(1.0 / (in_h * in_w))
    return np.ascontiguousarray(
        np.broadcast_to((dout * scale)[:, :, None, None], (*dout.shape, in_h, in_w)).astype(active_dtype())
    )
