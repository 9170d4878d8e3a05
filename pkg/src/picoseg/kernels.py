"""Optimized numpy convolution/resize kernels and their exact adjoints.

These operate on raw numpy arrays (the layer classes unwrap and rewrap
``Tensor``).  Three cases are special-cased for speed:

* pointwise (1x1) convolutions become batched matmuls,
* pure depthwise convolutions (groups == Cin == Cout) use a
  shift-and-add over the K*K taps,
* everything else goes through a sliding-window im2col plus one matmul,
  with grouped convolutions looping over their groups.

The backward formulas are exact adjoints of the forward computations;
tests hold them against central finite differences and the loop
reference in :mod:`picoseg.tensor`.  All functions preserve the input
dtype, which is also how the integer inference path reuses them: int64
inputs run the same code with exact integer arithmetic.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import conv_out_size


def _pad2d(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Strided view (N, C, Hout, Wout, Kh, Kw) over a padded input."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    if stride > 1:
        win = win[:, :, ::stride, ::stride]
    return win


def _check_conv_args(x, w, stride, pad, groups):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need rank-4 input/weight, got {x.shape} and {w.shape}")
    n, cin, h, wdt = x.shape
    cout, cin_g, kh, kw = w.shape
    if stride < 1 or pad < 0 or groups < 1:
        raise ValueError(f"conv2d: bad stride={stride}/pad={pad}/groups={groups}")
    if cin % groups or cout % groups or cin_g != cin // groups:
        raise ShapeError(
            f"conv2d: input {x.shape} incompatible with weight {w.shape} at groups={groups}"
        )


def conv2d(
    x: np.ndarray,
    w: np.ndarray,
    bias: np.ndarray | None = None,
    stride: int = 1,
    pad: int = 0,
    groups: int = 1,
) -> np.ndarray:
    """Fast conv2d forward. Output shape (N, Cout, Hout, Wout)."""
    _check_conv_args(x, w, stride, pad, groups)
    n, cin, h, wdt = x.shape
    cout, cin_g, kh, kw = w.shape
    hout = conv_out_size(h, kh, stride, pad)
    wout = conv_out_size(wdt, kw, stride, pad)
    if hout < 1 or wout < 1:
        raise ShapeError(f"conv2d: empty output for input {x.shape} kernel {kh}x{kw}")

    if kh == 1 and kw == 1 and groups == 1 and pad == 0:
        xs = x[:, :, ::stride, ::stride] if stride > 1 else x
        x2 = np.ascontiguousarray(xs).reshape(n, cin, hout * wout)
        out = np.matmul(w.reshape(cout, cin)[None], x2)
        out = out.reshape(n, cout, hout, wout)
    elif groups == cin and cout == cin and cin_g == 1:
        xp = _pad2d(x, pad)
        hspan = (hout - 1) * stride + 1
        wspan = (wout - 1) * stride + 1
        out = np.zeros((n, cout, hout, wout), dtype=x.dtype)
        for ki in range(kh):
            for kj in range(kw):
                tap = xp[:, :, ki : ki + hspan : stride, kj : kj + wspan : stride]
                out += w[:, 0, ki, kj][None, :, None, None] * tap
    elif groups == 1:
        win = _windows(_pad2d(x, pad), kh, kw, stride)
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
            n, hout * wout, cin * kh * kw
        )
        out = np.matmul(cols, w.reshape(cout, -1).T)
        out = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(n, cout, hout, wout)
    else:
        cout_g = cout // groups
        out = np.empty((n, cout, hout, wout), dtype=x.dtype)
        for g in range(groups):
            xs = x[:, g * cin_g : (g + 1) * cin_g]
            ws = w[g * cout_g : (g + 1) * cout_g]
            out[:, g * cout_g : (g + 1) * cout_g] = conv2d(xs, ws, None, stride, pad, 1)

    if bias is not None:
        out += bias[None, :, None, None]
    return out


def _dilate(g: np.ndarray, stride: int) -> np.ndarray:
    """Insert stride-1 zeros between spatial elements of grad_out."""
    if stride == 1:
        return g
    n, c, h, w = g.shape
    out = np.zeros((n, c, (h - 1) * stride + 1, (w - 1) * stride + 1), dtype=g.dtype)
    out[:, :, ::stride, ::stride] = g
    return out


def conv2d_input_grad(
    grad_out: np.ndarray,
    w: np.ndarray,
    x_shape: tuple[int, ...],
    stride: int = 1,
    pad: int = 0,
    groups: int = 1,
) -> np.ndarray:
    """Adjoint of conv2d with respect to its input."""
    n, cin, h, wdt = x_shape
    cout, cin_g, kh, kw = w.shape
    _, _, hout, wout = grad_out.shape

    if kh == 1 and kw == 1 and groups == 1 and pad == 0:
        g2 = grad_out.reshape(n, cout, hout * wout)
        gx = np.matmul(w.reshape(cout, cin).T[None], g2).reshape(n, cin, hout, wout)
        if stride == 1:
            return gx
        full = np.zeros(x_shape, dtype=grad_out.dtype)
        full[:, :, ::stride, ::stride] = gx
        return full

    if groups == cin and cout == cin and cin_g == 1:
        gxp = np.zeros((n, cin, h + 2 * pad, wdt + 2 * pad), dtype=grad_out.dtype)
        hspan = (hout - 1) * stride + 1
        wspan = (wout - 1) * stride + 1
        for ki in range(kh):
            for kj in range(kw):
                gxp[:, :, ki : ki + hspan : stride, kj : kj + wspan : stride] += (
                    w[:, 0, ki, kj][None, :, None, None] * grad_out
                )
        return gxp[:, :, pad : pad + h, pad : pad + wdt]

    # General case: transposed convolution realized as a stride-1 conv of the
    # zero-dilated grad_out with the within-group-transposed, flipped weights.
    cout_g = cout // groups
    wt = w.reshape(groups, cout_g, cin_g, kh, kw)
    wt = wt.transpose(0, 2, 1, 3, 4)[:, :, :, ::-1, ::-1]
    wt = np.ascontiguousarray(wt.reshape(cin, cout_g, kh, kw))
    gd = _dilate(grad_out, stride)
    full = conv2d(gd, wt, None, stride=1, pad=kh - 1, groups=groups)
    gxp = np.zeros((n, cin, h + 2 * pad, wdt + 2 * pad), dtype=grad_out.dtype)
    gxp[:, :, : full.shape[2], : full.shape[3]] = full
    return gxp[:, :, pad : pad + h, pad : pad + wdt]


def conv2d_param_grad(
    grad_out: np.ndarray,
    x: np.ndarray,
    w_shape: tuple[int, ...],
    stride: int = 1,
    pad: int = 0,
    groups: int = 1,
    with_bias: bool = True,
):
    """Adjoint of conv2d with respect to weight (and bias)."""
    n, cin, h, wdt = x.shape
    cout, cin_g, kh, kw = w_shape
    _, _, hout, wout = grad_out.shape
    gb = grad_out.sum(axis=(0, 2, 3)) if with_bias else None

    if kh == 1 and kw == 1 and groups == 1 and pad == 0:
        xs = x[:, :, ::stride, ::stride] if stride > 1 else x
        x2 = np.ascontiguousarray(xs).reshape(n, cin, hout * wout)
        g2 = grad_out.reshape(n, cout, hout * wout)
        gw = np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0).reshape(w_shape)
        return gw, gb

    win = _windows(_pad2d(x, pad), kh, kw, stride)
    if groups == cin and cout == cin and cin_g == 1:
        gw = np.einsum("ncij,ncijkl->ckl", grad_out, win).reshape(w_shape)
        return gw, gb
    if groups == 1:
        gw = np.einsum("noij,ncijkl->ockl", grad_out, win, optimize=True)
        return gw, gb

    cout_g = cout // groups
    gw = np.empty(w_shape, dtype=grad_out.dtype)
    for g in range(groups):
        gs = grad_out[:, g * cout_g : (g + 1) * cout_g]
        ws = win[:, g * cin_g : (g + 1) * cin_g]
        gw[g * cout_g : (g + 1) * cout_g] = np.einsum(
            "noij,ncijkl->ockl", gs, ws, optimize=True
        )
    return gw, gb


def resize2x(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour 2x upsample of an NCHW array."""
    return x.repeat(2, axis=2).repeat(2, axis=3)


def resize2x_grad(grad_out: np.ndarray) -> np.ndarray:
    """Adjoint of resize2x: sum each 2x2 block."""
    n, c, h2, w2 = grad_out.shape
    return grad_out.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))
