"""Grouped 2-D convolution kernels.

Convolutions are evaluated as patch-gather (im2col) followed by a batched
GEMM, one GEMM batch entry per channel group.  The gather and its
scatter-add adjoint (col2im) are the hot non-BLAS kernels; a compiled
Cython implementation is preferred and a pure-NumPy implementation is the
fallback.  Both produce bitwise-identical results (same copy layout, same
scatter accumulation order), so the backend choice never changes numbers.

Backend selection happens at import time and can be forced with the
environment variable SMOKESEG_KERNELS=compiled|python|auto.
"""

import os

import numpy as np

from . import python_backend

try:
    from . import _speedups
except ImportError:
    _speedups = None

_requested = os.environ.get("SMOKESEG_KERNELS", "auto")
if _requested not in ("auto", "compiled", "python"):
    raise RuntimeError(f"SMOKESEG_KERNELS must be auto|compiled|python, got {_requested!r}")
if _requested == "compiled" and _speedups is None:
    raise RuntimeError("SMOKESEG_KERNELS=compiled but the compiled extension is not built")

_backend = _speedups if (_speedups is not None and _requested != "python") else python_backend


def backend_name():
    """Name of the active kernel backend ('compiled' or 'python')."""
    return "compiled" if _backend is _speedups else "python"


def set_backend(name):
    """Switch backend at runtime (used by tests and benchmarks)."""
    global _backend
    if name == "python":
        _backend = python_backend
    elif name == "compiled":
        if _speedups is None:
            raise RuntimeError("compiled kernel extension is not available")
        _backend = _speedups
    else:
        raise ValueError(f"unknown backend {name!r}")


def compiled_available():
    return _speedups is not None


def _check_conv_args(x, w, bias, groups, stride, padding):
    if x.ndim != 4:
        raise ValueError(f"conv input must be 4-d (batch,h,w,c), got shape {x.shape}")
    if w.ndim != 4:
        raise ValueError(f"conv kernel must be 4-d (kh,kw,cin_per_group,cout), got {w.shape}")
    kh, kw, cin_g, cout = w.shape
    cin = x.shape[3]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel spatial extent must be odd, got {kh}x{kw}")
    if groups < 1 or cin % groups or cout % groups:
        raise ValueError(
            f"channel counts must divide by groups: cin={cin} cout={cout} groups={groups}"
        )
    if cin_g != cin // groups:
        raise ValueError(
            f"kernel expects {cin_g} input channels per group, input provides {cin // groups}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} does not match cout={cout}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")


def conv2d_forward(x, w, bias, groups=1, stride=1, padding=0):
    """Grouped convolution forward pass.

    x: (B,H,W,Cin) float64, w: (kh,kw,Cin/groups,Cout), bias: (Cout,) or None.
    Output channel block g depends only on input channel block g.
    Returns (y, cache) with y of shape (B,Ho,Wo,Cout).
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    _check_conv_args(x, w, bias, groups, stride, padding)
    batch, h, wid, cin = x.shape
    kh, kw, _, cout = w.shape
    hp, wp = h + 2 * padding, wid + 2 * padding
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {kh}x{kw} does not fit padded input {hp}x{wp}")

    if padding:
        xp = np.zeros((batch, hp, wp, cin))
        xp[:, padding:padding + h, padding:padding + wid, :] = x
    else:
        xp = x
    cols = _backend.im2col(xp, kh, kw, stride, ho, wo)  # (B*ho*wo, kh*kw*cin)

    npix = batch * ho * wo
    if groups == 1:
        y2 = cols @ w.reshape(kh * kw * cin, cout)
    else:
        cg, og = cin // groups, cout // groups
        colsg = (
            cols.reshape(npix, kh * kw, groups, cg)
            .transpose(2, 0, 1, 3)
            .reshape(groups, npix, kh * kw * cg)
        )
        wg = (
            w.reshape(kh, kw, cg, groups, og)
            .transpose(3, 0, 1, 2, 4)
            .reshape(groups, kh * kw * cg, og)
        )
        y2 = np.matmul(colsg, wg).transpose(1, 0, 2).reshape(npix, cout)
    y = y2.reshape(batch, ho, wo, cout)
    if bias is not None:
        y = y + bias
    cache = (cols, x.shape, w, groups, stride, padding, ho, wo, bias is not None)
    return y, cache


def conv2d_backward(gy, cache):
    """Gradients of conv2d_forward. Returns (gx, gw, gbias-or-None)."""
    cols, xshape, w, groups, stride, padding, ho, wo, has_bias = cache
    batch, h, wid, cin = xshape
    kh, kw, _, cout = w.shape
    gy = np.ascontiguousarray(gy, dtype=np.float64)
    npix = batch * ho * wo
    gy2 = gy.reshape(npix, cout)
    gbias = gy2.sum(axis=0) if has_bias else None

    if groups == 1:
        gw = (cols.T @ gy2).reshape(kh, kw, cin, cout)
        gcols = gy2 @ w.reshape(kh * kw * cin, cout).T
    else:
        cg, og = cin // groups, cout // groups
        colsg = (
            cols.reshape(npix, kh * kw, groups, cg)
            .transpose(2, 0, 1, 3)
            .reshape(groups, npix, kh * kw * cg)
        )
        wg = (
            w.reshape(kh, kw, cg, groups, og)
            .transpose(3, 0, 1, 2, 4)
            .reshape(groups, kh * kw * cg, og)
        )
        gyg = gy2.reshape(npix, groups, og).transpose(1, 0, 2)
        gwg = np.matmul(colsg.transpose(0, 2, 1), gyg)  # (G, kh*kw*cg, og)
        gw = (
            gwg.reshape(groups, kh, kw, cg, og)
            .transpose(1, 2, 3, 0, 4)
            .reshape(kh, kw, cg, cout)
        )
        gcolsg = np.matmul(gyg, wg.transpose(0, 2, 1))  # (G, npix, kh*kw*cg)
        gcols = (
            gcolsg.reshape(groups, npix, kh * kw, cg)
            .transpose(1, 2, 0, 3)
            .reshape(npix, kh * kw * cin)
        )
    gcols = np.ascontiguousarray(gcols)
    hp, wp = h + 2 * padding, wid + 2 * padding
    gxp = _backend.col2im(gcols, batch, hp, wp, cin, kh, kw, stride, ho, wo)
    if padding:
        gx = gxp[:, padding:padding + h, padding:padding + wid, :]
    else:
        gx = gxp
    return np.ascontiguousarray(gx), gw, gbias
