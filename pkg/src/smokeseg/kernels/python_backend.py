"""Pure-NumPy patch gather/scatter used when the compiled extension is absent."""

import numpy as np


def im2col(xp, kh, kw, stride, ho, wo):
    """Gather kh*kw patches from padded (B,Hp,Wp,C) into (B*ho*wo, kh*kw*C)."""
    batch, _, _, c = xp.shape
    sb, sh, sw, sc = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(batch, ho, wo, kh, kw, c),
        strides=(sb, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(batch * ho * wo, kh * kw * c)


def col2im(cols, batch, hp, wp, c, kh, kw, stride, ho, wo):
    """Scatter-add adjoint of im2col, back into a zeroed (B,Hp,Wp,C) array.

    Accumulates one (kh,kw) offset at a time; the compiled backend follows
    the same order so both produce bitwise-identical sums.
    """
    out = np.zeros((batch, hp, wp, c))
    cols6 = cols.reshape(batch, ho, wo, kh, kw, c)
    he = ho * stride
    we = wo * stride
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + he:stride, j:j + we:stride, :] += cols6[:, :, :, i, j, :]
    return out
