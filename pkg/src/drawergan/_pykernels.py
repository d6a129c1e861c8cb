"""Pure-numpy im2col / col2im, used when the compiled extension is missing."""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(x, k, stride, pad, dil, ho, wo):
    B, C, _, _ = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    sb, sc, sh, sw = xp.strides
    win = as_strided(
        xp,
        shape=(C, k, k, B, ho, wo),
        strides=(sc, sh * dil, sw * dil, sb, sh * stride, sw * stride),
        writeable=False,
    )
    return win.reshape(C * k * k, B * ho * wo)


def col2im(cols, B, C, H, W, k, stride, pad, dil, ho, wo):
    hp, wp = H + 2 * pad, W + 2 * pad
    xp = np.zeros((B, C, hp, wp), dtype=cols.dtype)
    c6 = cols.reshape(C, k, k, B, ho, wo).transpose(3, 0, 1, 2, 4, 5)
    ey = stride * (ho - 1) + 1
    ex = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            y0, x0 = i * dil, j * dil
            xp[:, :, y0:y0 + ey:stride, x0:x0 + ex:stride] += c6[:, :, i, j]
    if pad:
        return np.ascontiguousarray(xp[:, :, pad:pad + H, pad:pad + W])
    return xp
