import numpy as np
import pytest

from drawergan.tensor import float64_mode


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with float64_mode():
        yield


def naive_conv2d(x, w, stride=1, padding=0, dilation=1):
    """Direct nested-loop cross-correlation, the oracle for the conv kernels."""
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (H + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    wo = (W + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((B, O, ho, wo))
    for b in range(B):
        for o in range(O):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(C):
                        for u in range(k):
                            for v in range(k):
                                acc += (xp[b, c, i * stride + u * dilation, j * stride + v * dilation]
                                        * w[o, c, u, v])
                    out[b, o, i, j] = acc
    return out


def naive_conv_transpose2d(x, w, stride=1, padding=0):
    """Scatter oracle: every input pixel stamps the kernel into the output."""
    B, Cin, H, W = x.shape
    _, Cout, k, _ = w.shape
    full = np.zeros((B, Cout, (H - 1) * stride + k, (W - 1) * stride + k))
    for b in range(B):
        for c in range(Cin):
            for i in range(H):
                for j in range(W):
                    full[b, :, i * stride:i * stride + k, j * stride:j * stride + k] += x[b, c, i, j] * w[c]
    Ho, Wo = full.shape[2] - 2 * padding, full.shape[3] - 2 * padding
    return full[:, :, padding:padding + Ho, padding:padding + Wo]
