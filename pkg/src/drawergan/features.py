"""Frozen random convolutional feature extractor used for perceptual losses.

Six conv blocks (3x3 conv, instance norm, ReLU) with 2x average pooling
between them. Taps sit after blocks 2, 3 and 4; the deepest tap doubles as
the content feature. Blocks 5 and 6 have no consumer in ``extract``.
"""

from __future__ import annotations

import numpy as np

from . import functional as F
from .model import ModelParams
from .tensor import Tensor, no_grad

DEFAULT_CHANNELS = (16, 32, 64, 64, 128, 128)
TAPS = (2, 3, 4)
NUM_BLOCKS = 6


class FeatureExtractor:
    """Frozen conv stack. ``stats`` (optional) holds calibrated per-block
    (mean, std) used in place of instance normalization."""

    def __init__(self, params, channels, seed, stats=None):
        self.params = params
        self.channels = tuple(channels)
        self.seed = seed
        self.stats = stats

    def extract(self, x):
        return extract(self, x)

    @property
    def feature_dim(self):
        return self.channels[TAPS[-1] - 1]


def _block_widths(channels):
    channels = list(channels)
    if len(channels) < 3:
        raise ValueError("extractor needs at least 3 channel widths")
    return channels + [channels[-1]] * (NUM_BLOCKS - len(channels))


def build_extractor(seed=0, channels=DEFAULT_CHANNELS, in_channels=3):
    """He-normal weights drawn from ``seed``, then frozen."""
    widths = _block_widths(channels)[:NUM_BLOCKS]
    rng = np.random.default_rng(seed)
    p = ModelParams(seed=seed)
    cin = in_channels
    for i, w in enumerate(widths, start=1):
        std = np.sqrt(2.0 / (cin * 9))
        p.add(f"block{i}.conv.w", rng.normal(0.0, std, (w, cin, 3, 3)).astype(np.float32),
              requires_grad=False)
        p.add(f"block{i}.conv.b", np.zeros(w, np.float32), requires_grad=False)
        cin = w
    return FeatureExtractor(p, widths, seed)


def extract(fe, x):
    """Return the three tap activations at halving resolutions."""
    H, W = x.shape[2:]
    if H < 16 or W < 16:
        raise F.GeometryError(f"extractor input must be at least 16x16, got {H}x{W}")
    taps = []
    h = x
    for i in range(1, TAPS[-1] + 1):
        if i > 1:
            h = F.avg_pool2(h)
        p = fe.params
        w, b = p[f"block{i}.conv.w"], p[f"block{i}.conv.b"]
        if w.dtype != h.dtype:
            w, b = type(w)(w.data.astype(h.dtype)), type(b)(b.data.astype(h.dtype))
        h = F.conv2d(h, w, b, 1, 1)
        h = F.activation(_normalize(fe, i, h), "relu")
        if i in TAPS:
            taps.append(h)
    return tuple(taps)


def _normalize(fe, block, h):
    if fe.stats is None:
        return F.instance_norm(h)
    mu, sd = fe.stats[block]
    shift = F.add_bias(h, Tensor(-mu.astype(h.dtype)))
    return F.channel_scale(shift, Tensor((1.0 / sd).astype(h.dtype)))


def calibrate(fe, images, chunk=128):
    """Copy of ``fe`` normalizing each block with population statistics of ``images``.

    Statistics are gathered block by block, so each block sees inputs already
    normalized by the calibrated blocks before it.
    """
    images = np.asarray(images, dtype=np.float32)
    stats = {}
    for block in range(1, TAPS[-1] + 1):
        probe = FeatureExtractor(fe.params, fe.channels, fe.seed, stats)
        total, sq, count = 0.0, 0.0, 0
        for i in range(0, len(images), chunk):
            with no_grad():
                h = _pre_norm(probe, Tensor(images[i:i + chunk]), block).data.astype(np.float64)
            total = total + h.sum(axis=(0, 2, 3))
            sq = sq + (h * h).sum(axis=(0, 2, 3))
            count += h.shape[0] * h.shape[2] * h.shape[3]
        mu = total / count
        sd = np.sqrt(np.maximum(sq / count - mu * mu, 0.0) + F.NORM_EPS)
        stats[block] = (mu, sd)
    return FeatureExtractor(fe.params, fe.channels, fe.seed, stats)


def _pre_norm(fe, x, block):
    """Conv output of ``block`` before normalization."""
    h = x
    p = fe.params
    for i in range(1, block + 1):
        if i > 1:
            h = F.avg_pool2(h)
        h = F.conv2d(h, p[f"block{i}.conv.w"], p[f"block{i}.conv.b"], 1, 1)
        if i < block:
            h = F.activation(_normalize(fe, i, h), "relu")
    return h


def import_weights(fe, path):
    """Load extractor weights from a checkpoint container; stays frozen.

    Every tensor must be present with a matching shape; on any mismatch
    nothing is modified.
    """
    from .checkpoint import CheckpointFormatError, load_tensors

    tensors = load_tensors(path)
    new = ModelParams(seed=fe.seed)
    for name, t in fe.params.items():
        if name not in tensors:
            raise CheckpointFormatError(f"checkpoint lacks extractor tensor {name!r}")
        arr = tensors[name]
        if arr.shape != t.shape:
            raise CheckpointFormatError(
                f"tensor {name!r} has shape {arr.shape}, extractor expects {t.shape}"
            )
        new.add(name, arr, requires_grad=False)
    return FeatureExtractor(new, fe.channels, fe.seed)


def export_weights(fe, path):
    from .checkpoint import save_tensors

    save_tensors(path, {k: v.data for k, v in fe.params.items()}, iteration=0)
