"""Critic, classification, perceptual and identity objectives."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import functional as F
from .features import extract
from .tensor import Tensor, grad, mean, mul, power, tsum


@dataclass
class LossWeights:
    lambda_gp: float = 10.0
    lambda_1: float = 1.0
    lambda_2: float = 0.5
    lambda_identity: float = 10.0
    lambda_vgg: float = 0.5
    lambda_style_inner: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")


REPORT_FIELDS = (
    "d_adv", "gp", "d_cls1", "d_cls2", "d_total",
    "g_adv", "g_cls1", "g_cls2", "content", "style", "identity", "g_total",
)


@dataclass
class LossReport:
    d_adv: float = 0.0
    gp: float = 0.0
    d_cls1: float = 0.0
    d_cls2: float = 0.0
    d_total: float = 0.0
    g_adv: float = 0.0
    g_cls1: float = 0.0
    g_cls2: float = 0.0
    content: float = 0.0
    style: float = 0.0
    identity: float = 0.0
    g_total: float = 0.0

    def as_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# adversarial


def gradient_penalty(critic, real, fake, seed):
    """mean_i (||grad_x critic(x_i)||_2 - 1)^2 on random real/fake interpolants.

    ``critic`` maps a (B, ...) tensor to (B, 1) scores. The result stays in the
    graph, so it can be differentiated with respect to the critic parameters.
    """
    real_d = real.data if isinstance(real, Tensor) else np.asarray(real)
    fake_d = fake.data if isinstance(fake, Tensor) else np.asarray(fake)
    if real_d.shape != fake_d.shape:
        raise ValueError(f"real {real_d.shape} and fake {fake_d.shape} differ in shape")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    B = real_d.shape[0]
    t = rng.uniform(0.0, 1.0, size=(B,) + (1,) * (real_d.ndim - 1)).astype(real_d.dtype)
    x_hat = Tensor(t * real_d + (1 - t) * fake_d, requires_grad=True)
    scores = critic(x_hat)
    g = grad(tsum(scores), x_hat, create_graph=True)
    axes = tuple(range(1, g.ndim))
    # tiny floor keeps the norm differentiable at an exactly-zero gradient
    norms = power(tsum(mul(g, g), axes) + 1e-12, 0.5)
    dev = norms - 1.0
    return mean(mul(dev, dev))


def d_adversarial_loss(real_scores, fake_scores, gp, lambda_gp):
    """mean(fake) - mean(real) + lambda_gp * gp (minimized by the critic)."""
    loss = mean(fake_scores) - mean(real_scores)
    if isinstance(gp, Tensor):
        return loss + gp * lambda_gp
    return loss + float(gp) * lambda_gp


def g_adversarial_loss(fake_scores):
    return -mean(fake_scores)


def classification_loss(logits, labels):
    return F.softmax_cross_entropy(logits, labels)


# ---------------------------------------------------------------------------
# perceptual


def _style_distance(a, b, style_stat):
    if style_stat == "gram":
        d = F.gram_matrix(a) - F.gram_matrix(b)
        per = power(tsum(mul(d, d), (1, 2)) + 1e-12, 0.5)
        return mean(per)
    if style_stat == "meanstd":
        mu_a, mu_b = mean(a, (2, 3)), mean(b, (2, 3))
        sd_a = _channel_std(a, mu_a)
        sd_b = _channel_std(b, mu_b)
        dm, ds = mu_a - mu_b, sd_a - sd_b
        return mean(tsum(mul(dm, dm), 1) + tsum(mul(ds, ds), 1))
    raise ValueError(f"unknown style_stat {style_stat!r}")


def _channel_std(f, mu):
    centered = f - mu.reshape(mu.shape + (1, 1)).expand(f.shape)
    return power(mean(mul(centered, centered), (2, 3)) + 1e-8, 0.5)


def content_distance(fa, fb):
    """Per-sample Euclidean distance of feature maps, averaged over the batch."""
    d = fa - fb
    per = power(tsum(mul(d, d), (1, 2, 3)) + 1e-12, 0.5)
    return mean(per)


def perceptual_loss(fe, x_t, x_content, x_style, style_stat="gram",
                    content_feats=None, style_feats=None):
    """Return (content, style).

    Reference features are computed without gradient; only ``x_t`` is
    differentiated. Precomputed reference taps may be passed in.
    """
    from .tensor import no_grad

    taps_t = extract(fe, x_t)
    with no_grad():
        taps_c = content_feats if content_feats is not None else extract(fe, _const(x_content))
        taps_s = style_feats if style_feats is not None else extract(fe, _const(x_style))
    content = content_distance(taps_t[-1], taps_c[-1])
    style = _style_distance(taps_t[0], taps_s[0], style_stat)
    for a, b in zip(taps_t[1:], taps_s[1:]):
        style = style + _style_distance(a, b, style_stat)
    return content, style


def _const(x):
    return Tensor(x.data if isinstance(x, Tensor) else x)


# ---------------------------------------------------------------------------
# identity


def identity_loss(generator, x, labels, target_labels=None):
    """Mean L1 between ``x`` and its reconstruction routed src -> src.

    ``target_labels`` overrides the conditioning label (literal reading where
    the translation target is used).
    """
    x = _const(x)
    tgt = labels if target_labels is None else target_labels
    out = generator.translate(x, labels, tgt)
    return F.reduce(x - out, "l1_mean")


# ---------------------------------------------------------------------------
# totals


def total_d_loss(report, weights):
    return report.d_adv + weights.lambda_1 * report.d_cls1 + weights.lambda_2 * report.d_cls2


def total_g_loss(report, weights):
    return (
        report.g_adv
        + weights.lambda_1 * report.g_cls1
        + weights.lambda_2 * report.g_cls2
        + weights.lambda_identity * report.identity
        + weights.lambda_vgg * (report.content + weights.lambda_style_inner * report.style)
    )
