"""Drawer packing, the U-Net/ResNet generator and the dilated discriminator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .tensor import Tensor, gather_slots, scatter_slots


class ModelParams(dict):
    """Ordered name -> Tensor mapping with the seed it was drawn from."""

    def __init__(self, *args, seed=None, **kwargs):
        super().__init__(*args, **kwargs)
        self.seed = seed

    def add(self, name, data, requires_grad=True):
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        self[name] = Tensor(data, requires_grad=requires_grad, name=name)
        return self[name]

    def zero_grad(self):
        for t in self.values():
            t.grad = None

    def snapshot(self):
        return {k: v.data.copy() for k, v in self.items()}


def count_parameters(params):
    """Return (total, {name: count})."""
    breakdown = {name: int(np.prod(t.shape)) for name, t in params.items()}
    return sum(breakdown.values()), breakdown


def check_labels(labels, n):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if np.any(labels < 0) or np.any(labels >= n):
        raise ValueError(f"domain labels must lie in [0, {n}), got {labels.tolist()}")
    return labels


# ---------------------------------------------------------------------------
# drawers


@dataclass
class DrawerBatch:
    packed: Tensor
    src: np.ndarray
    tgt: np.ndarray | None = None


def drawer_pack(images, src, n, channels=None):
    """Write each image into the channel slot of its source domain.

    All other slots are zero, so they contribute nothing downstream.
    """
    if not isinstance(images, Tensor):
        images = Tensor(images)
    c = channels or images.shape[1]
    src = check_labels(src, n)
    if len(src) != images.shape[0]:
        raise ValueError(f"{images.shape[0]} images but {len(src)} source labels")
    if n == 1:
        return DrawerBatch(images, src)
    return DrawerBatch(scatter_slots(images, src * c, c * n), src)


def drawer_unpack(t_out, tgt, channels=3):
    """Select, per sample, the output slot of its target domain."""
    n = t_out.shape[1] // channels
    tgt = check_labels(tgt, n)
    if len(tgt) != t_out.shape[0]:
        raise ValueError(f"{t_out.shape[0]} samples but {len(tgt)} target labels")
    if n == 1:
        return t_out
    return gather_slots(t_out, tgt * channels, channels)


def target_condition_maps(tgt, n, h, w, dtype=None):
    """One-hot spatial maps (B, N, H, W): channel tgt[i] is all ones."""
    tgt = check_labels(tgt, n)
    maps = np.zeros((len(tgt), n, h, w), dtype=dtype or np.float32)
    maps[np.arange(len(tgt)), tgt] = 1.0
    return Tensor(maps)


# ---------------------------------------------------------------------------
# configs


@dataclass
class GeneratorConfig:
    image_size: int = 32
    num_domains: int = 3
    channels: int = 3
    base_width: int = 64
    res_stages: int = 3
    max_depth: int = 5
    use_drawer: bool = True
    init: str = "normal"

    @property
    def depth(self):
        return min(self.max_depth, int(math.log2(self.image_size)) - 2)

    @property
    def in_channels(self):
        c = self.channels * self.num_domains if self.use_drawer else self.channels
        return c + self.num_domains

    @property
    def out_channels(self):
        return self.channels * self.num_domains if self.use_drawer else self.channels

    def widths(self):
        return [self.base_width * 2 ** i for i in range(self.depth)]

    def validate(self):
        if self.image_size < 8 or self.image_size & (self.image_size - 1):
            raise F.GeometryError(f"image_size must be a power of two >= 8, got {self.image_size}")
        if self.image_size % 2 ** self.depth:
            raise F.GeometryError(f"image_size {self.image_size} not divisible by 2^{self.depth}")
        if self.num_domains < 1:
            raise ValueError("num_domains must be >= 1")


# widths of the six critic stages relative to base, as listed in the layer table
DISC_WIDTHS = (1, 2, 1, 4, 8, 16)


@dataclass
class DiscriminatorConfig:
    image_size: int = 32
    num_domains: int = 3
    channels: int = 3
    base_width: int = 64
    dilation_count: int = 3
    classifier_taps: tuple = (4, 6)
    fc_width: int | None = None
    width_multipliers: tuple = field(default=DISC_WIDTHS)
    init: str = "normal"

    @property
    def hidden(self):
        return self.fc_width if self.fc_width is not None else 16 * self.base_width

    def validate(self):
        if not 0 <= self.dilation_count <= 3:
            raise ValueError(f"dilation_count must be in [0, 3], got {self.dilation_count}")
        if self.image_size < 2 or self.image_size & (self.image_size - 1):
            raise F.GeometryError(f"image_size must be a power of two, got {self.image_size}")
        for tap in self.classifier_taps:
            if not 1 <= tap <= len(self.width_multipliers):
                raise ValueError(f"classifier tap {tap} outside 1..{len(self.width_multipliers)}")

    def stages(self):
        """Per-stage (cin, cout, k, stride, padding, dilation, out_size)."""
        out = []
        size, cin = self.image_size, self.channels
        dilated = set(range(3, 3 + self.dilation_count))
        for i, mult in enumerate(self.width_multipliers, start=1):
            d = 2 if i in dilated else 1
            if size >= 2:
                k, s = 4, 2
            else:
                k, s = 3, 1
            p = -(-(d * (k - 1) + 1 - s) // 2)
            size_out = F.conv_output_size(size, k, s, p, d)
            cout = self.base_width * mult
            out.append((cin, cout, k, s, p, d, size_out))
            size, cin = size_out, cout
        return out


def receptive_field(cfg):
    """Receptive field (pixels) of the final critic stage."""
    r, jump = 1, 1
    for _, _, k, s, _, d, _ in cfg.stages():
        r += (k - 1) * d * jump
        jump *= s
    return r


# ---------------------------------------------------------------------------
# parameter init


INIT_SCHEMES = ("normal", "fan_in")
LEAKY_GAIN = math.sqrt(2.0 / (1.0 + F.LEAKY_SLOPE ** 2))


def _normal(rng, shape, std=0.02):
    return rng.normal(0.0, std, size=shape).astype(np.float32)


def _weight(rng, shape, scheme, fan_in, gain=LEAKY_GAIN):
    """Normal(0, 0.02) for "normal"; Normal(0, gain / sqrt(fan_in)) for "fan_in"."""
    if scheme == "normal":
        return _normal(rng, shape)
    if scheme == "fan_in":
        return _normal(rng, shape, gain / math.sqrt(fan_in))
    raise ValueError(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")


def init_generator(cfg, seed):
    cfg.validate()
    rng = np.random.default_rng(seed)
    p = ModelParams(seed=seed)
    widths = cfg.widths()
    cin = cfg.in_channels
    for i, w in enumerate(widths, start=1):
        p.add(f"enc{i}.conv.w", _weight(rng, (w, cin, 4, 4), cfg.init, cin * 16))
        p.add(f"enc{i}.conv.b", np.zeros(w, np.float32))
        p.add(f"enc{i}.norm.g", np.ones(w, np.float32))
        p.add(f"enc{i}.norm.b", np.zeros(w, np.float32))
        if i <= cfg.res_stages:
            for j in (1, 2):
                p.add(f"enc{i}.res.conv{j}.w", _weight(rng, (w, w, 3, 3), cfg.init, w * 9))
                p.add(f"enc{i}.res.conv{j}.b", np.zeros(w, np.float32))
                p.add(f"enc{i}.res.norm{j}.g", np.ones(w, np.float32))
                p.add(f"enc{i}.res.norm{j}.b", np.zeros(w, np.float32))
        cin = w
    D = cfg.depth
    prev = 0
    for j in range(1, D + 1):
        w = widths[D - j]
        # stage j consumes the previous decoder output and the matching skip
        cin = widths[-1] if j == 1 else prev + widths[D - j]
        # a stride-2, 4x4 transposed conv feeds each output pixel from cin * 4 taps
        p.add(f"dec{j}.deconv.w", _weight(rng, (cin, w, 4, 4), cfg.init, cin * 4))
        p.add(f"dec{j}.deconv.b", np.zeros(w, np.float32))
        p.add(f"dec{j}.norm.g", np.ones(w, np.float32))
        p.add(f"dec{j}.norm.b", np.zeros(w, np.float32))
        prev = w
    cin = prev + cfg.in_channels
    p.add("out.deconv.w", _weight(rng, (cin, cfg.out_channels, 3, 3), cfg.init, cin * 9, 1.0))
    p.add("out.deconv.b", np.zeros(cfg.out_channels, np.float32))
    return p


def init_discriminator(cfg, seed):
    cfg.validate()
    rng = np.random.default_rng(seed)
    p = ModelParams(seed=seed)
    stages = cfg.stages()
    for i, (cin, cout, k, *_rest) in enumerate(stages, start=1):
        p.add(f"stage{i}.conv.w", _weight(rng, (cout, cin, k, k), cfg.init, cin * k * k))
        p.add(f"stage{i}.conv.b", np.zeros(cout, np.float32))
    final = stages[-1]
    flat = final[1] * final[6] * final[6]
    p.add("adv.fc1.w", _weight(rng, (flat, cfg.hidden), cfg.init, flat))
    p.add("adv.fc1.b", np.zeros(cfg.hidden, np.float32))
    p.add("adv.fc2.w", _weight(rng, (cfg.hidden, 1), cfg.init, cfg.hidden, 1.0))
    p.add("adv.fc2.b", np.zeros(1, np.float32))
    for h, tap in enumerate(cfg.classifier_taps, start=1):
        width = stages[tap - 1][1]
        p.add(f"cls{h}.fc1.w", _weight(rng, (width, cfg.hidden), cfg.init, width))
        p.add(f"cls{h}.fc1.b", np.zeros(cfg.hidden, np.float32))
        p.add(f"cls{h}.fc2.w", _weight(rng, (cfg.hidden, cfg.num_domains), cfg.init, cfg.hidden, 1.0))
        p.add(f"cls{h}.fc2.b", np.zeros(cfg.num_domains, np.float32))
    return p


def init_parameters(config, seed):
    if isinstance(config, GeneratorConfig):
        return init_generator(config, seed)
    if isinstance(config, DiscriminatorConfig):
        return init_discriminator(config, seed)
    raise TypeError(f"no initializer for {type(config).__name__}")


# ---------------------------------------------------------------------------
# forward passes


def _conv_in_act(p, prefix, x, stride, padding, act):
    h = F.conv2d(x, p[f"{prefix}.conv.w"], p[f"{prefix}.conv.b"], stride, padding)
    h = F.instance_norm(h, p[f"{prefix}.norm.g"], p[f"{prefix}.norm.b"])
    return F.activation(h, act)


def _residual(p, prefix, x):
    h = F.conv2d(x, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"], 1, 1)
    h = F.activation(F.instance_norm(h, p[f"{prefix}.norm1.g"], p[f"{prefix}.norm1.b"]), "relu")
    h = F.conv2d(h, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"], 1, 1)
    h = F.instance_norm(h, p[f"{prefix}.norm2.g"], p[f"{prefix}.norm2.b"])
    return x + h


def generator_forward(params, cfg, x):
    """Map (B, in_channels, H, W) to (B, out_channels, H, W) in [-1, 1]."""
    if x.shape[1] != cfg.in_channels or x.shape[2] != cfg.image_size:
        raise F.GeometryError(
            f"generator expects (B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}), "
            f"got {x.shape}"
        )
    skips = [x]
    h = x
    for i in range(1, cfg.depth + 1):
        h = _conv_in_act(params, f"enc{i}", h, 2, 1, "leaky_relu")
        if i <= cfg.res_stages:
            h = _residual(params, f"enc{i}.res", h)
        skips.append(h)
    D = cfg.depth
    for j in range(1, D + 1):
        if j > 1:
            h = F.concat_channels([h, skips[D - j + 1]])
        h = F.conv_transpose2d(h, params[f"dec{j}.deconv.w"], params[f"dec{j}.deconv.b"], 2, 1)
        h = F.instance_norm(h, params[f"dec{j}.norm.g"], params[f"dec{j}.norm.b"])
        h = F.activation(h, "relu")
    h = F.concat_channels([h, skips[0]])
    h = F.conv_transpose2d(h, params["out.deconv.w"], params["out.deconv.b"], 1, 1)
    return F.activation(h, "tanh")


def discriminator_forward(params, cfg, x):
    """Return (adv (B, 1), cls1 (B, N), cls2 (B, N)).

    The adversarial output is an unbounded critic score.
    """
    if x.shape[1] != cfg.channels or x.shape[2] != cfg.image_size:
        raise F.GeometryError(
            f"discriminator expects (B, {cfg.channels}, {cfg.image_size}, {cfg.image_size}), "
            f"got {x.shape}"
        )
    feats = []
    h = x
    for i, (_, _, _, s, p, d, _) in enumerate(cfg.stages(), start=1):
        h = F.conv2d(h, params[f"stage{i}.conv.w"], params[f"stage{i}.conv.b"], s, p, d)
        h = F.activation(h, "leaky_relu")
        feats.append(h)
    a = F.activation(F.fully_connected(F.flatten(h), params["adv.fc1.w"], params["adv.fc1.b"]),
                     "leaky_relu")
    adv = F.fully_connected(a, params["adv.fc2.w"], params["adv.fc2.b"])
    logits = []
    for k, tap in enumerate(cfg.classifier_taps, start=1):
        g = F.global_avg_pool(feats[tap - 1])
        g = F.activation(F.fully_connected(g, params[f"cls{k}.fc1.w"], params[f"cls{k}.fc1.b"]),
                         "leaky_relu")
        logits.append(F.fully_connected(g, params[f"cls{k}.fc2.w"], params[f"cls{k}.fc2.b"]))
    return (adv, *logits)


class Generator:
    def __init__(self, config, params=None, seed=0):
        self.config = config
        self.params = params if params is not None else init_generator(config, seed)

    def __call__(self, x):
        return generator_forward(self.params, self.config, x)

    def translate(self, images, src, tgt):
        """Full drawer pipeline: pack by src, condition on tgt, unpack tgt."""
        cfg = self.config
        if not isinstance(images, Tensor):
            images = Tensor(images)
        B, _, H, W = images.shape
        cond = target_condition_maps(tgt, cfg.num_domains, H, W, dtype=images.dtype)
        if cfg.use_drawer:
            packed = drawer_pack(images, src, cfg.num_domains).packed
            out = self(F.concat_channels([packed, cond]))
            return drawer_unpack(out, tgt, cfg.channels)
        check_labels(src, cfg.num_domains)
        return self(F.concat_channels([images, cond]))


class Discriminator:
    def __init__(self, config, params=None, seed=0):
        self.config = config
        self.params = params if params is not None else init_discriminator(config, seed)

    def __call__(self, x):
        return discriminator_forward(self.params, self.config, x)
