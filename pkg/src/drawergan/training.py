"""Adam, the step learning-rate schedule and the alternating critic/generator loop."""

from __future__ import annotations

import dataclasses
import logging
import math
import os
from dataclasses import dataclass, fields

import numpy as np

from . import checkpoint as ckpt
from .data import SyntheticDataset, default_domains, make_batch, permute_targets
from .features import build_extractor, extract
from .functional import softmax_cross_entropy
from .losses import (
    LossReport,
    LossWeights,
    d_adversarial_loss,
    g_adversarial_loss,
    gradient_penalty,
    identity_loss,
    perceptual_loss,
)
from .model import (
    Discriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    INIT_SCHEMES,
)
from .tensor import Tensor, no_grad, take_rows

log = logging.getLogger(__name__)

STREAMS = {"data": 1, "init": 2, "perm": 3, "gp": 4, "batch": 5, "eval": 6}


def stream_seed(seed, name, *index):
    """Seed sequence for a named random substream."""
    return [int(seed), STREAMS[name], *(int(i) for i in index)]


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class ContractError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    total_iters: int = 3000
    batch_size: int = 16
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    decay_point: int = -1  # -1: half of total_iters
    decay_factor: float = 10.0
    d_lr_scale: float = 1.0  # critic lr = lr * d_lr_scale
    d_steps_per_g: int = 1
    seed: int = 17
    # loss weights
    lambda_gp: float = 10.0
    lambda_1: float = 1.0
    lambda_2: float = 0.5
    lambda_identity: float = 10.0
    lambda_vgg: float = 0.5
    lambda_style_inner: float = 1.0
    style_stat: str = "gram"
    cls_fake_to_d: bool = False
    identity_on_target: bool = False
    # models
    image_size: int = 32
    num_domains: int = 3
    g_base_width: int = 16
    d_base_width: int = 16
    res_stages: int = 3
    use_drawer: bool = True
    dilation_count: int = 3
    init: str = "normal"
    extractor_channels: str = "16,32,64,64,128,128"
    # data
    pool_per_domain: int = 512
    # output
    checkpoint_every: int = 500
    sample_every: int = 0

    def __post_init__(self):
        if self.decay_point < 0:
            self.decay_point = self.total_iters // 2
        if self.total_iters < 1:
            raise ConfigError("total_iters must be >= 1")
        if self.decay_point > self.total_iters:
            raise ConfigError("decay_point must be <= total_iters")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.d_lr_scale <= 0:
            raise ConfigError("d_lr_scale must be > 0")
        if self.d_steps_per_g < 1:
            raise ConfigError("d_steps_per_g must be >= 1")
        if self.style_stat not in ("gram", "meanstd"):
            raise ConfigError(f"style_stat must be gram or meanstd, got {self.style_stat!r}")
        if self.init not in INIT_SCHEMES:
            raise ConfigError(f"init must be one of {INIT_SCHEMES}, got {self.init!r}")

    @property
    def weights(self):
        return LossWeights(
            self.lambda_gp, self.lambda_1, self.lambda_2,
            self.lambda_identity, self.lambda_vgg, self.lambda_style_inner,
        )

    @property
    def generator_config(self):
        return GeneratorConfig(
            image_size=self.image_size, num_domains=self.num_domains,
            base_width=self.g_base_width, res_stages=self.res_stages,
            use_drawer=self.use_drawer, init=self.init,
        )

    @property
    def discriminator_config(self):
        return DiscriminatorConfig(
            image_size=self.image_size, num_domains=self.num_domains,
            base_width=self.d_base_width, dilation_count=self.dilation_count,
            init=self.init,
        )

    @property
    def extractor_widths(self):
        return tuple(int(c) for c in self.extractor_channels.split(","))

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}\n")
        return "".join(lines)


def _coerce(kind, raw, key, lineno):
    try:
        if kind in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value {raw!r} for {key}") from None


def parse_config(text):
    """Parse flat ``key=value`` text; unknown keys are errors."""
    known = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _coerce(known[key], raw, key, lineno)
    try:
        return TrainConfig(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(
            {k: np.zeros_like(p.data) for k, p in params.items() if p.requires_grad},
            {k: np.zeros_like(p.data) for k, p in params.items() if p.requires_grad},
        )


def adam_step(params, state, lr, beta1=0.5, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update of every trainable tensor, in place."""
    missing = [k for k in state.m if params[k].grad is None]
    if missing:
        raise ContractError(f"no gradient for parameters: {', '.join(missing[:5])}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for k, m in state.m.items():
        p = params[k]
        g = p.grad.data
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        step = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        p.data -= step.astype(p.data.dtype)
    return state


def lr_schedule(it, config):
    """Base rate before ``decay_point``, divided by ``decay_factor`` after."""
    if it < config.decay_point:
        return config.lr
    return config.lr / config.decay_factor


# ---------------------------------------------------------------------------
# training


def _finite(name, value):
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss term {name!r}: {value}")
    return value


class Trainer:
    """Models, optimizer states, frozen extractor and data for one run."""

    def __init__(self, config):
        self.config = config
        s = config.seed
        self.generator = Generator(config.generator_config, seed=stream_seed(s, "init", 0))
        self.discriminator = Discriminator(config.discriminator_config,
                                           seed=stream_seed(s, "init", 1))
        self.extractor = build_extractor(stream_seed(s, "init", 2), config.extractor_widths)
        self.dataset = SyntheticDataset(
            default_domains(config.num_domains), config.image_size,
            config.pool_per_domain, seed=stream_seed(s, "data"),
        )
        self.adam_g = AdamState.for_params(self.generator.params)
        self.adam_d = AdamState.for_params(self.discriminator.params)
        self.iteration = 0
        # scalars actually handed to backward in the last step
        self.last_backprop = (None, None)

    # -- checkpointing ------------------------------------------------------
    def state_tensors(self):
        out = {}
        for prefix, params, adam in (
            ("G", self.generator.params, self.adam_g),
            ("D", self.discriminator.params, self.adam_d),
        ):
            for k, p in params.items():
                out[f"{prefix}/{k}"] = p.data
            for k in adam.m:
                out[f"adam{prefix}/m/{k}"] = adam.m[k]
                out[f"adam{prefix}/v/{k}"] = adam.v[k]
            out[f"adam{prefix}/t"] = np.array([adam.t], dtype=np.float32)
        return out

    def load_state_tensors(self, tensors, iteration):
        expected = self.state_tensors()
        for name, arr in expected.items():
            if name not in tensors:
                raise ckpt.CheckpointFormatError(f"checkpoint lacks tensor {name!r}")
            if tensors[name].shape != arr.shape:
                raise ckpt.CheckpointFormatError(
                    f"tensor {name!r} has shape {tensors[name].shape}, expected {arr.shape}"
                )
        for prefix, params, adam in (
            ("G", self.generator.params, self.adam_g),
            ("D", self.discriminator.params, self.adam_d),
        ):
            for k, p in params.items():
                p.data = tensors[f"{prefix}/{k}"].copy()
            for k in adam.m:
                adam.m[k] = tensors[f"adam{prefix}/m/{k}"].copy()
                adam.v[k] = tensors[f"adam{prefix}/v/{k}"].copy()
            adam.t = int(tensors[f"adam{prefix}/t"][0])
        self.iteration = int(iteration)

    def save(self, path):
        ckpt.save_tensors(path, self.state_tensors(), self.iteration)

    def load(self, path):
        it, tensors = ckpt.load_container(path)
        self.load_state_tensors(tensors, it)

    # -- one iteration -------------------------------------------------------
    def batch(self, it, k=0):
        images, src = make_batch(self.dataset, self.config.batch_size,
                                 stream_seed(self.config.seed, "batch", it, k))
        tgt, perm = permute_targets(src, stream_seed(self.config.seed, "perm", it, k))
        return images, src, tgt, perm

    def step(self):
        report = train_step(self, self.iteration)
        self.iteration += 1
        return report


def _set_trainable(params, flag):
    for p in params.values():
        p.requires_grad = flag


def train_step(trainer, it):
    """One critic update followed by one generator update; returns the report."""
    cfg = trainer.config
    w = cfg.weights
    G, D, fe = trainer.generator, trainer.discriminator, trainer.extractor
    lr = lr_schedule(it, cfg)
    report = LossReport()

    for k in range(cfg.d_steps_per_g):
        images, src, tgt, _ = trainer.batch(it, k)
        x = Tensor(images)
        with no_grad():
            fake = G.translate(x, src, tgt).detach()
        adv_r, c1_r, c2_r = D(x)
        adv_f, c1_f, c2_f = D(fake)
        gp = gradient_penalty(lambda z: D(z)[0], x, fake, stream_seed(cfg.seed, "gp", it, k))
        d_adv = d_adversarial_loss(adv_r, adv_f, gp, w.lambda_gp)
        d_cls1 = softmax_cross_entropy(c1_r, src)
        d_cls2 = softmax_cross_entropy(c2_r, src)
        if cfg.cls_fake_to_d:
            d_cls1 = d_cls1 + softmax_cross_entropy(c1_f, tgt)
            d_cls2 = d_cls2 + softmax_cross_entropy(c2_f, tgt)
        d_total = d_adv + d_cls1 * w.lambda_1 + d_cls2 * w.lambda_2
        report.d_adv = _finite("d_adv", d_adv.item())
        report.gp = _finite("gp", gp.item())
        report.d_cls1 = _finite("d_cls1", d_cls1.item())
        report.d_cls2 = _finite("d_cls2", d_cls2.item())
        report.d_total = _finite("d_total", d_total.item())
        D.params.zero_grad()
        G.params.zero_grad()
        d_total.backward()
        trainer.adam_d = adam_step(D.params, trainer.adam_d, lr * cfg.d_lr_scale,
                                   cfg.beta1, cfg.beta2, cfg.adam_eps)

    images, src, tgt, perm = trainer.batch(it, 0)
    x = Tensor(images)
    _set_trainable(D.params, False)
    try:
        fake = G.translate(x, src, tgt)
        adv_f, c1_f, c2_f = D(fake)
        g_adv = g_adversarial_loss(adv_f)
        g_cls1 = softmax_cross_entropy(c1_f, tgt)
        g_cls2 = softmax_cross_entropy(c2_f, tgt)
        with no_grad():
            content_taps = extract(fe, x)
            style_taps = tuple(take_rows(t, perm) for t in content_taps)
        content, style = perceptual_loss(fe, fake, x, None, cfg.style_stat,
                                         content_feats=content_taps, style_feats=style_taps)
        ident = identity_loss(G, x, src, tgt if cfg.identity_on_target else None)
        g_total = (
            g_adv + g_cls1 * w.lambda_1 + g_cls2 * w.lambda_2
            + ident * w.lambda_identity
            + (content + style * w.lambda_style_inner) * w.lambda_vgg
        )
        report.g_adv = _finite("g_adv", g_adv.item())
        report.g_cls1 = _finite("g_cls1", g_cls1.item())
        report.g_cls2 = _finite("g_cls2", g_cls2.item())
        report.content = _finite("content", content.item())
        report.style = _finite("style", style.item())
        report.identity = _finite("identity", ident.item())
        report.g_total = _finite("g_total", g_total.item())
        G.params.zero_grad()
        D.params.zero_grad()
        # backward runs while D is frozen so no gradient reaches its parameters
        g_total.backward()
    finally:
        _set_trainable(D.params, True)
    trainer.adam_g = adam_step(G.params, trainer.adam_g, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    trainer.last_backprop = (report.d_total, report.g_total)
    return report


LOG_COLUMNS = ("d_adv", "gp", "d_cls1", "d_cls2", "g_adv", "g_cls1", "g_cls2",
               "content", "style", "identity", "g_total")


def format_log_line(it, report, lr):
    vals = [f"{getattr(report, c):.9g}" for c in LOG_COLUMNS]
    return "\t".join([str(it), *vals, f"{lr:.9g}"]) + "\n"


CONFIG_NAME = "config.cfg"
LOG_NAME = "train.log"
LATEST = "latest.ckpt"


def train(config, out_dir, resume=None, stop_at=None, on_sample=None):
    """Run (or resume) training, writing log, checkpoints and samples to ``out_dir``.

    ``stop_at`` ends the run early after that many completed iterations
    (used to simulate interruption). Returns the final checkpoint path.
    """
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, CONFIG_NAME), "w") as fh:
        fh.write(config.to_text())
    trainer = Trainer(config)
    log_path = os.path.join(out_dir, LOG_NAME)
    if resume:
        trainer.load(resume)
        _truncate_log(log_path, trainer.iteration)
        mode = "a"
    else:
        mode = "w"
    end = config.total_iters if stop_at is None else min(stop_at, config.total_iters)
    last = None
    with open(log_path, mode) as logf:
        while trainer.iteration < end:
            it = trainer.iteration
            report = trainer.step()
            logf.write(format_log_line(it, report, lr_schedule(it, config)))
            logf.flush()
            done = trainer.iteration
            if config.checkpoint_every and done % config.checkpoint_every == 0:
                last = _checkpoint(trainer, out_dir)
            if config.sample_every and done % config.sample_every == 0:
                _samples(trainer, out_dir, done, on_sample)
    if last is None or trainer.iteration % max(config.checkpoint_every, 1):
        last = _checkpoint(trainer, out_dir)
    return last, trainer


def _checkpoint(trainer, out_dir):
    path = os.path.join(out_dir, f"ckpt_{trainer.iteration:07d}.ckpt")
    trainer.save(path)
    trainer.save(os.path.join(out_dir, LATEST))
    log.info("checkpoint %s", path)
    return path


def _truncate_log(path, iterations):
    """Keep only the first ``iterations`` lines so a resumed log has no duplicates."""
    if not os.path.exists(path):
        return
    with open(path) as fh:
        lines = fh.readlines()
    with open(path, "w") as fh:
        fh.writelines(lines[:iterations])


def _samples(trainer, out_dir, done, callback=None):
    from .evaluation import translation_grid

    path = os.path.join(out_dir, f"samples_{done:07d}.png")
    translation_grid(trainer.generator, trainer.dataset, path, seed=trainer.config.seed)
    if callback is not None:
        callback(path)


def build_trainer_from_checkpoint(ckpt_path, config=None):
    """Rebuild a trainer from a checkpoint, reading config.cfg beside it."""
    if config is None:
        cfg_path = os.path.join(os.path.dirname(os.path.abspath(ckpt_path)), CONFIG_NAME)
        if not os.path.exists(cfg_path):
            raise ConfigError(f"no {CONFIG_NAME} next to checkpoint {ckpt_path}")
        config = load_config(cfg_path)
    trainer = Trainer(config)
    trainer.load(ckpt_path)
    return trainer
