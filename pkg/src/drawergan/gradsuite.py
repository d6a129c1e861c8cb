"""Named finite-difference cases covering every differentiable operator.

Each case builds a scalar function of one array input. Multi-input operators
get one case per differentiated argument, with the other arguments held fixed.
Scalars are formed as a weighted sum against a fixed random tensor so every
output coordinate contributes to the check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from . import tensor as T
from .gradcheck import finite_diff_check
from .losses import content_distance, gradient_penalty, _style_distance
from .model import drawer_pack, drawer_unpack
from .tensor import Tensor

TOLERANCE = 1e-4
SECOND_ORDER_TOLERANCE = 1e-3


@dataclass
class CaseResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self):
        return bool(np.isfinite(self.error) and self.error < self.tolerance)


def _arr(rng, *shape, low=None):
    a = rng.normal(size=shape)
    if low is not None:
        a = np.abs(a) + low
    return a


def _unary(op, shape, positive=False):
    def build(rng):
        x = _arr(rng, *shape, low=0.5 if positive else None)
        r = rng.normal(size=op(Tensor(x)).shape)
        return lambda t: T.tsum(T.mul(op(t), Tensor(r))), x
    return build


def _binary(op, shape_a, shape_b, which):
    def build(rng):
        a, b = _arr(rng, *shape_a), _arr(rng, *shape_b)
        r = rng.normal(size=op(Tensor(a), Tensor(b)).shape)
        if which == 0:
            return lambda t: T.tsum(T.mul(op(t, Tensor(b)), Tensor(r))), a
        return lambda t: T.tsum(T.mul(op(Tensor(a), t), Tensor(r))), b
    return build


def _wtd_fix(fn, shape):
    """Weighted-sum wrapper whose weights are drawn once per case."""
    def build(rng):
        x = _arr(rng, *shape)
        r = rng.normal(size=fn(Tensor(x)).shape)
        return lambda t: T.tsum(T.mul(fn(t), Tensor(r))), x
    return build


def _conv_cases():
    x, w, wt = (2, 3, 7, 7), (4, 3, 3, 3), (3, 4, 4, 4)
    conv = lambda a, b: F.conv2d(a, b, None, 2, 1, 1)  # noqa: E731
    dil = lambda a, b: F.conv2d(a, b, None, 1, 2, 2)  # noqa: E731
    convt = lambda a, b: F.conv_transpose2d(a, b, None, 2, 1)  # noqa: E731
    wgrad = lambda a, b: F.conv2d_weight_grad(a, b, 3, 2, 1, 1)  # noqa: E731
    return {
        "conv2d": _binary(conv, x, w, 0),
        "conv2d.weight": _binary(conv, x, w, 1),
        "conv2d.dilated": _binary(dil, x, w, 0),
        "conv_transpose2d": _binary(convt, (2, 3, 4, 4), wt, 0),
        "conv_transpose2d.weight": _binary(convt, (2, 3, 4, 4), wt, 1),
        "conv2d_weight_grad.x": _binary(wgrad, x, (2, 4, 4, 4), 0),
        "conv2d_weight_grad.g": _binary(wgrad, x, (2, 4, 4, 4), 1),
    }


def _drawer_pack_case(rng):
    x = _arr(rng, 3, 3, 5, 5)
    src = np.array([2, 0, 1])
    r = rng.normal(size=(3, 9, 5, 5))
    return lambda t: T.tsum(T.mul(drawer_pack(t, src, 3).packed, Tensor(r))), x


def _drawer_unpack_case(rng):
    x = _arr(rng, 3, 9, 5, 5)
    tgt = np.array([1, 2, 0])
    r = rng.normal(size=(3, 3, 5, 5))
    return lambda t: T.tsum(T.mul(drawer_unpack(t, tgt, 3), Tensor(r))), x


def _cross_entropy_case(rng):
    x = _arr(rng, 5, 4)
    labels = np.array([0, 3, 1, 1, 2])
    return lambda t: F.softmax_cross_entropy(t, labels), x


def _instance_norm_param(which):
    def build(rng):
        x = _arr(rng, 2, 3, 4, 4)
        gamma, beta = _arr(rng, 3), _arr(rng, 3)
        r = rng.normal(size=x.shape)
        if which == "x":
            return lambda t: T.tsum(T.mul(F.instance_norm(t, Tensor(gamma), Tensor(beta)), Tensor(r))), x
        if which == "gamma":
            return lambda t: T.tsum(T.mul(F.instance_norm(Tensor(x), t, Tensor(beta)), Tensor(r))), gamma
        return lambda t: T.tsum(T.mul(F.instance_norm(Tensor(x), Tensor(gamma), t), Tensor(r))), beta
    return build


def _style_case(stat):
    def build(rng):
        b = _arr(rng, 2, 3, 4, 4)
        return lambda t: _style_distance(t, Tensor(b), stat), _arr(rng, 2, 3, 4, 4)
    return build


def _content_case(rng):
    b = _arr(rng, 2, 3, 4, 4)
    return lambda t: content_distance(t, Tensor(b)), _arr(rng, 2, 3, 4, 4)


def _rows_case(op, shape):
    def build(rng):
        index = np.array([2, 0, 2, 1])
        x = _arr(rng, *shape)
        if op == "take":
            fn = lambda t: T.take_rows(t, index)  # noqa: E731
        else:
            fn = lambda t: T.put_rows(t, index, 3)  # noqa: E731
        r = rng.normal(size=fn(Tensor(x)).shape)
        return lambda t: T.tsum(T.mul(fn(t), Tensor(r))), x
    return build


def _operator_cases():
    s = (3, 4)
    cases = {
        "add": _binary(T.add, s, s, 0),
        "sub": _binary(T.sub, s, s, 1),
        "mul": _binary(T.mul, s, s, 0),
        "neg": _unary(T.neg, s),
        "scale": _unary(lambda t: T.scale(t, -1.7), s),
        "add_scalar": _unary(lambda t: T.add_scalar(t, 0.3), s),
        "power": _unary(lambda t: T.power(t, 1.5), s, positive=True),
        "power.negative": _unary(lambda t: T.power(t, -1.0), s, positive=True),
        "exp": _unary(T.exp, s),
        "log": _unary(T.log, s, positive=True),
        "abs": _unary(T.abs_, s),
        "tanh": _unary(T.tanh, s),
        "rsub_one": _unary(T.rsub_one, s),
        "relu": _unary(T.relu, s),
        "leaky_relu": _unary(T.leaky_relu, s),
        "sum": _unary(lambda t: T.tsum(t, 1, keepdims=True), s),
        "mean": _unary(lambda t: T.mean(t, 0), s),
        "broadcast_to": _unary(lambda t: T.broadcast_to(t, (2, 3, 5, 4)), (1, 3, 1, 4)),
        "reshape": _unary(lambda t: T.reshape(t, (2, 6)), s),
        "transpose": _unary(lambda t: T.transpose(t, (2, 0, 1)), (2, 3, 4)),
        "matmul": _binary(T.matmul, (3, 4), (4, 5), 0),
        "matmul.right": _binary(T.matmul, (3, 4), (4, 5), 1),
        "matmul.batched": _binary(T.matmul, (2, 3, 4), (2, 4, 2), 1),
        "concat": _binary(lambda a, b: T.concat([a, b], 1), (2, 3), (2, 2), 1),
        "slice": _unary(lambda t: T.slice_axis(t, 1, 1, 3), s),
        "pad": _unary(lambda t: T.pad_axis(t, 0, 1, 5), s),
        "gather_slots": _unary(lambda t: T.gather_slots(t, [0, 3], 2), (2, 5, 2)),
        "scatter_slots": _unary(lambda t: T.scatter_slots(t, [1, 0], 4), (2, 2, 3)),
        "take_rows": _rows_case("take", (3, 2)),
        "put_rows": _rows_case("put", (4, 2)),
        "logsumexp": _unary(T.logsumexp, s),
        "add_bias": _binary(F.add_bias, (2, 3, 4, 4), (3,), 1),
        "channel_scale": _binary(F.channel_scale, (2, 3, 4, 4), (3,), 1),
        "instance_norm": _instance_norm_param("x"),
        "instance_norm.gamma": _instance_norm_param("gamma"),
        "instance_norm.beta": _instance_norm_param("beta"),
        "fully_connected": _binary(lambda a, b: F.fully_connected(a, b), (3, 4), (4, 2), 0),
        "fully_connected.weight": _binary(lambda a, b: F.fully_connected(a, b), (3, 4), (4, 2), 1),
        "avg_pool2": _unary(F.avg_pool2, (2, 3, 4, 6)),
        "global_avg_pool": _unary(F.global_avg_pool, (2, 3, 4, 4)),
        "flatten": _unary(F.flatten, (2, 3, 2, 2)),
        "gram_matrix": _unary(F.gram_matrix, (2, 3, 4, 4)),
        "log_softmax": _unary(F.log_softmax, s),
        "softmax_cross_entropy": _cross_entropy_case,
        "drawer_pack": _drawer_pack_case,
        "drawer_unpack": _drawer_unpack_case,
        "content_distance": _content_case,
        "style_gram": _style_case("gram"),
        "style_meanstd": _style_case("meanstd"),
    }
    cases.update(_conv_cases())
    return cases


# ---------------------------------------------------------------------------
# random compositions

def _composition_pool(rng):
    w = rng.normal(size=(3, 3, 3, 3)) * 0.5
    gamma = rng.normal(size=3)
    return [
        ("tanh", T.tanh),
        ("leaky_relu", T.leaky_relu),
        ("conv3x3", lambda t: F.conv2d(t, Tensor(w), None, 1, 1)),
        ("instance_norm", lambda t: F.instance_norm(t)),
        ("channel_scale", lambda t: F.channel_scale(t, Tensor(gamma))),
        ("square", lambda t: T.mul(t, t)),
        ("exp_half", lambda t: T.exp(T.scale(t, 0.5))),
        ("transpose_hw", lambda t: T.transpose(t, (0, 1, 3, 2))),
    ]


def random_composition(seed, length=5):
    """Chain of ``length`` randomly chosen shape-preserving ops; returns (names, build)."""
    rng = np.random.default_rng([int(seed), 7])
    pool = _composition_pool(rng)
    picks = [pool[i] for i in rng.choice(len(pool), size=length, replace=True)]
    names = [n for n, _ in picks]

    def fn(t):
        for _, op in picks:
            t = op(t)
        return t

    return names, _wtd_fix(fn, (2, 3, 5, 5))


# ---------------------------------------------------------------------------
# second order

def toy_critic_gp_case(rng):
    """Gradient penalty of a 2-layer critic as a function of its first weight."""
    real, fake = _arr(rng, 4, 6), _arr(rng, 4, 6)
    w2 = Tensor(rng.normal(size=(5, 1)))
    seed = int(rng.integers(1 << 30))

    def f(w1):
        critic = lambda x: F.fully_connected(T.tanh(F.fully_connected(x, w1)), w2)  # noqa: E731
        return gradient_penalty(critic, Tensor(real), Tensor(fake), seed)

    return f, _arr(rng, 6, 5)


def conv_critic_gp_case(rng):
    """Gradient penalty of a conv / leaky-relu / linear critic w.r.t. the conv weight."""
    real, fake = _arr(rng, 2, 2, 6, 6), _arr(rng, 2, 2, 6, 6)
    head = Tensor(rng.normal(size=(3 * 3 * 3, 1)))
    seed = int(rng.integers(1 << 30))

    def f(w):
        def critic(x):
            h = T.leaky_relu(F.conv2d(x, w, None, 2, 1))
            return F.fully_connected(F.flatten(h), head)
        return gradient_penalty(critic, Tensor(real), Tensor(fake), seed)

    return f, _arr(rng, 3, 2, 3, 3)


# ---------------------------------------------------------------------------
# fault injection

def _faulty_tanh(a):
    """tanh whose backward omits the square: d/dx = 1 - y (wrong on purpose)."""
    y = np.tanh(a.data)
    return T.make(y, (a,), lambda g: (T.mul(g, Tensor(1.0 - y)),), "faulty_tanh")


def suite(seed=0, inject_fault=False):
    """Ordered mapping name -> (builder, tolerance)."""
    out = {name: (b, TOLERANCE) for name, b in _operator_cases().items()}
    for k in range(3):
        names, build = random_composition(seed * 3 + k)
        out[f"composition{k}[{'>'.join(names)}]"] = (build, TOLERANCE)
    out["second_order.gp_toy_critic"] = (toy_critic_gp_case, SECOND_ORDER_TOLERANCE)
    out["second_order.gp_conv_critic"] = (conv_critic_gp_case, SECOND_ORDER_TOLERANCE)
    if inject_fault:
        out["tanh"] = (_unary(_faulty_tanh, (3, 4)), TOLERANCE)
    return out


def run_case(name, builder, tolerance, seed=0):
    rng = np.random.default_rng([int(seed), sum(name.encode())])
    with T.float64_mode():
        f, x = builder(rng)
        err = finite_diff_check(f, x, seed=seed)
    return CaseResult(name, err, tolerance)


def run_suite(seed=0, only=None, inject_fault=False):
    cases = suite(seed, inject_fault)
    if only is not None:
        # an exact name selects one row; otherwise "conv2d" style prefixes select its variants
        matched = {k: v for k, v in cases.items() if k == only}
        matched = matched or {k: v for k, v in cases.items() if k.startswith(only + ".")}
        if not matched:
            raise KeyError(f"unknown operator {only!r}")
        cases = matched
    return [run_case(name, b, tol, seed) for name, (b, tol) in cases.items()]
