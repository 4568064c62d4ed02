"""Finite-difference gradient checking against a registry of primitives.

Each registry entry is a generator ``gen(rng) -> (fn, inputs)`` where ``fn``
maps input Tensors to an output Tensor and ``inputs`` are float64 arrays.
Generators must keep inputs away from kinks (relu/abs at zero, integer
bilinear coordinates, argmin ties). Numeric passes replay every
stop_gradient value from the analytic pass.
"""

from dataclasses import dataclass, field

import numpy as np

from ..errors import UsageError
from . import ops
from .tensor import StopGradientReplay, Tape, Tensor

REGISTRY = {}

# Elementwise denominators never drop below this, so entries whose true
# derivative is ~0 are judged on absolute error at this scale.
REL_FLOOR = 1e-3


def register(name, max_elements=64):
    """Decorator adding an input generator to the registry."""

    def deco(gen):
        REGISTRY[name] = (gen, max_elements)
        return gen

    return deco


@dataclass
class GradcheckReport:
    op: str
    trials: int
    eps: float
    tol: float
    max_rel_error: list = field(default_factory=list)  # per input, max over trials

    @property
    def worst(self):
        return max(self.max_rel_error) if self.max_rel_error else 0.0

    @property
    def passed(self):
        return self.worst < self.tol


def relative_error(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_function(fn, inputs, eps=1e-5, rng=None, max_elements=64):
    """Max relative error between tape gradients and central differences, per input."""
    rng = rng or np.random.default_rng(0)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    replay = StopGradientReplay()
    with replay, Tape() as tape:
        out = fn(*leaves)
        proj = rng.standard_normal(out.shape)
        loss = ops.sum(out * proj)
    tape.backward(loss)

    def value():
        with replay.replay():
            res = fn(*[Tensor(a) for a in arrays])
        return float(np.sum(res.data * proj))

    errors = []
    for arr, leaf in zip(arrays, leaves):
        analytic = leaf.grad.ravel()
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_elements:
            idx = rng.choice(flat.size, size=max_elements, replace=False)
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + eps
            fp = value()
            flat[i] = old - eps
            fm = value()
            flat[i] = old
            numeric[j] = (fp - fm) / (2 * eps)
        errors.append(relative_error(analytic[idx], numeric))
    return errors


def gradcheck(op_name, trials=10, eps=1e-5, tol=1e-4, seed=0):
    if op_name not in REGISTRY:
        raise UsageError(f"unknown op {op_name!r}; registered: {sorted(REGISTRY)}")
    gen, max_elements = REGISTRY[op_name]
    rng = np.random.default_rng(seed)
    report = GradcheckReport(op_name, trials, eps, tol)
    for _ in range(trials):
        fn, inputs = gen(rng)
        errs = check_function(fn, inputs, eps=eps, rng=rng, max_elements=max_elements)
        if not report.max_rel_error:
            report.max_rel_error = errs
        else:
            report.max_rel_error = [max(a, b) for a, b in zip(report.max_rel_error, errs)]
    return report


# ---------------------------------------------------------------- primitive generators


def _away_from_zero(rng, shape, lo=0.1, hi=1.5):
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def _fractional_coords(rng, shape, lo, hi):
    """Coordinates in [lo, hi) whose fractional part stays in [0.15, 0.85]."""
    base = rng.integers(lo, hi, shape).astype(np.float64)
    return base + rng.uniform(0.15, 0.85, shape)


@register("add")
def _g_add(rng):
    return ops.add, [rng.standard_normal((3, 4)), rng.standard_normal((4,))]


@register("sub")
def _g_sub(rng):
    return ops.sub, [rng.standard_normal((2, 3)), rng.standard_normal((2, 1))]


@register("mul")
def _g_mul(rng):
    return ops.mul, [rng.standard_normal((3, 4)), rng.standard_normal((3, 1))]


@register("div")
def _g_div(rng):
    return ops.div, [rng.standard_normal((3, 4)), rng.uniform(0.5, 2.0, (4,))]


@register("neg")
def _g_neg(rng):
    return ops.neg, [rng.standard_normal((5,))]


@register("exp")
def _g_exp(rng):
    return ops.exp, [rng.standard_normal((4, 3))]


@register("log")
def _g_log(rng):
    return ops.log, [rng.uniform(0.3, 3.0, (4, 3))]


@register("sqrt")
def _g_sqrt(rng):
    return ops.sqrt, [rng.uniform(0.3, 3.0, (6,))]


@register("square")
def _g_square(rng):
    return ops.square, [rng.standard_normal((6,))]


@register("relu")
def _g_relu(rng):
    return ops.relu, [_away_from_zero(rng, (4, 5))]


@register("abs")
def _g_abs(rng):
    return ops.abs, [_away_from_zero(rng, (4, 5))]


@register("sum")
def _g_sum(rng):
    return (lambda a: ops.sum(a, axis=1, keepdims=False)), [rng.standard_normal((3, 4, 2))]


@register("mean")
def _g_mean(rng):
    return (lambda a: ops.mean(a, axis=(0, 2), keepdims=True)), [rng.standard_normal((3, 4, 2))]


@register("reshape")
def _g_reshape(rng):
    return (lambda a: ops.reshape(a, (6, 2))), [rng.standard_normal((3, 4))]


@register("transpose")
def _g_transpose(rng):
    return (lambda a: ops.transpose(a, (2, 0, 1))), [rng.standard_normal((2, 3, 4))]


@register("concat")
def _g_concat(rng):
    return (lambda a, b: ops.concat([a, b], axis=-1)), [rng.standard_normal((2, 3, 2)), rng.standard_normal((2, 3, 4))]


@register("stack")
def _g_stack(rng):
    return (lambda a, b: ops.stack([a, b], axis=1)), [rng.standard_normal((3, 2)), rng.standard_normal((3, 2))]


@register("getitem")
def _g_getitem(rng):
    idx = np.array([2, 0, 2])
    return (lambda a: ops.getitem(a, idx)), [rng.standard_normal((4, 3))]


@register("tile")
def _g_tile(rng):
    return (lambda a: ops.tile(a, 3)), [rng.standard_normal((2, 4))]


@register("matmul")
def _g_matmul(rng):
    return ops.matmul, [rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))]


@register("softmax")
def _g_softmax(rng):
    return ops.softmax, [rng.standard_normal((3, 5))]


@register("log_softmax")
def _g_log_softmax(rng):
    return ops.log_softmax, [rng.standard_normal((3, 5))]


@register("l2_normalize")
def _g_l2n(rng):
    return ops.l2_normalize, [rng.standard_normal((3, 4))]


@register("cosine_similarity")
def _g_cos(rng):
    return ops.cosine_similarity, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]


@register("conv2d")
def _g_conv(rng):
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    x = rng.standard_normal((5, 5, 2))
    w = rng.standard_normal((k, k, 2, 3))
    return (lambda a, b: ops.conv2d(a, b, stride=stride, pad=k // 2)), [x, w]


@register("conv2d_per_sample")
def _g_conv_ps(rng):
    x = rng.standard_normal((2, 4, 4, 2))
    w = rng.standard_normal((2, 3, 3, 2, 2))
    return (lambda a, b: ops.conv2d(a, b, pad=1)), [x, w]


@register("grid_sample")
def _g_grid_sample(rng):
    x = rng.standard_normal((2, 4, 5, 3))
    coords = np.stack([_fractional_coords(rng, (2, 7), -1, 4), _fractional_coords(rng, (2, 7), -1, 5)], axis=-1)
    return ops.grid_sample, [x, coords]


@register("bilinear_sample")
def _g_bilinear(rng):
    x = rng.standard_normal((3, 3, 2))
    p = _fractional_coords(rng, (2,), 0, 2)
    return ops.bilinear_sample, [x, p]


@register("warp")
def _g_warp(rng):
    x = rng.standard_normal((4, 4, 2))
    flow = rng.integers(-1, 2, (4, 4, 2)) + rng.uniform(0.15, 0.85, (4, 4, 2))
    return ops.warp, [x, flow]


@register("pixel_unshuffle")
def _g_unshuffle(rng):
    return (lambda a: ops.pixel_unshuffle(a, 2)), [rng.standard_normal((4, 4, 2))]


@register("pixel_shuffle")
def _g_shuffle(rng):
    return (lambda a: ops.pixel_shuffle(a, 2)), [rng.standard_normal((2, 2, 8))]


@register("avg_pool")
def _g_avgpool(rng):
    return (lambda a: ops.avg_pool(a, 2)), [rng.standard_normal((4, 6, 2))]


@register("route_modifier")
def _g_route(rng):
    P, k, cin, cout = 3, 3, 2, 4
    alpha = rng.dirichlet(np.ones(P), size=2)
    return ops.route_modifier, [
        alpha,
        rng.standard_normal((P, k)),
        rng.standard_normal((P, k)),
        rng.standard_normal((P, cin)),
        rng.standard_normal((P, cout)),
    ]
