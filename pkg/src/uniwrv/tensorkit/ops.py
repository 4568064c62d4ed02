"""Differentiable primitives.

Image ops use an H x W x C layout and accept an optional leading batch axis
(B x H x W x C). Convolution kernels are k x k x Cin x Cout, or
B x k x k x Cin x Cout for per-sample kernels.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError
from . import _backend
from .tensor import Function, Tensor


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(sa=a.shape, sb=b.shape)
        return a + b

    @staticmethod
    def backward(ctx, g):
        return _unbroadcast(g, ctx.sa), _unbroadcast(g, ctx.sb)


class Sub(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(sa=a.shape, sb=b.shape)
        return a - b

    @staticmethod
    def backward(ctx, g):
        return _unbroadcast(g, ctx.sa), _unbroadcast(-g, ctx.sb)


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a=a, b=b)
        return a * b

    @staticmethod
    def backward(ctx, g):
        ga = _unbroadcast(g * ctx.b, ctx.a.shape) if ctx.needs_grad[0] else None
        gb = _unbroadcast(g * ctx.a, ctx.b.shape) if ctx.needs_grad[1] else None
        return ga, gb


class Div(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a=a, b=b)
        return a / b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.a, ctx.b
        ga = _unbroadcast(g / b, a.shape) if ctx.needs_grad[0] else None
        gb = _unbroadcast(-g * a / (b * b), b.shape) if ctx.needs_grad[1] else None
        return ga, gb


class Neg(Function):
    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, g):
        return (-g,)


class Exp(Function):
    @staticmethod
    def forward(ctx, a):
        y = np.exp(a)
        ctx.save(y=y)
        return y

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.y,)


class Log(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.save(a=a)
        return np.log(a)

    @staticmethod
    def backward(ctx, g):
        return (g / ctx.a,)


class Sqrt(Function):
    @staticmethod
    def forward(ctx, a):
        y = np.sqrt(a)
        ctx.save(y=y)
        return y

    @staticmethod
    def backward(ctx, g):
        return (g * 0.5 / ctx.y,)


class Square(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.save(a=a)
        return a * a

    @staticmethod
    def backward(ctx, g):
        return (2 * g * ctx.a,)


class Relu(Function):
    @staticmethod
    def forward(ctx, a):
        mask = a > 0
        ctx.save(mask=mask)
        return a * mask

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.mask,)


class Abs(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.save(sign=np.sign(a))
        return np.abs(a)

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.sign,)


# ---------------------------------------------------------------- reductions / shape


class Sum(Function):
    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        ctx.save(shape=a.shape, axis=axis, keepdims=keepdims)
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, g):
        if ctx.axis is not None and not ctx.keepdims:
            g = np.expand_dims(g, ctx.axis)
        return (np.broadcast_to(g, ctx.shape).copy(),)


class Mean(Function):
    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        out = np.asarray(a.mean(axis=axis, keepdims=keepdims))
        ctx.save(shape=a.shape, axis=axis, keepdims=keepdims, count=a.size // max(out.size, 1))
        return out

    @staticmethod
    def backward(ctx, g):
        if ctx.axis is not None and not ctx.keepdims:
            g = np.expand_dims(g, ctx.axis)
        return (np.broadcast_to(g / ctx.count, ctx.shape).copy(),)


class Reshape(Function):
    @staticmethod
    def forward(ctx, a, shape):
        ctx.save(shape=a.shape)
        return a.reshape(shape)

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx.shape),)


class Transpose(Function):
    @staticmethod
    def forward(ctx, a, axes):
        ctx.save(axes=axes)
        return np.ascontiguousarray(np.transpose(a, axes))

    @staticmethod
    def backward(ctx, g):
        return (np.ascontiguousarray(np.transpose(g, np.argsort(ctx.axes))),)


class Concat(Function):
    @staticmethod
    def forward(ctx, *arrays, axis=-1):
        ctx.save(sizes=[a.shape[axis] for a in arrays], axis=axis)
        return np.concatenate(arrays, axis=axis)

    @staticmethod
    def backward(ctx, g):
        cuts = np.cumsum(ctx.sizes)[:-1]
        return tuple(np.ascontiguousarray(p) for p in np.split(g, cuts, axis=ctx.axis))


class Stack(Function):
    @staticmethod
    def forward(ctx, *arrays, axis=0):
        ctx.save(axis=axis, n=len(arrays))
        return np.stack(arrays, axis=axis)

    @staticmethod
    def backward(ctx, g):
        return tuple(np.ascontiguousarray(np.take(g, i, axis=ctx.axis)) for i in range(ctx.n))


class GetItem(Function):
    @staticmethod
    def forward(ctx, a, index):
        ctx.save(shape=a.shape, index=index)
        return np.array(a[index])

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx.shape, dtype=g.dtype)
        np.add.at(out, ctx.index, g)
        return (out,)


class Tile(Function):
    """Repeat the last axis end-to-end ``reps`` times."""

    @staticmethod
    def forward(ctx, a, reps):
        ctx.save(shape=a.shape, reps=reps)
        return np.tile(a, (1,) * (a.ndim - 1) + (reps,))

    @staticmethod
    def backward(ctx, g):
        n = ctx.shape[-1]
        return (g.reshape(g.shape[:-1] + (ctx.reps, n)).sum(axis=-2),)


class MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        if b.ndim < 2:
            raise DimensionError("matmul right operand needs at least 2 dims")
        if a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
        vec = a.ndim == 1
        ctx.save(a=a[None] if vec else a, b=b, vec=vec)
        return a @ b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.a, ctx.b
        if ctx.vec:
            g = g[..., None, :]
        ga = gb = None
        if ctx.needs_grad[0]:
            ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
            if ctx.vec:
                ga = ga[0]
        if ctx.needs_grad[1]:
            gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
        return ga, gb


class Softmax(Function):
    @staticmethod
    def forward(ctx, a, axis=-1):
        z = a - a.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)
        ctx.save(y=y, axis=axis)
        return y

    @staticmethod
    def backward(ctx, g):
        y = ctx.y
        return (y * (g - (g * y).sum(axis=ctx.axis, keepdims=True)),)


class LogSoftmax(Function):
    @staticmethod
    def forward(ctx, a, axis=-1):
        z = a - a.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
        y = z - lse
        ctx.save(y=y, axis=axis)
        return y

    @staticmethod
    def backward(ctx, g):
        return (g - np.exp(ctx.y) * g.sum(axis=ctx.axis, keepdims=True),)


class L2Normalize(Function):
    """Scale rows (last axis) to unit length; zero rows stay zero."""

    @staticmethod
    def forward(ctx, a):
        n = np.sqrt((a * a).sum(axis=-1, keepdims=True))
        safe = np.where(n > 0, n, 1.0)
        y = a / safe
        ctx.save(y=y, n=safe, zero=(n == 0))
        return y

    @staticmethod
    def backward(ctx, g):
        y = ctx.y
        ga = (g - y * (g * y).sum(axis=-1, keepdims=True)) / ctx.n
        return (np.where(ctx.zero, 0.0, ga).astype(g.dtype),)


class CosineSimilarity(Function):
    """Row-wise cosine over the last axis; defined as 0 when either row is zero."""

    @staticmethod
    def forward(ctx, a, b):
        na = np.sqrt((a * a).sum(-1))
        nb = np.sqrt((b * b).sum(-1))
        zero = (na == 0) | (nb == 0)
        denom = np.where(zero, 1.0, na * nb)
        dot = (a * b).sum(-1)
        cos = np.where(zero, 0.0, dot / denom)
        ctx.save(a=a, b=b, na=np.where(zero, 1.0, na), nb=np.where(zero, 1.0, nb), cos=cos, zero=zero)
        return cos.astype(a.dtype)

    @staticmethod
    def backward(ctx, g):
        a, b, na, nb, cos = ctx.a, ctx.b, ctx.na, ctx.nb, ctx.cos
        keep = (~ctx.zero)[..., None]
        gcol = g[..., None]
        ga = gb = None
        if ctx.needs_grad[0]:
            ga = gcol * (b / (na * nb)[..., None] - cos[..., None] * a / (na * na)[..., None])
            ga = _unbroadcast((ga * keep).astype(a.dtype), a.shape)
        if ctx.needs_grad[1]:
            gb = gcol * (a / (na * nb)[..., None] - cos[..., None] * b / (nb * nb)[..., None])
            gb = _unbroadcast((gb * keep).astype(b.dtype), b.shape)
        return ga, gb


# ---------------------------------------------------------------- image ops


def _as4d(shape):
    if len(shape) == 3:
        return False
    if len(shape) == 4:
        return True
    raise DimensionError(f"expected H x W x C or B x H x W x C, got {shape}")


class Conv2d(Function):
    @staticmethod
    def forward(ctx, x, w, stride=1, pad=0):
        batched = _as4d(x.shape)
        if not batched:
            x = x[None]
        B, H, W, Cin = x.shape
        per_sample = w.ndim == 5
        k = w.shape[-4]
        if w.shape[-3] != k or k % 2 == 0:
            raise DimensionError(f"kernel must be odd and square, got {w.shape}")
        if w.shape[-2] != Cin:
            raise DimensionError(f"input has {Cin} channels, kernel expects {w.shape[-2]}")
        if per_sample and w.shape[0] != B:
            raise DimensionError(f"per-sample kernels for {w.shape[0]} samples, batch is {B}")
        if stride < 1 or pad < 0:
            raise DimensionError("stride must be >= 1 and pad >= 0")
        Cout = w.shape[-1]
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
        Ho = (H + 2 * pad - k) // stride + 1
        Wo = (W + 2 * pad - k) // stride + 1
        if Ho < 1 or Wo < 1:
            raise DimensionError("kernel larger than padded input")
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B, Ho * Wo, k * k * Cin)
        if per_sample:
            wm = w.reshape(B, k * k * Cin, Cout)
            out = np.matmul(cols, wm)
        else:
            wm = w.reshape(k * k * Cin, Cout)
            out = cols @ wm
        ctx.save(cols=cols, wm=wm, xshape=xp.shape, pad=pad, stride=stride, k=k,
                 Ho=Ho, Wo=Wo, batched=batched, wshape=w.shape, per_sample=per_sample)
        out = out.reshape(B, Ho, Wo, Cout)
        return out if batched else out[0]

    @staticmethod
    def backward(ctx, g):
        if not ctx.batched:
            g = g[None]
        B, Ho, Wo, Cout = g.shape
        gm = g.reshape(B, Ho * Wo, Cout)
        gx = gw = None
        if ctx.needs_grad[1]:
            if ctx.per_sample:
                gw = np.matmul(np.swapaxes(ctx.cols, 1, 2), gm).reshape(ctx.wshape)
            else:
                gw = np.tensordot(ctx.cols, gm, axes=([0, 1], [0, 1])).reshape(ctx.wshape)
        if ctx.needs_grad[0]:
            k, s, pad = ctx.k, ctx.stride, ctx.pad
            Cin = ctx.xshape[-1]
            wt = np.swapaxes(ctx.wm, -1, -2)
            gcols = (np.matmul(gm, wt) if ctx.per_sample else gm @ wt).reshape(B, Ho, Wo, k, k, Cin)
            gxp = np.zeros(ctx.xshape, dtype=g.dtype)
            for a in range(k):
                for b in range(k):
                    gxp[:, a:a + s * (Ho - 1) + 1:s, b:b + s * (Wo - 1) + 1:s, :] += gcols[:, :, :, a, b, :]
            if pad:
                gxp = gxp[:, pad:-pad, pad:-pad, :]
            gx = gxp if ctx.batched else gxp[0]
            gx = np.ascontiguousarray(gx)
        return gx, gw


class GridSample(Function):
    """Bilinear sampling of ``x`` (B,H,W,C) at ``coords`` (B,N,2) -> (B,N,C)."""

    @staticmethod
    def forward(ctx, x, coords):
        if x.ndim != 4 or coords.ndim != 3 or coords.shape[-1] != 2 or coords.shape[0] != x.shape[0]:
            raise DimensionError(f"grid_sample shapes {x.shape} / {coords.shape}")
        kern = _backend.kernels
        ctx.save(x=x, coords=coords, kern=kern)
        return kern.grid_sample_forward(x, coords)

    @staticmethod
    def backward(ctx, g):
        gx, gc = ctx.kern.grid_sample_backward(ctx.x, ctx.coords, g, ctx.needs_grad[0], ctx.needs_grad[1])
        return gx, gc


class PixelUnshuffle(Function):
    @staticmethod
    def forward(ctx, x, r):
        batched = _as4d(x.shape)
        if not batched:
            x = x[None]
        B, H, W, C = x.shape
        if H % r or W % r:
            raise DimensionError(f"spatial dims {H}x{W} not divisible by {r}")
        ctx.save(batched=batched, r=r)
        y = x.reshape(B, H // r, r, W // r, r, C).transpose(0, 1, 3, 2, 4, 5)
        y = np.ascontiguousarray(y).reshape(B, H // r, W // r, r * r * C)
        return y if batched else y[0]

    @staticmethod
    def backward(ctx, g):
        return (_shuffle(g, ctx.r),)


class PixelShuffle(Function):
    @staticmethod
    def forward(ctx, x, r):
        _as4d(x.shape)
        if x.shape[-1] % (r * r):
            raise DimensionError(f"channels {x.shape[-1]} not divisible by {r * r}")
        ctx.save(r=r)
        return _shuffle(x, r)

    @staticmethod
    def backward(ctx, g):
        return (_unshuffle(g, ctx.r),)


def _shuffle(x, r):
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    B, h, w, C = x.shape
    c = C // (r * r)
    y = x.reshape(B, h, w, r, r, c).transpose(0, 1, 3, 2, 4, 5)
    y = np.ascontiguousarray(y).reshape(B, h * r, w * r, c)
    return y if batched else y[0]


def _unshuffle(x, r):
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    B, H, W, C = x.shape
    y = x.reshape(B, H // r, r, W // r, r, C).transpose(0, 1, 3, 2, 4, 5)
    y = np.ascontiguousarray(y).reshape(B, H // r, W // r, r * r * C)
    return y if batched else y[0]


class AvgPool(Function):
    """Non-overlapping r x r area average."""

    @staticmethod
    def forward(ctx, x, r):
        batched = _as4d(x.shape)
        if not batched:
            x = x[None]
        B, H, W, C = x.shape
        if H % r or W % r:
            raise DimensionError(f"spatial dims {H}x{W} not divisible by {r}")
        ctx.save(batched=batched, r=r)
        y = x.reshape(B, H // r, r, W // r, r, C).mean(axis=(2, 4))
        return y if batched else y[0]

    @staticmethod
    def backward(ctx, g):
        r = ctx.r
        gx = np.repeat(np.repeat(g, r, axis=-3), r, axis=-2) / (r * r)
        return (gx,)


class RouteModifier(Function):
    """Alpha-weighted sum of rank-1 four-way outer products.

    alpha (P,) or (B,P); u, v (P,k); c (P,Cin); o (P,Cout)
    -> (k,k,Cin,Cout) or (B,k,k,Cin,Cout).

    Evaluated as ``1 + sum_i alpha_i (outer_i - 1)``, which equals the plain
    weighted sum whenever alpha sums to one and is exactly 1 for all-ones
    modify vectors.
    """

    @staticmethod
    def forward(ctx, alpha, u, v, c, o):
        P = u.shape[0]
        if not (alpha.shape[-1] == v.shape[0] == c.shape[0] == o.shape[0] == P):
            raise DimensionError("routing weights and modify vectors disagree on path count")
        branches = np.einsum("pa,pb,pm,pn->pabmn", u, v, c, o)
        shape = branches.shape[1:]
        flat = branches.reshape(P, -1) - 1
        out = 1 + alpha @ flat
        ctx.save(alpha=alpha, u=u, v=v, c=c, o=o, flat=flat, shape=shape)
        return out.reshape(alpha.shape[:-1] + shape)

    @staticmethod
    def backward(ctx, g):
        alpha, u, v, c, o = ctx.alpha, ctx.u, ctx.v, ctx.c, ctx.o
        P = u.shape[0]
        gflat = g.reshape(-1, ctx.flat.shape[1])
        a2 = alpha.reshape(-1, P)
        galpha = (gflat @ ctx.flat.T).reshape(alpha.shape)
        gb = (a2.T @ gflat).reshape((P,) + ctx.shape)
        gu = np.einsum("pabmn,pb,pm,pn->pa", gb, v, c, o, optimize=True)
        gv = np.einsum("pabmn,pa,pm,pn->pb", gb, u, c, o, optimize=True)
        gc = np.einsum("pabmn,pa,pb,pn->pm", gb, u, v, o, optimize=True)
        go = np.einsum("pabmn,pa,pb,pm->pn", gb, u, v, c, optimize=True)
        return galpha, gu, gv, gc, go


# ---------------------------------------------------------------- functional API


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def div(a, b):
    return Div.apply(a, b)


def neg(a):
    return Neg.apply(a)


def exp(a):
    return Exp.apply(a)


def log(a):
    return Log.apply(a)


def sqrt(a):
    return Sqrt.apply(a)


def square(a):
    return Square.apply(a)


def relu(a):
    return Relu.apply(a)


def abs(a):  # noqa: A001
    return Abs.apply(a)


def sum(a, axis=None, keepdims=False):  # noqa: A001
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    return Mean.apply(a, axis=axis, keepdims=keepdims)


def reshape(a, shape):
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a, axes):
    return Transpose.apply(a, axes=tuple(axes))


def concat(tensors, axis=-1):
    return Concat.apply(*tensors, axis=axis)


def stack(tensors, axis=0):
    return Stack.apply(*tensors, axis=axis)


def getitem(a, index):
    return GetItem.apply(a, index=index)


def tile(a, reps):
    return Tile.apply(a, reps=int(reps))


def matmul(a, b):
    return MatMul.apply(a, b)


def softmax(a, axis=-1):
    return Softmax.apply(a, axis=axis)


def log_softmax(a, axis=-1):
    return LogSoftmax.apply(a, axis=axis)


def l2_normalize(a):
    return L2Normalize.apply(a)


def cosine_similarity(a, b):
    return CosineSimilarity.apply(a, b)


def conv2d(x, w, stride=1, pad=0, bias=None):
    out = Conv2d.apply(x, w, stride=int(stride), pad=int(pad))
    return out if bias is None else out + bias


def grid_sample(x, coords):
    return GridSample.apply(x, coords)


def bilinear_sample(x, p):
    """Sample ``x`` (H,W,C) at one (row, col) position -> (C,)."""
    x = _t(x)
    if x.ndim != 3:
        raise DimensionError(f"bilinear_sample expects H x W x C, got {x.shape}")
    p = p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=x.dtype))
    out = grid_sample(reshape(x, (1,) + x.shape), reshape(p, (1, 1, 2)))
    return reshape(out, (x.shape[-1],))


def base_grid(h, w, dtype=np.float64):
    rows, cols = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing="ij")
    return np.stack([rows, cols], axis=-1)


def warp(x, flow):
    """Backward-warp: out[r, c] = x sampled at (r, c) + flow[r, c]."""
    x = _t(x)
    flow = _t(flow)
    batched = x.ndim == 4
    if flow.shape[:-1] != x.shape[:-1] or flow.shape[-1] != 2:
        raise DimensionError(f"flow {flow.shape} does not match features {x.shape}")
    xb = x if batched else reshape(x, (1,) + x.shape)
    fb = flow if batched else reshape(flow, (1,) + flow.shape)
    B, H, W, C = xb.shape
    coords = fb + base_grid(H, W, dtype=x.dtype)
    out = grid_sample(xb, reshape(coords, (B, H * W, 2)))
    return reshape(out, x.shape)


def pixel_unshuffle(x, r):
    return PixelUnshuffle.apply(x, r=int(r))


def pixel_shuffle(x, r):
    return PixelShuffle.apply(x, r=int(r))


def avg_pool(x, r):
    return AvgPool.apply(x, r=int(r))


def global_avg_pool(x):
    """Mean over the two spatial axes: (..., H, W, C) -> (..., C)."""
    return mean(x, axis=(-3, -2))


def route_modifier(alpha, u, v, c, o):
    return RouteModifier.apply(alpha, u, v, c, o)
