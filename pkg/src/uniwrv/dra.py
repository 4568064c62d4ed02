"""Dynamic routing aggregation: flow, path controller, routed convs, deformable attention."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .tensorkit import ops
from .tensorkit.nn import Conv, Linear, Module, init_uniform, init_zeros
from .tensorkit.tensor import Function, Tensor


@dataclass
class DmaConfig:
    heads: int = 2  # M
    frames: int = 3  # T, the triplet window
    points: int = 4  # K
    layers: int = 2  # N
    paths: int = 3  # P

    def __post_init__(self):
        if self.frames != 3:
            raise ConfigError("the sliding window is a frame triplet (T=3)")
        if min(self.heads, self.points, self.layers, self.paths) < 1:
            raise ConfigError("heads, points, layers and paths must be >= 1")

    @property
    def slots(self):
        return self.heads * self.frames * self.points


@dataclass
class FlowField:
    prev: Tensor  # O_{t-1 -> t}, (..., h, w, 2)
    next: Tensor  # O_{t+1 -> t}


@dataclass
class RouteTrace:
    alphas: list = field(default_factory=list)  # one (B, P) array per routing layer
    prior_indices: list = field(default_factory=list)  # one (B,) array per extraction layer


# ---------------------------------------------------------------- routed convolution


class ModifySet(Module):
    """P modify weights, each four vectors sized to the host kernel's (k, k, Cin, Cout)."""

    def __init__(self, paths, k, cin, cout, dtype=np.float32):
        self.u = Tensor(np.ones((paths, k), dtype), requires_grad=True)
        self.v = Tensor(np.ones((paths, k), dtype), requires_grad=True)
        self.c = Tensor(np.ones((paths, cin), dtype), requires_grad=True)
        self.o = Tensor(np.ones((paths, cout), dtype), requires_grad=True)

    @property
    def paths(self):
        return self.u.shape[0]

    def branch(self, i):
        """Materialized rank-1 modifier of path ``i`` as a plain array."""
        return np.einsum("a,b,m,n->abmn", self.u.data[i], self.v.data[i], self.c.data[i], self.o.data[i])


class RoutedConv(Module):
    """One base kernel W modulated per sample by routed modify weights."""

    def __init__(self, rng, cin, cout, k=3, paths=3, dtype=np.float32, zero=False):
        self.k = k
        self.cin = cin
        self.cout = cout
        if zero:
            self.weight = init_zeros((k, k, cin, cout), dtype)
        else:
            self.weight = init_uniform(rng, (k, k, cin, cout), k * k * cin, dtype)
        self.bias = init_zeros((cout,), dtype)
        self.mods = ModifySet(paths, k, cin, cout, dtype)

    def __call__(self, x, alpha):
        return ops.conv2d(x, route_kernel(self, alpha), pad=self.k // 2, bias=self.bias)

    def overhead(self):
        return self.mods.paths * (2 * self.k + self.cin + self.cout)


def route_kernel(rc, alpha):
    """W' = (sum_i alpha_i u_i (x) v_i (x) c_i (x) o_i) * W."""
    m = rc.mods
    k, _, cin, cout = rc.weight.shape
    if m.u.shape[1] != k or m.v.shape[1] != k or m.c.shape[1] != cin or m.o.shape[1] != cout:
        raise DimensionError("modify vector lengths do not match the kernel")
    if alpha.shape[-1] != m.paths:
        raise DimensionError(f"alpha has {alpha.shape[-1]} paths, modify set has {m.paths}")
    return ops.route_modifier(alpha, m.u, m.v, m.c, m.o) * rc.weight


# ---------------------------------------------------------------- flow


class FlowEstimator(Module):
    """Five 3x3 convs with ReLUs between; shared across both directions."""

    def __init__(self, rng, width=16, dtype=np.float32):
        self.convs = [Conv(rng, 6, width, 3, dtype)]
        self.convs += [Conv(rng, width, width, 3, dtype) for _ in range(3)]
        self.head = Conv(rng, width, 2, 3, dtype, zero=True)

    def __call__(self, d_prev, d_mid, d_next):
        return estimate_flow(d_prev, d_mid, d_next, self)


def estimate_flow(d_prev, d_mid, d_next, net):
    if not (d_prev.shape == d_mid.shape == d_next.shape):
        raise DimensionError("flow inputs must share one resolution")
    batched = d_mid.ndim == 4
    pairs = [ops.concat([d_prev, d_mid], axis=-1), ops.concat([d_next, d_mid], axis=-1)]
    x = ops.concat(pairs, axis=0) if batched else ops.stack(pairs, axis=0)
    for conv in net.convs:
        x = ops.relu(conv(x))
    flow = net.head(x)
    n = d_mid.shape[0] if batched else 1
    if batched:
        return FlowField(ops.getitem(flow, slice(0, n)), ops.getitem(flow, slice(n, 2 * n)))
    return FlowField(ops.getitem(flow, 0), ops.getitem(flow, 1))


def warp_feature(f_adj, flow):
    if f_adj.shape[:-1] != flow.shape[:-1]:
        raise DimensionError(f"feature grid {f_adj.shape} vs flow grid {flow.shape}")
    return ops.warp(f_adj, flow)


def warp_loss(g_prev, g_mid, g_next, flows):
    """Squared warp error of both neighbours onto the center frame (means over elements).

    Returns None when ground truth is unavailable.
    """
    if g_prev is None or g_mid is None or g_next is None:
        return None
    e1 = ops.mean(ops.square(g_mid - ops.warp(g_prev, flows.prev)))
    e2 = ops.mean(ops.square(g_mid - ops.warp(g_next, flows.next)))
    return e1 + e2


# ---------------------------------------------------------------- controller


def aggregate_prior(priors, target_len):
    """Tile every prior to ``target_len`` then average them elementwise."""
    if not priors:
        raise ConfigError("no priors to aggregate")
    tiled = []
    for q in priors:
        q = getattr(q, "prior", q)
        n = q.shape[-1]
        if target_len % n:
            raise ConfigError(f"prior length {n} does not divide {target_len}")
        tiled.append(q if n == target_len else ops.tile(q, target_len // n))
    total = tiled[0]
    for t in tiled[1:]:
        total = total + t
    return total / float(len(tiled))


class PathController(Module):
    def __init__(self, rng, channels, paths, dtype=np.float32):
        self.channels = channels
        self.proj = Linear(rng, channels, paths, dtype)  # 1x1 conv on the pooled vector

    def logits(self, m, agg):
        if agg.shape[-1] != self.channels or m.shape[-1] != self.channels:
            raise DimensionError("controller channel mismatch")
        aggb = ops.reshape(agg, agg.shape[:-1] + (1, 1, agg.shape[-1]))
        return self.proj(ops.global_avg_pool(m + aggb))

    def __call__(self, m, agg):
        return ops.softmax(self.logits(m, agg), axis=-1)


def path_controller(m, agg, ctrl):
    return ctrl(m, agg)


class _StraightThrough(Function):
    """Forward emits the hard one-hot; backward passes the gradient to the soft sample."""

    @staticmethod
    def forward(ctx, soft, hard):
        return hard.copy()

    @staticmethod
    def backward(ctx, g):
        return g, None


def harden(alpha, temperature=1.0, rng=None, noise=None):
    """Gumbel-softmax sample of the routing distribution with a one-hot forward value."""
    if temperature <= 0:
        raise ConfigError("Gumbel temperature must be positive")
    if noise is None:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        u = rng.uniform(np.finfo(np.float64).tiny, 1.0, alpha.shape)
        noise = -np.log(-np.log(u))
    logits = ops.log(alpha) + np.asarray(noise, dtype=alpha.dtype)
    soft = ops.softmax(logits / temperature, axis=-1)
    hard = np.zeros(alpha.shape, dtype=alpha.dtype)
    np.put_along_axis(hard, np.argmax(soft.data, axis=-1)[..., None], 1.0, axis=-1)
    return _StraightThrough.apply(soft, hard)


# ---------------------------------------------------------------- deformable attention


def dma_project(m, f_prev_w, f_next_w, f_prev, f_next, node, alpha):
    """Attention weights, sampling offsets and projected values for one routing layer."""
    cfg = node.cfg
    c = m.shape[-1]
    if c % cfg.heads:
        raise ConfigError(f"{c} channels do not split across {cfg.heads} heads")
    guide = ops.concat([f_prev_w, m, f_next_w], axis=-1)
    logits = node.attn_conv(guide, alpha)
    lead = logits.shape[:-1]
    a = ops.softmax(ops.reshape(logits, lead + (cfg.heads, cfg.frames * cfg.points)), axis=-1)
    a = ops.reshape(a, lead + (cfg.slots,))
    offsets = node.offset_conv(guide, alpha)
    values = node.value_conv(ops.concat([m, f_prev, f_next], axis=-1), alpha)
    return a, offsets, values


def deformable_attention(weights, offsets, values, heads, frames, points, out_conv=None, alpha=None):
    """Sample each head's frame values at learned offsets and blend by the weights.

    weights: (..., h, w, M*T*K), normalized per head.
    offsets: (..., h, w, 2*M*T*K), layout (M, T, K, [row, col]).
    values:  (..., h, w, C*T), layout (T, M, C/M).
    """
    batched = values.ndim == 4
    if not batched:
        weights, offsets, values = (ops.reshape(t, (1,) + t.shape) for t in (weights, offsets, values))
    B, h, w, ct = values.shape
    M, T, K = heads, frames, points
    if ct % (T * M):
        raise ConfigError(f"value channels {ct} do not split into {T} frames x {M} heads")
    if weights.shape[-1] != M * T * K or offsets.shape[-1] != 2 * M * T * K:
        raise DimensionError("attention weight / offset channels disagree with M*T*K")
    cv = ct // (T * M)

    v = ops.reshape(values, (B, h, w, T, M, cv))
    v = ops.reshape(ops.transpose(v, (0, 3, 4, 1, 2, 5)), (B * T * M, h, w, cv))

    off = ops.reshape(offsets, (B, h, w, M, T, K, 2))
    off = ops.transpose(off, (0, 4, 3, 1, 2, 5, 6))  # B, T, M, h, w, K, 2
    grid = ops.base_grid(h, w, dtype=values.dtype)[:, :, None, :]
    coords = ops.reshape(off + grid, (B * T * M, h * w * K, 2))
    sampled = ops.grid_sample(v, coords)
    sampled = ops.reshape(sampled, (B, T, M, h, w, K, cv))

    wts = ops.reshape(weights, (B, h, w, M, T, K))
    wts = ops.reshape(ops.transpose(wts, (0, 4, 3, 1, 2, 5)), (B, T, M, h, w, K, 1))
    out = ops.sum(ops.sum(sampled * wts, axis=5), axis=1)  # B, M, h, w, cv
    out = ops.reshape(ops.transpose(out, (0, 2, 3, 1, 4)), (B, h, w, M * cv))
    if out_conv is not None:
        out = out_conv(out, alpha)
    return out if batched else ops.reshape(out, out.shape[1:])


class DraLayer(Module):
    def __init__(self, rng, channels, cfg, dtype=np.float32):
        self.cfg = cfg
        P = cfg.paths
        self.controller = PathController(rng, channels, P, dtype)
        self.attn_conv = RoutedConv(rng, 3 * channels, cfg.slots, 3, P, dtype)
        self.offset_conv = RoutedConv(rng, 3 * channels, 2 * cfg.slots, 3, P, dtype, zero=True)
        self.value_conv = RoutedConv(rng, 3 * channels, channels * cfg.frames, 3, P, dtype)
        self.out_conv = RoutedConv(rng, channels, channels, 3, P, dtype)

    def routed_convs(self):
        return [self.attn_conv, self.offset_conv, self.value_conv, self.out_conv]

    def __call__(self, m, f_prev, f_next, f_prev_w, f_next_w, agg, hard=False, temperature=1.0, rng=None):
        return dra_layer(m, f_prev, f_next, f_prev_w, f_next_w, agg, self, hard, temperature, rng)


def dra_layer(m, f_prev, f_next, f_prev_w, f_next_w, agg, node, hard=False, temperature=1.0, rng=None):
    """One routing layer: M_{n+1} = M_n + Conv(DefAtt(...)) with kernels routed by alpha_n."""
    alpha = node.controller(m, agg)
    route = harden(alpha, temperature, rng) if hard else alpha
    a, offsets, values = dma_project(m, f_prev_w, f_next_w, f_prev, f_next, node, route)
    cfg = node.cfg
    out = deformable_attention(a, offsets, values, cfg.heads, cfg.frames, cfg.points, node.out_conv, route)
    return m + out, alpha
