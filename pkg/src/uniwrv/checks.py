"""Gradient-check generators for the composite losses and layers.

Importing this module adds them to ``tensorkit.gradcheck.REGISTRY``. Zero
initialized heads are replaced by small random weights so that sampling
coordinates never sit on integer grid points, where bilinear interpolation
has kinks. Bank indices are fixed when the inputs are generated.
"""

from types import SimpleNamespace

import numpy as np

from .dra import DmaConfig, DraLayer, FlowField, aggregate_prior, dra_layer, warp_loss
from .model import ModelConfig, UniWRV, total_loss
from .tensorkit import ops
from .tensorkit.gradcheck import REGISTRY, register
from .tensorkit.tensor import Tensor
from .wpgm import MappingNet, PriorRecord, ResidualBlock, embed, nearest_indices, prior_contrastive_loss, prior_vector_loss


def _fake_bank(vectors, layer=0):
    return SimpleNamespace(vectors=vectors, entries=vectors.shape[0], layer=layer)


def _record(g, vectors, idx):
    return PriorRecord(0, g, ops.getitem(vectors, idx), idx, _fake_bank(vectors))


def _set_path(root, name, value):
    *parents, last = name.split(".")
    obj = root
    for part in parents:
        obj = obj[int(part)] if part.isdigit() else getattr(obj, part)
    if last.isdigit():
        obj[int(last)] = value
    else:
        setattr(obj, last, value)


def _swap_params(module, names):
    """fn(*tensors) wrapper that installs ``tensors`` as the named parameters."""

    def install(tensors):
        for name, t in zip(names, tensors):
            _set_path(module, name, t)

    return install


def _randomize(module, rng, scale=0.3):
    for name, p in module.named_parameters():
        if not np.any(p.data != 0) or name.endswith((".u", ".v", ".c", ".o")):
            p.data[...] = p.data + scale * rng.standard_normal(p.data.shape)


@register("prior_vector_loss")
def _g_prior_vector(rng):
    g = rng.standard_normal((3, 4))
    v = rng.standard_normal((5, 4))
    idx = nearest_indices(g, v)
    return (lambda gg, vv: prior_vector_loss([_record(gg, vv, idx)], beta=0.25)), [g, v]


@register("prior_contrastive_loss")
def _g_prior_contrastive(rng):
    g = rng.standard_normal((3, 4))
    v = rng.standard_normal((5, 4))
    idx = nearest_indices(g, v)
    tau = rng.uniform(0.1, 1.0)
    return (lambda gg, vv: prior_contrastive_loss([_record(gg, vv, idx)], tau=tau)), [g, v]


@register("warp_loss")
def _g_warp_loss(rng):
    imgs = [rng.uniform(0, 1, (4, 4, 3)) for _ in range(3)]
    flows = [rng.integers(-1, 2, (4, 4, 2)) + rng.uniform(0.15, 0.85, (4, 4, 2)) for _ in range(2)]

    def fn(gp, gm, gn, fp, fn_):
        return warp_loss(gp, gm, gn, FlowField(fp, fn_))

    return fn, imgs + flows


@register("embed")
def _g_embed(rng):
    net = MappingNet(rng, 3, np.float64)
    f = rng.standard_normal((2, 4, 4, 3))
    names = ["fc1.weight", "fc2.weight"]
    install = _swap_params(net, names)

    def fn(x, w1, w2):
        install([w1, w2])
        return embed(x, net)

    return fn, [f, net.fc1.weight.data.copy(), net.fc2.weight.data.copy()]


@register("wpgm_forward")
def _g_wpgm(rng):
    C = 3
    net = MappingNet(rng, C, np.float64)
    block = ResidualBlock(rng, C, np.float64)
    f = rng.standard_normal((2, 4, 4, C))
    bank = rng.standard_normal((4, C))
    idx = nearest_indices(embed(Tensor(f), net).data, bank)

    def fn(x, vv):
        q = ops.getitem(vv, idx)
        return block(x + ops.reshape(q, (2, 1, 1, C)))

    return fn, [f, bank]


@register("aggregate_prior")
def _g_aggregate(rng):
    return (lambda a, b, c: aggregate_prior([a, b, c], 8)), [rng.standard_normal(n) for n in (2, 4, 8)]


def _tiny_dra(rng):
    cfg = DmaConfig(heads=2, frames=3, points=2, layers=1, paths=2)
    node = DraLayer(rng, 4, cfg, np.float64)
    _randomize(node, rng)
    return node


@register("dra_layer", max_elements=24)
def _g_dra_layer(rng):
    node = _tiny_dra(rng)
    names = ["controller.proj.weight", "attn_conv.mods.u", "offset_conv.weight", "value_conv.mods.c", "out_conv.weight"]
    params = dict(node.named_parameters())
    install = _swap_params(node, names)
    feats = [rng.standard_normal((1, 4, 4, 4)) for _ in range(5)]
    agg = rng.standard_normal((1, 4))

    def fn(m, fp, fn_, fpw, fnw, a, *ws):
        install(ws)
        out, _ = dra_layer(m, fp, fn_, fpw, fnw, a, node)
        return out

    return fn, feats + [agg] + [params[n].data.copy() for n in names]


_TINY = dict(base_channels=2, blocks_per_scale=1, prior_entries=4, paths=2, routing_layers=1,
             heads=2, points=2, flow_width=4, dtype="float64")
_TOTAL_PARAMS = ["dec_out.weight", "enc1.0.bank.vectors", "enc1.0.mapping.fc1.weight",
                 "dra.0.controller.proj.weight", "dra.0.value_conv.mods.o", "flow.head.weight"]


@register("total_loss", max_elements=12)
def _g_total_loss(rng):
    model = UniWRV(ModelConfig(**_TINY, seed=int(rng.integers(1 << 30))))
    _randomize(model, rng, scale=0.1)
    params = dict(model.named_parameters())
    install = _swap_params(model, _TOTAL_PARAMS)
    d = rng.uniform(0, 1, (1, 3, 8, 8, 3))
    g = rng.uniform(0, 1, (1, 3, 8, 8, 3))

    def fn(dd, gg, *ws):
        install(ws)
        restored, aux = model.forward(dd)
        return total_loss(restored, gg, aux["records"], aux["flows"], model.cfg)["total"]

    return fn, [d, g] + [params[n].data.copy() for n in _TOTAL_PARAMS]


COMPOSITES = ("prior_vector_loss", "prior_contrastive_loss", "warp_loss", "embed", "wpgm_forward",
              "aggregate_prior", "dra_layer", "total_loss")


def register_composites():
    """Idempotent; the registrations happen at import."""
    return [n for n in COMPOSITES if n in REGISTRY]
