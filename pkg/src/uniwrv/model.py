"""Encoder / routing aggregation / decoder assembly and the training objective."""

from dataclasses import asdict, dataclass, fields

import numpy as np

from .dra import DmaConfig, DraLayer, FlowEstimator, RouteTrace, aggregate_prior, warp_feature, warp_loss
from .errors import ConfigError, DimensionError
from .tensorkit import ops
from .tensorkit.nn import Conv, Module
from .tensorkit.tensor import Tensor, sg
from .wpgm import WPGM, prior_contrastive_loss, prior_vector_loss


@dataclass
class ModelConfig:
    base_channels: int = 8  # C; scales use C, 2C, 4C and routing runs at 4C
    blocks_per_scale: int = 2
    prior_entries: int = 8  # P_n
    paths: int = 3  # P
    routing_layers: int = 2  # N
    heads: int = 2  # M
    points: int = 4  # K
    flow_width: int = 16
    beta: float = 0.25
    tau: float = 0.07
    hard_routing: bool = False
    gumbel_temperature: float = 1.0
    prior_losses: bool = True
    flow_loss: bool = True
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.base_channels < 1 or self.blocks_per_scale < 1:
            raise ConfigError("base_channels and blocks_per_scale must be >= 1")
        if self.prior_entries < 2:
            raise ConfigError("prior_entries must be >= 2")
        if (4 * self.base_channels) % self.heads:
            raise ConfigError(f"routing width {4 * self.base_channels} does not split across {self.heads} heads")
        self.dma  # validates M/K/N/P

    @property
    def dra_channels(self):
        return 4 * self.base_channels

    @property
    def extract_layers(self):
        return 3 * self.blocks_per_scale

    @property
    def dma(self):
        return DmaConfig(self.heads, 3, self.points, self.routing_layers, self.paths)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class UniWRV(Module):
    def __init__(self, cfg=None):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dt = np.dtype(cfg.dtype)
        C, b, pn = cfg.base_channels, cfg.blocks_per_scale, cfg.prior_entries
        layer = iter(range(6 * b))

        self.enc_in = Conv(rng, 3, C, 3, dt)
        self.enc1 = [WPGM(rng, C, pn, next(layer), dt) for _ in range(b)]
        self.enc_down1 = Conv(rng, 4 * C, 2 * C, 3, dt)
        self.enc2 = [WPGM(rng, 2 * C, pn, next(layer), dt) for _ in range(b)]
        self.enc_down2 = Conv(rng, 8 * C, 4 * C, 3, dt)
        self.enc3 = [WPGM(rng, 4 * C, pn, next(layer), dt) for _ in range(b)]

        self.flow = FlowEstimator(rng, cfg.flow_width, dt)
        self.dra = [DraLayer(rng, cfg.dra_channels, cfg.dma, dt) for _ in range(cfg.routing_layers)]

        self.dec3 = [WPGM(rng, 4 * C, pn, next(layer), dt) for _ in range(b)]
        self.dec_up2 = Conv(rng, 4 * C, 8 * C, 3, dt)
        self.dec2 = [WPGM(rng, 2 * C, pn, next(layer), dt) for _ in range(b)]
        self.dec_up1 = Conv(rng, 2 * C, 4 * C, 3, dt)
        self.dec1 = [WPGM(rng, C, pn, next(layer), dt) for _ in range(b)]
        self.dec_out = Conv(rng, C, 3, 3, dt, zero=True)

        self._gumbel = np.random.default_rng([cfg.seed, 1])

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def wpgm_layers(self):
        return self.enc1 + self.enc2 + self.enc3 + self.dec3 + self.dec2 + self.dec1

    def banks(self):
        return [m.bank for m in self.wpgm_layers()]

    def routed_convs(self):
        return [rc for layer in self.dra for rc in layer.routed_convs()]

    # ------------------------------------------------------------ stages

    def extract(self, frames):
        """Shared-weight encoder over a (B, 3, H, W, 3) triplet.

        Returns the three 1/4-resolution features, the center frame's prior
        records and the center frame's per-scale skip features.
        """
        frames = _as_tensor(frames, self.dtype)
        if frames.ndim != 5 or frames.shape[1] != 3 or frames.shape[-1] != 3:
            raise DimensionError(f"expected (B, 3, H, W, 3) frames, got {frames.shape}")
        B, _, H, W, _ = frames.shape
        if H % 4 or W % 4:
            raise DimensionError(f"frame size {H}x{W} must be divisible by 4")
        x = ops.reshape(ops.transpose(frames, (1, 0, 2, 3, 4)), (3 * B, H, W, 3))
        center = slice(B, 2 * B)
        records, skips = [], []

        x = self.enc_in(x)
        for stage, down in ((self.enc1, self.enc_down1), (self.enc2, self.enc_down2), (self.enc3, None)):
            for blk in stage:
                x, rec = blk(x)
                records.append(rec.select(center))
            skips.append(ops.getitem(x, center))
            if down is not None:
                x = down(ops.pixel_unshuffle(x, 2))

        feats = [ops.getitem(x, slice(i * B, (i + 1) * B)) for i in range(3)]
        return feats[0], feats[1], feats[2], records, skips

    def reconstruct(self, m, skips, d_mid):
        """Decoder; returns the unclamped restored center frame and decoder records."""
        records = []
        x = m + skips[2]
        for stage, up, skip in ((self.dec3, self.dec_up2, skips[1]), (self.dec2, self.dec_up1, skips[0]), (self.dec1, None, None)):
            for blk in stage:
                x, rec = blk(x)
                records.append(rec)
            if up is not None:
                x = ops.pixel_shuffle(up(x), 2) + skip
        if x.shape[:-1] != d_mid.shape[:-1]:
            raise DimensionError("decoder output does not match the frame grid")
        return d_mid + self.dec_out(x), records

    def forward(self, d, g=None):
        """Restore the center frame of degraded triplets ``d`` (B, 3, H, W, 3).

        With ground-truth triplets ``g`` the auxiliary dict also carries every
        loss term under ``losses``.
        """
        cfg = self.cfg
        d = _as_tensor(d, self.dtype)
        f_prev, f_mid, f_next, enc_records, skips = self.extract(d)
        B = d.shape[0]

        small = ops.avg_pool(ops.reshape(ops.transpose(d, (1, 0, 2, 3, 4)), (3 * B,) + d.shape[2:]), 4)
        dp, dm, dn = (ops.getitem(small, slice(i * B, (i + 1) * B)) for i in range(3))
        flows = self.flow(dp, dm, dn)
        # features see the flow but do not train it; only the warp loss does
        f_prev_w = warp_feature(f_prev, sg(flows.prev))
        f_next_w = warp_feature(f_next, sg(flows.next))

        agg = aggregate_prior(enc_records, cfg.dra_channels)
        m = f_mid
        trace = RouteTrace(prior_indices=[np.asarray(r.index) for r in enc_records])
        for layer in self.dra:
            m, alpha = layer(m, f_prev, f_next, f_prev_w, f_next_w, agg,
                             hard=cfg.hard_routing, temperature=cfg.gumbel_temperature, rng=self._gumbel)
            trace.alphas.append(alpha.data.copy())

        d_mid = ops.getitem(d, (slice(None), 1))
        restored, dec_records = self.reconstruct(m, skips, d_mid)
        aux = {
            "records": enc_records + dec_records,
            "extract_records": enc_records,
            "trace": trace,
            "flows": flows,
        }
        if g is not None:
            g = _as_tensor(g, self.dtype)
            aux["losses"] = total_loss(restored, g, aux["records"], flows, cfg)
        return restored, aux

    __call__ = forward


def total_loss(restored, g_triplet, records, flows, cfg):
    """L1 + vector prior loss + contrastive prior loss + flow warp loss, unit weights.

    Returns a dict with the individual terms and ``total``.
    """
    g_mid = ops.getitem(g_triplet, (slice(None), 1))
    terms = {"l1": ops.mean(ops.abs(restored - g_mid))}
    if cfg.prior_losses and records:
        terms["prior_v"] = prior_vector_loss(records, cfg.beta)
        terms["prior_c"] = prior_contrastive_loss(records, cfg.tau)
    if cfg.flow_loss:
        B = g_triplet.shape[0]
        small = ops.avg_pool(ops.reshape(ops.transpose(g_triplet, (1, 0, 2, 3, 4)), (3 * B,) + g_triplet.shape[2:]), 4)
        gp, gm, gn = (ops.getitem(small, slice(i * B, (i + 1) * B)) for i in range(3))
        terms["flow"] = warp_loss(gp, gm, gn, flows)
    total = terms["l1"]
    for key in ("prior_v", "prior_c", "flow"):
        if key in terms:
            total = total + terms[key]
    terms["total"] = total
    return terms
