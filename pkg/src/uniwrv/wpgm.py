"""Prior banks, latent mapping, nearest-prior query and the two prior losses."""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, UsageError
from .tensorkit import ops
from .tensorkit.nn import Conv, Linear, Module
from .tensorkit.tensor import Tensor, sg

log = logging.getLogger(__name__)


class PriorBank(Module):
    """``entries`` learnable prior vectors of width ``channels`` plus usage counters."""

    def __init__(self, rng, entries, channels, layer=0, dtype=np.float32):
        if entries < 2:
            raise ConfigError("a prior bank needs at least 2 entries")
        self.layer = layer
        self.vectors = Tensor(rng.uniform(-0.5, 0.5, (entries, channels)).astype(dtype), requires_grad=True)
        self.usage_counts = np.zeros(entries, dtype=np.int64)

    @property
    def entries(self):
        return self.vectors.shape[0]

    @property
    def channels(self):
        return self.vectors.shape[1]

    def reset_usage(self):
        self.usage_counts[:] = 0


class MappingNet(Module):
    """Pool -> FC -> ReLU -> FC, producing the latent the bank is queried with."""

    def __init__(self, rng, channels, dtype=np.float32):
        self.channels = channels
        self.fc1 = Linear(rng, channels, channels, dtype)
        self.fc2 = Linear(rng, channels, channels, dtype)

    def __call__(self, f):
        return embed(f, self)


class ResidualBlock(Module):
    """conv3x3 -> ReLU -> conv3x3 with an additive skip from the block input."""

    def __init__(self, rng, channels, dtype=np.float32):
        self.channels = channels
        self.conv1 = Conv(rng, channels, channels, 3, dtype)
        self.conv2 = Conv(rng, channels, channels, 3, dtype)

    def __call__(self, x):
        return x + self.conv2(ops.relu(self.conv1(x)))


@dataclass
class PriorRecord:
    layer: int
    latent: Tensor  # g, shape (C,) or (B, C)
    prior: Tensor  # q, the gathered live bank rows
    index: np.ndarray  # int, shape () or (B,)
    bank: PriorBank

    def select(self, rows):
        """Restrict a batched record to a subset of rows (e.g. the center frame)."""
        return PriorRecord(self.layer, ops.getitem(self.latent, rows), ops.getitem(self.prior, rows),
                           self.index[rows], self.bank)


def embed(f, net):
    if f.shape[-1] != net.channels:
        raise DimensionError(f"feature has {f.shape[-1]} channels, mapping net expects {net.channels}")
    pooled = ops.global_avg_pool(f)
    return net.fc2(ops.relu(net.fc1(pooled)))


def nearest_indices(latent, vectors):
    """Row-wise argmin of squared l2 distance; ties resolve to the lowest index."""
    g = np.atleast_2d(latent)
    d = ((g[:, None, :] - vectors[None, :, :]) ** 2).sum(-1)
    return np.argmin(d, axis=1)


def query(g, bank, count=True):
    """Nearest bank entry for each latent row -> (live prior rows, indices)."""
    if bank.entries == 0:
        raise UsageError("empty prior bank")
    if g.shape[-1] != bank.channels:
        raise DimensionError(f"latent width {g.shape[-1]} != bank width {bank.channels}")
    idx = nearest_indices(g.data, bank.vectors.data)
    if count:
        np.add.at(bank.usage_counts, idx, 1)
    if g.ndim == 1:
        idx = idx[0]
    return ops.getitem(bank.vectors, idx), idx


class WPGM(Module):
    """Query a prior from the input's latent, add it as a prompt, run the block."""

    def __init__(self, rng, channels, entries, layer=0, dtype=np.float32, block=None):
        self.layer = layer
        self.mapping = MappingNet(rng, channels, dtype)
        self.bank = PriorBank(rng, entries, channels, layer, dtype)
        self.block = block if block is not None else ResidualBlock(rng, channels, dtype)

    def __call__(self, f):
        return wpgm_forward(f, self.bank, self.mapping, self.block)


def wpgm_forward(f, bank, net, block):
    # g only feeds the query and the prior losses; keep those losses off the trunk
    g = embed(sg(f), net)
    q, idx = query(g, bank)
    if q.shape[-1] != f.shape[-1]:
        raise DimensionError("prior width differs from feature channels")
    # broadcast over H x W
    qb = ops.reshape(q, q.shape[:-1] + (1, 1, q.shape[-1]))
    out = block(f + qb)
    return out, PriorRecord(bank.layer, g, q, np.asarray(idx), bank)


def _flag_zero(a, b):
    za = np.linalg.norm(np.atleast_2d(a.data), axis=-1) == 0
    zb = np.linalg.norm(np.atleast_2d(b.data), axis=-1) == 0
    if np.any(za | zb):
        log.warning("zero vector in prior cosine; treating cosine as 0")


def prior_vector_terms(records):
    """(bank term, mapping term) summed over records; each averaged over batch rows.

    The bank term only reaches bank vectors, the mapping term only the latent path.
    """
    if not records:
        raise UsageError("prior_vector_loss needs at least one record")
    bank_total = map_total = None
    for rec in records:
        _flag_zero(rec.latent, rec.prior)
        bank_term = ops.mean(1.0 - ops.cosine_similarity(rec.prior, sg(rec.latent)))
        map_term = ops.mean(1.0 - ops.cosine_similarity(sg(rec.prior), rec.latent))
        bank_total = bank_term if bank_total is None else bank_total + bank_term
        map_total = map_term if map_total is None else map_total + map_term
    return bank_total, map_total


def prior_vector_loss(records, beta=0.25):
    """Cosine commitment loss: bank side pulls toward sg(latent), mapping side by beta."""
    bank_term, map_term = prior_vector_terms(records)
    return bank_term + beta * map_term


def prior_contrastive_loss(records, tau=0.07):
    """InfoNCE over each bank: the queried entry is the positive, the rest negatives."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if not records:
        raise UsageError("prior_contrastive_loss needs at least one record")
    total = None
    for rec in records:
        if rec.bank.entries < 2:
            raise ConfigError("contrastive loss needs at least 2 bank entries")
        g_hat = ops.l2_normalize(rec.latent)
        q_hat = ops.l2_normalize(rec.bank.vectors)
        logits = ops.matmul(ops.reshape(g_hat, (-1, g_hat.shape[-1])), ops.transpose(q_hat, (1, 0))) / tau
        logp = ops.log_softmax(logits, axis=-1)
        rows = np.arange(logits.shape[0])
        idx = np.atleast_1d(rec.index)
        term = -ops.mean(ops.getitem(logp, (rows, idx)))
        total = term if total is None else total + term
    return total


def bank_usage(bank, reset=False):
    counts = bank.usage_counts.copy()
    if reset:
        bank.reset_usage()
    return counts
