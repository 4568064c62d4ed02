"""Image metrics, routing-scheme complexity counts and specialization statistics."""

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError

PSNR_CAP = 99.0
LUMA = np.array([0.299, 0.587, 0.114])
SCHEMES = ("static", "vanilla_routing", "parameter_routing", "modify_weight")


# ---------------------------------------------------------------- metrics


def psnr(a, b):
    """PSNR in dB for images in [0, 1]; identical inputs give PSNR_CAP."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, -10.0 * math.log10(mse)))


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _filter_valid(img, w):
    n = w.size
    rows = sliding_window_view(img, n, axis=0) @ w
    return sliding_window_view(rows, n, axis=1) @ w


def luminance(img):
    img = np.asarray(img, dtype=np.float64)
    return img @ LUMA if img.ndim == 3 else img


def ssim(a, b, k1=0.01, k2=0.03, size=11, sigma=1.5):
    """Mean SSIM of the luminance channel with a Gaussian window, no padding."""
    ya, yb = luminance(a), luminance(b)
    if ya.shape != yb.shape:
        raise DimensionError(f"ssim shapes differ: {ya.shape} vs {yb.shape}")
    if min(ya.shape) < size:
        raise DimensionError(f"images smaller than the {size}-tap window")
    w = gaussian_window(size, sigma)
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2
    mu_a = _filter_valid(ya, w)
    mu_b = _filter_valid(yb, w)
    saa = _filter_valid(ya * ya, w) - mu_a**2
    sbb = _filter_valid(yb * yb, w) - mu_b**2
    sab = _filter_valid(ya * yb, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------- complexity


@dataclass
class ComplexityRow:
    scheme: str
    params: int
    macs: int

    @property
    def flops(self):
        return 2 * self.macs


def routed_conv_shapes(model_cfg):
    """(k, Cin, Cout) of every routed convolution in the aggregation stage."""
    c = model_cfg.dra_channels
    slots = model_cfg.heads * 3 * model_cfg.points
    per_layer = [(3, 3 * c, slots), (3, 3 * c, 2 * slots), (3, 3 * c, 3 * c), (3, c, c)]
    return per_layer * model_cfg.routing_layers


def conv_complexity(k, cin, cout, paths, scheme, hw):
    base = k * k * cin * cout
    conv = hw * base
    if scheme == "static":
        return base, conv
    if scheme == "vanilla_routing":
        return paths * base, paths * conv
    if scheme == "parameter_routing":
        return paths * base, conv + paths * base
    if scheme == "modify_weight":
        return base + paths * (2 * k + cin + cout), conv + base * (paths + 1)
    raise ConfigError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")


def count_complexity(model_cfg, scheme, input_size=64):
    """Exact params / MACs of the routed convolutions under one aggregation scheme."""
    if input_size % 4:
        raise ConfigError("input size must be divisible by 4")
    hw = (input_size // 4) ** 2
    params = macs = 0
    for k, cin, cout in routed_conv_shapes(model_cfg):
        p, m = conv_complexity(k, cin, cout, model_cfg.paths, scheme, hw)
        params += p
        macs += m
    return ComplexityRow(scheme, params, macs)


def complexity_table(model_cfg, input_size=64):
    return [count_complexity(model_cfg, s, input_size) for s in SCHEMES]


def write_complexity_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scheme", "params", "macs"])
        for r in rows:
            w.writerow([r.scheme, r.params, r.macs])


# ---------------------------------------------------------------- specialization


def top_k_purity(indices, k=3):
    """Fraction of ``indices`` that fall in their own ``k`` most frequent values."""
    indices = np.asarray(indices).ravel()
    if indices.size == 0:
        return float("nan")
    counts = Counter(indices.tolist())
    top = sorted(counts, key=lambda i: (-counts[i], i))[:k]
    return float(np.isin(indices, top).mean())


@dataclass
class SpecializationReport:
    mean_alpha: dict = field(default_factory=dict)  # condition -> (N, P) array
    histograms: dict = field(default_factory=dict)  # condition -> (layers, P_n) counts
    purity: dict = field(default_factory=dict)  # condition -> float
    routing_rows: list = field(default_factory=list)  # (sample, condition, layer, alpha...)
    purity_layer: int = 0

    def routing_gap(self, a, b):
        """Per-layer L1 distance between two conditions' mean routing vectors."""
        return np.abs(self.mean_alpha[a] - self.mean_alpha[b]).sum(axis=-1)


def specialization_report(model, clips, samples_per_condition=32, batch_size=8, k=3):
    """Frozen inference over test triplets, grouped by condition."""
    from .weathergen import triplets

    by_cond = {}
    for ci, t in triplets(clips):
        by_cond.setdefault(clips[ci].condition, []).append((ci, t))

    report = SpecializationReport(purity_layer=model.cfg.extract_layers - 1)
    n_layers = len(model.wpgm_layers())
    pn = model.cfg.prior_entries
    sample = 0
    for cond in sorted(by_cond):
        items = by_cond[cond][:samples_per_condition]
        alphas, indices = [], []
        for s in range(0, len(items), batch_size):
            chunk = items[s:s + batch_size]
            d = np.stack([clips[ci].degraded[t - 1:t + 2] for ci, t in chunk])
            _, aux = model.forward(d.astype(model.dtype))
            alphas.append(np.stack(aux["trace"].alphas, axis=1))  # B, N, P
            indices.append(np.stack([np.atleast_1d(r.index) for r in aux["records"]], axis=1))  # B, L
        alphas = np.concatenate(alphas)
        indices = np.concatenate(indices)
        report.mean_alpha[cond] = alphas.mean(axis=0)
        report.histograms[cond] = np.stack([np.bincount(indices[:, li], minlength=pn) for li in range(n_layers)])
        report.purity[cond] = top_k_purity(indices[:, report.purity_layer], k)
        for row in alphas:
            for layer, a in enumerate(row):
                report.routing_rows.append((sample, cond, layer, *a.tolist()))
            sample += 1
    return report


def write_report_csvs(report, out_dir, banks=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    P = len(report.routing_rows[0]) - 3 if report.routing_rows else 0
    with open(out / "routing.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "condition", "layer"] + [f"alpha_{i}" for i in range(P)])
        w.writerows(report.routing_rows)
    with open(out / "priors.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["condition", "layer", "index", "count"])
        for cond, hist in sorted(report.histograms.items()):
            for layer, counts in enumerate(hist):
                for idx, n in enumerate(counts):
                    w.writerow([cond, layer, idx, int(n)])
    with open(out / "purity.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["condition", "layer", "purity"])
        for cond, p in sorted(report.purity.items()):
            w.writerow([cond, report.purity_layer, f"{p:.6f}"])
    with open(out / "mean_routing.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["condition", "layer"] + [f"alpha_{i}" for i in range(P)])
        for cond, m in sorted(report.mean_alpha.items()):
            for layer, a in enumerate(m):
                w.writerow([cond, layer] + [f"{x:.6f}" for x in a])
    if banks is not None:
        write_bank_usage(banks, out / "bank_usage.csv")


def write_bank_usage(banks, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "index", "count"])
        for bank in banks:
            for idx, n in enumerate(bank.usage_counts):
                w.writerow([bank.layer, idx, int(n)])
