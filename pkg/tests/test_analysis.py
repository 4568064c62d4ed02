import csv
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from uniwrv.analysis import (
    PSNR_CAP,
    SCHEMES,
    complexity_table,
    conv_complexity,
    count_complexity,
    psnr,
    routed_conv_shapes,
    specialization_report,
    ssim,
    top_k_purity,
    write_complexity_csv,
    write_report_csvs,
)
from uniwrv.errors import ConfigError, DimensionError
from uniwrv.model import ModelConfig
from uniwrv.weathergen import ClipData


def psnr_oracle(a, b):
    mse = math.fsum(((x - y) ** 2 for x, y in zip(a.ravel().tolist(), b.ravel().tolist()))) / a.size
    return 99.0 if mse == 0 else -10 * math.log10(mse)


def ssim_oracle(a, b, size=11, sigma=1.5):
    """Window-by-window SSIM with an explicit 2-D Gaussian."""
    ya = a[..., 0] * 0.299 + a[..., 1] * 0.587 + a[..., 2] * 0.114
    yb = b[..., 0] * 0.299 + b[..., 1] * 0.587 + b[..., 2] * 0.114
    r = np.arange(size) - size // 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma**2))
    g /= g.sum()
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for i in range(ya.shape[0] - size + 1):
        for j in range(ya.shape[1] - size + 1):
            pa, pb = ya[i:i + size, j:j + size], yb[i:i + size, j:j + size]
            ma, mb = (g * pa).sum(), (g * pb).sum()
            va = (g * (pa - ma) ** 2).sum()
            vb = (g * (pb - mb) ** 2).sum()
            cov = (g * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def textured(rng, h=24, w=24):
    r, c = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    base = 0.5 + 0.3 * np.sin(0.7 * r)[..., None] * np.cos(0.4 * c)[..., None]
    return np.clip(base + 0.1 * rng.standard_normal((h, w, 3)), 0, 1)


# ---------------------------------------------------------------- psnr / ssim


def test_psnr_examples():
    a = np.full((4, 4, 3), 0.3)
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert psnr(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) == 0.0


def test_psnr_shape_mismatch():
    with pytest.raises(DimensionError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_ssim_examples(rng):
    a = textured(rng)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, 1 - a) < 0.3
    b = np.clip(a + 0.05 * rng.standard_normal(a.shape), 0, 1)
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-10


def test_ssim_rejects_small_images():
    with pytest.raises(DimensionError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


def test_metrics_match_brute_force(rng):
    for _ in range(10):
        a = rng.uniform(0, 1, (14, 17, 3))
        b = np.clip(a + rng.normal(0, rng.uniform(0.01, 0.3), a.shape), 0, 1)
        assert psnr(a, b) == pytest.approx(psnr_oracle(a, b), abs=1e-8)
        assert ssim(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-8)


@given(st.integers(0, 2**30), st.floats(0.001, 0.5))
def test_metric_ranges(seed, noise):
    r = np.random.default_rng(seed)
    a = r.uniform(0, 1, (12, 12, 3))
    b = np.clip(a + r.normal(0, noise, a.shape), 0, 1)
    assert 0 <= psnr(a, b) <= PSNR_CAP
    assert -1 <= ssim(a, b) <= 1 + 1e-12


# ---------------------------------------------------------------- complexity


def test_single_conv_counts():
    params = {s: conv_complexity(3, 4, 4, 3, s, hw=256)[0] for s in SCHEMES}
    assert params == {"static": 144, "vanilla_routing": 432, "parameter_routing": 432, "modify_weight": 186}


def test_unknown_scheme():
    with pytest.raises(ConfigError):
        conv_complexity(3, 4, 4, 3, "dense", 16)
    with pytest.raises(ConfigError):
        count_complexity(ModelConfig(), "static", input_size=30)


@given(st.integers(2, 6), st.integers(2, 16), st.integers(1, 3))
def test_scheme_relations(paths, base_channels, routing_layers):
    cfg = ModelConfig(base_channels=base_channels, paths=paths, routing_layers=routing_layers, heads=2)
    rows = {r.scheme: r for r in complexity_table(cfg)}
    st_, va, pr, mw = (rows[s] for s in SCHEMES)
    convs = routed_conv_shapes(cfg)
    assert mw.params - st_.params == sum(paths * (2 * k + ci + co) for k, ci, co in convs)
    assert va.params == pr.params == paths * st_.params
    assert mw.params < va.params
    assert va.macs == paths * st_.macs
    assert mw.macs - st_.macs == sum(k * k * ci * co * (paths + 1) for k, ci, co in convs)
    assert va.macs / pr.macs == pytest.approx(paths, rel=0.03)
    assert rows["static"].flops == 2 * st_.macs


def test_complexity_csv(tmp_path):
    rows = complexity_table(ModelConfig())
    write_complexity_csv(rows, tmp_path / "c.csv")
    with open(tmp_path / "c.csv") as fh:
        got = list(csv.DictReader(fh))
    assert [r["scheme"] for r in got] == list(SCHEMES)
    assert [int(r["params"]) for r in got] == [r.params for r in rows]


# ---------------------------------------------------------------- specialization


def test_purity_examples():
    assert top_k_purity([2, 2, 2, 2]) == 1.0
    assert top_k_purity([0, 1, 2, 3], k=3) == 0.75
    assert top_k_purity([5, 5, 1, 1, 7, 9], k=2) == pytest.approx(4 / 6)
    assert math.isnan(top_k_purity([]))


def test_purity_chance_baseline():
    # uniform indices over P_n entries should land near min(1, k / P_n)
    r = np.random.default_rng(0)
    for pn in (4, 8, 16):
        vals = [top_k_purity(r.integers(0, pn, 4000)) for _ in range(20)]
        assert np.mean(vals) == pytest.approx(min(1.0, 3 / pn), abs=0.02)


def fake_clips(rng, conds, n=2, T=4, h=8, w=8):
    out = []
    for c in conds:
        for i in range(n):
            clean = rng.uniform(0, 1, (T, h, w, 3))
            out.append(ClipData(Path(f"c{c}_{i}"), c, clean, np.clip(clean * 0.7 + 0.2 * (c % 3), 0, 1)))
    return out


def test_report_structure(tiny_model, rng, tmp_path):
    clips = fake_clips(rng, (1, 4, 9))
    rep = specialization_report(tiny_model, clips, samples_per_condition=3, batch_size=2)
    assert set(rep.mean_alpha) == set(rep.purity) == set(rep.histograms) == {1, 4, 9}
    N, P = tiny_model.cfg.routing_layers, tiny_model.cfg.paths
    for m in rep.mean_alpha.values():
        assert m.shape == (N, P)
        np.testing.assert_allclose(m.sum(-1), 1.0, atol=1e-12)
    for h in rep.histograms.values():
        assert h.shape == (len(tiny_model.wpgm_layers()), tiny_model.cfg.prior_entries)
        assert np.all(h.sum(-1) == 3)
    assert len(rep.routing_rows) == 9 * N
    assert rep.routing_gap(1, 1).tolist() == [0.0] * N
    assert 3 / tiny_model.cfg.prior_entries <= min(rep.purity.values())

    write_report_csvs(rep, tmp_path, tiny_model.banks())
    names = {p.name for p in tmp_path.iterdir()}
    assert names == {"routing.csv", "priors.csv", "purity.csv", "mean_routing.csv", "bank_usage.csv"}
    with open(tmp_path / "routing.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["sample", "condition", "layer"] + [f"alpha_{i}" for i in range(P)]
