from pathlib import Path

import numpy as np
import pytest

from uniwrv.config import RunConfig, TrainConfig, load_config, run_config_from_dict
from uniwrv.errors import ConfigError, DatasetError
from uniwrv.model import ModelConfig, UniWRV
from uniwrv.tensorkit.nn import Adam
from uniwrv.train import TripletSampler, evaluate, summarize, train_step
from uniwrv.weathergen import ClipData

from conftest import TINY

ROOT = Path(__file__).resolve().parents[1]


def clips(rng, n=3, T=5, h=16, w=16):
    out = []
    for i in range(n):
        clean = rng.uniform(0, 1, (T, h, w, 3))
        out.append(ClipData(Path(f"clip_{i:03d}"), 1 + i % 2, clean, np.clip(0.8 * clean + 0.1, 0, 1)))
    return out


def one_iteration(data, seed=0):
    model = UniWRV(ModelConfig(**TINY, dtype="float64", seed=seed))
    opt = Adam(model.parameters(), 1e-3)
    sampler = TripletSampler(data, 8, 2, seed=seed)
    d, g = sampler.batch()
    losses = train_step(model, opt, d, g, 1e-3)
    return losses, {n: p.data.copy() for n, p in model.named_parameters()}


def test_one_iteration_is_bit_reproducible(rng):
    data = clips(rng)
    la, pa = one_iteration(data)
    lb, pb = one_iteration(data)
    assert la == lb
    for name in pa:
        assert pa[name].tobytes() == pb[name].tobytes(), name


def test_step_moves_parameters(rng):
    data = clips(rng)
    model = UniWRV(ModelConfig(**TINY, dtype="float64"))
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    d, g = TripletSampler(data, 8, 2).batch()
    train_step(model, Adam(model.parameters(), 1e-3), d, g, 1e-3)
    moved = [n for n, p in model.named_parameters() if not np.array_equal(p.data, before[n])]
    assert "dec_out.weight" in moved


def test_sampler_shapes_and_determinism(rng):
    data = clips(rng)
    a = TripletSampler(data, 8, 3, seed=4).batch()
    b = TripletSampler(data, 8, 3, seed=4).batch()
    assert a[0].shape == a[1].shape == (3, 3, 8, 8, 3)
    np.testing.assert_array_equal(a[0], b[0])
    assert not np.array_equal(a[0], TripletSampler(data, 8, 3, seed=5).batch()[0])


def test_sampler_keeps_pairs_aligned(rng):
    data = clips(rng)
    d, g = TripletSampler(data, 8, 6, seed=1).batch()
    np.testing.assert_allclose(d, np.clip(0.8 * g + 0.1, 0, 1), atol=1e-12)


def test_sampler_rejects_large_crop(rng):
    with pytest.raises(DatasetError):
        TripletSampler(clips(rng), 32, 1)


def test_evaluate_identity_model(rng):
    data = clips(rng, h=16, w=16)
    rows = evaluate(UniWRV(ModelConfig(**TINY, dtype="float64")), data)
    assert len(rows) == 3 * 3
    for r in rows:
        assert r.psnr == pytest.approx(r.input_psnr, abs=1e-9)
    s = summarize(rows)
    assert set(s) == {1, 2, "all"} and s["all"][-1] == 9


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(crop=10)
    with pytest.raises(ConfigError):
        TrainConfig(lr=1e-5, lr_min=1e-3)
    with pytest.raises(ConfigError):
        run_config_from_dict({"optim": {}})
    with pytest.raises(ConfigError):
        run_config_from_dict({"train": {"epochs": 3}})


def test_flags_fold_into_model():
    cfg = run_config_from_dict({"flags": {"hard_routing": True, "grad_mode_64bit": True}})
    m = cfg.resolved_model()
    assert m.hard_routing and m.dtype == "float64"
    assert not RunConfig().resolved_model().hard_routing


@pytest.mark.parametrize("name", ["toy.yaml", "desk.yaml"])
def test_shipped_configs_load(name, tmp_path):
    cfg = load_config(ROOT / "configs" / name)
    cfg.dump(tmp_path / "again.yaml")
    assert load_config(tmp_path / "again.yaml") == cfg
