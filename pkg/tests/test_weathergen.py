import filecmp
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uniwrv.analysis import psnr
from uniwrv.errors import ConfigError, DatasetError
from uniwrv.weathergen import (
    CONDITIONS,
    DatasetConfig,
    DegradationRecipe,
    NightParams,
    RainParams,
    SnowParams,
    apply_haze,
    apply_night,
    apply_rain,
    apply_snow,
    condition_flags,
    condition_id,
    degrade,
    load_split,
    make_dataset,
    plan,
    rain_mask,
    render_clean_clip,
    sample_recipe,
    snow_alpha,
    triplets,
)


@pytest.fixture(scope="module")
def clip():
    return render_clean_clip(11, 4, 32, 40)


# ---------------------------------------------------------------- taxonomy


def test_fifteen_conditions_cover_all_subsets():
    subsets = {tuple(condition_flags(c).values()) for c in CONDITIONS}
    assert len(CONDITIONS) == 15 and len(subsets) == 15
    assert (False,) * 4 not in subsets


@pytest.mark.parametrize("cid", CONDITIONS)
def test_condition_id_roundtrip(cid):
    assert condition_id(**condition_flags(cid)) == cid


def test_condition_rejects_empty_and_out_of_range():
    for bad in (0, 16, -1):
        with pytest.raises(ConfigError):
            condition_flags(bad)
    with pytest.raises(ConfigError):
        condition_id()


def test_recipe_dict_roundtrip():
    r = sample_recipe(13, np.random.default_rng(0), seed=9)
    assert DegradationRecipe.from_dict(r.to_dict()) == r


# ---------------------------------------------------------------- clean scenes


def test_clean_clip_is_deterministic():
    a, b = render_clean_clip(3, 3, 16, 16), render_clean_clip(3, 3, 16, 16)
    np.testing.assert_array_equal(a.clean, b.clean)
    np.testing.assert_array_equal(a.depth, b.depth)


def test_camera_moves(clip):
    assert np.abs(np.diff(clip.clean, axis=0)).mean() > 0


def test_clean_ranges(clip):
    assert clip.clean.shape == (4, 32, 40, 3)
    assert clip.clean.min() >= 0 and clip.clean.max() <= 1
    assert clip.depth.min() > 0 and clip.depth.max() <= 1


def test_clip_needs_three_frames():
    with pytest.raises(ConfigError):
        render_clean_clip(0, 2, 8, 8)


# ---------------------------------------------------------------- haze


def test_haze_zero_beta_is_identity(clip):
    np.testing.assert_array_equal(apply_haze(clip.clean[0], clip.depth[0], 0.0, (0.9,) * 3), clip.clean[0])


def test_haze_saturates_to_airlight(clip):
    out = apply_haze(clip.clean[0], clip.depth[0], 1e4, (0.8, 0.85, 0.9))
    np.testing.assert_allclose(out, np.broadcast_to([0.8, 0.85, 0.9], out.shape), atol=1e-12)


def test_haze_half_transmission():
    depth = np.full((4, 4), 0.5)
    out = apply_haze(np.zeros((4, 4, 3)), depth, 2 * math.log(2), (1.0, 1.0, 1.0))
    np.testing.assert_allclose(out, 0.5, rtol=1e-14)


# ---------------------------------------------------------------- rain and snow


def test_zero_density_is_identity(clip):
    f = clip.clean[1]
    np.testing.assert_array_equal(apply_rain(f, 1, RainParams(density=0.0), 5), f)
    np.testing.assert_array_equal(apply_snow(f, 1, SnowParams(density=0.0), 5), f)


def test_occluder_masks_are_deterministic():
    a = rain_mask((24, 24), 3, RainParams(), 7)
    np.testing.assert_array_equal(a, rain_mask((24, 24), 3, RainParams(), 7))
    b = snow_alpha((24, 24), 3, SnowParams(), 7)
    np.testing.assert_array_equal(b, snow_alpha((24, 24), 3, SnowParams(), 7))
    assert not np.array_equal(a, rain_mask((24, 24), 4, RainParams(), 7))


def test_rain_brightens_mid_gray():
    gray = np.full((32, 32, 3), 0.5)
    assert apply_rain(gray, 0, RainParams(intensity=0.4), 1).mean() > 0.5


@settings(max_examples=15)
@given(st.integers(0, 2**20), st.integers(0, 6))
def test_occluders_stay_in_range(seed, t):
    f = np.random.default_rng(seed).uniform(0, 1, (16, 16, 3))
    for out in (apply_rain(f, t, RainParams(intensity=0.9), seed), apply_snow(f, t, SnowParams(), seed)):
        assert out.min() >= 0 and out.max() <= 1


# ---------------------------------------------------------------- night


def test_night_identity(clip):
    np.testing.assert_array_equal(apply_night(clip.clean[0], 1.0, 1.0, 0.0, 0), clip.clean[0])


def test_night_closed_form():
    np.testing.assert_array_equal(apply_night(np.ones((3, 3, 3)), 2.0, 0.5, 0.0, 0), 0.5)


def test_night_noise_reproducible():
    f = np.full((8, 8, 3), 0.6)
    a = apply_night(f, 2.0, 0.5, 0.05, [4, 1])
    np.testing.assert_array_equal(a, apply_night(f, 2.0, 0.5, 0.05, [4, 1]))
    assert not np.array_equal(a, apply_night(f, 2.0, 0.5, 0.05, [4, 2]))


# ---------------------------------------------------------------- degrade


def test_night_only_identity_recipe(clip):
    r = DegradationRecipe(8, night=NightParams(1.0, 1.0, 0.0))
    out = degrade(clip, r)
    np.testing.assert_array_equal(out.degraded, clip.clean)
    assert out.degraded.shape == out.clean.shape


def test_degrade_is_deterministic(clip):
    r = sample_recipe(15, np.random.default_rng(2), seed=3)
    np.testing.assert_array_equal(degrade(clip, r).degraded, degrade(clip, r).degraded)


def test_quadruple_recipe_changes_most_pixels(clip):
    out = degrade(clip, DegradationRecipe(15, seed=1)).degraded
    changed = np.any(np.abs(out - clip.clean) > 1e-6, axis=-1)
    assert changed.mean() > 0.5


def _default_psnr(clip, cid):
    return psnr(degrade(clip, DegradationRecipe(cid, seed=1)).degraded, clip.clean)


@pytest.mark.parametrize("chain", [(1, 3, 7, 15), (2, 6, 7, 15), (4, 5, 7, 15), (1, 5, 7, 15), (2, 3, 7, 15)])
def test_psnr_falls_as_flags_are_added(clip, chain):
    vals = [_default_psnr(clip, c) for c in chain]
    assert all(a > b for a, b in zip(vals, vals[1:])), vals


@pytest.mark.parametrize("cid", CONDITIONS)
def test_default_recipes_are_non_degenerate(clip, cid):
    assert _default_psnr(clip, cid) < 35.0


# ---------------------------------------------------------------- dataset


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    cfg = DatasetConfig(clips_per_condition=4, frames=8, height=16, width=16, seed=5)
    root = tmp_path_factory.mktemp("ds") / "data"
    make_dataset(cfg, root)
    return cfg, root


def test_split_counts(dataset):
    _, root = dataset
    assert len(list((root / "train").glob("cond_*/clip_*"))) == 48
    assert len(list((root / "test").glob("cond_*/clip_*"))) == 12


def test_split_is_stratified(dataset):
    _, root = dataset
    assert {int(p.name[5:]) for p in (root / "train").glob("cond_*")} == set(CONDITIONS)
    assert len(list((root / "test").glob("cond_*"))) == 12
    cfg = DatasetConfig(conditions=[1, 2], clips_per_condition=20)
    for c in (1, 2):
        assert sum(1 for s, cc, _, _ in plan(cfg) if cc == c and s == "test") == 4


def test_clip_layout(dataset):
    _, root = dataset
    d = next((root / "train").glob("cond_*/clip_*"))
    assert len(list((d / "gt").glob("frame_*.png"))) == 8
    assert sorted(p.name for p in (d / "in").iterdir()) == sorted(p.name for p in (d / "gt").iterdir())
    assert (d / "recipe.json").read_text().count('"seed"') == 2


def test_loaded_frames_pair_up(dataset):
    _, root = dataset
    clips = load_split(root, "test")
    assert len(clips) == 12
    for c in clips:
        assert c.clean.shape == c.degraded.shape == (8, 16, 16, 3)
    assert len(triplets(clips)) == 12 * 6
    assert {c.condition for c in load_split(root, "test", conditions=[3])} == {3}


def test_regeneration_is_bit_identical(dataset, tmp_path):
    cfg, root = dataset
    again = tmp_path / "again"
    make_dataset(cfg, again)
    cmp = filecmp.dircmp(root, again)

    def same(c):
        if c.left_only or c.right_only or c.diff_files or c.funny_files:
            return False
        _, mismatch, errors = filecmp.cmpfiles(c.left, c.right, c.common_files, shallow=False)
        return not mismatch and not errors and all(same(s) for s in c.subdirs.values())

    assert same(cmp)


def test_parallel_generation_matches_serial(tmp_path):
    kw = dict(conditions=[1, 12], clips_per_condition=2, frames=3, height=8, width=8, seed=2)
    make_dataset(DatasetConfig(**kw), tmp_path / "a")
    make_dataset(DatasetConfig(**kw, workers=2), tmp_path / "b")
    for p in sorted((tmp_path / "a").rglob("*.png")):
        assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()


def test_refuses_non_empty_directory(tmp_path):
    (tmp_path / "keep.txt").write_text("x")
    cfg = DatasetConfig(conditions=[1], clips_per_condition=1, frames=3, height=8, width=8)
    with pytest.raises(DatasetError):
        make_dataset(cfg, tmp_path)
    make_dataset(cfg, tmp_path, force=True)
    assert not (tmp_path / "keep.txt").exists()


def test_dataset_config_validation():
    with pytest.raises(ConfigError):
        DatasetConfig(frames=2)
    with pytest.raises(ConfigError):
        DatasetConfig(height=18)
    with pytest.raises(ConfigError):
        DatasetConfig.from_dict({"clips": 3})
    assert DatasetConfig(conditions="all").conditions == list(CONDITIONS)


def test_missing_split_raises(tmp_path):
    with pytest.raises(DatasetError):
        load_split(tmp_path, "train")
