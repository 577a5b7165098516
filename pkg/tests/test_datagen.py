"""Renderer oracles, latent-draw invariants and dataset round trips."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from touchalign import datagen
from touchalign.datagen import (
    AMP0,
    FREQ_JITTER,
    GRASP_FLIP_PROB,
    SHADE0,
    SPREAD0,
    LatentSample,
    SensorProfile,
    WorldConfig,
    class_frequency_band,
    default_profiles,
    generate_world,
    object_base_frequency,
    read_dataset,
    render_touch,
    render_vision,
    touch_pixels,
    write_dataset,
)


def _profile(bg=(0.2, 0.2, 0.2), stiffness=1.0, illum=(1.0, 0.0), noise=0.0):
    return SensorProfile(
        sensor_id=0, background_color=bg, gel_stiffness=stiffness,
        illumination_direction=illum, noise_sigma=noise,
    )


def _latent(**kw):
    base = dict(
        material_class=0, texture_frequency=2.0, contact_depth=0.5,
        contact_center=(0.5, 0.5), grasp_outcome=1, object_id=0,
    )
    base.update(kw)
    return LatentSample(**base)


# --- pixel-level oracles ----------------------------------------------------

def test_center_pixel_oracle():
    # Contact center on an exact pixel center: bump=1, shading term vanishes.
    w = h = 32
    cx, cy = (16 + 0.5) / 32, (8 + 0.5) / 32
    lat = _latent(contact_center=(cx, cy), contact_depth=0.7, texture_frequency=3.0)
    prof = _profile(stiffness=1.2)
    img = touch_pixels(lat, prof, noise_seed=0, h=h, w=w)
    amp = AMP0 * 0.7 / 1.2**2
    tex = 0.5 * (1.0 + math.sin(2.0 * math.pi * 3.0 * cx))
    expected = min(1.0, 0.2 + amp * tex)
    assert img[8, 16, 0] == pytest.approx(expected, abs=1e-6)
    assert img[8, 16, 1] == img[8, 16, 0] == img[8, 16, 2]


def test_arbitrary_pixel_full_formula():
    w = h = 16
    lat = _latent(contact_center=(0.4, 0.6), contact_depth=0.9, texture_frequency=5.0)
    prof = _profile(bg=(0.3, 0.4, 0.5), stiffness=0.9, illum=(0.6, 0.8))
    img = touch_pixels(lat, prof, noise_seed=0, h=h, w=w)
    spread = SPREAD0 * 0.9
    amp = AMP0 * 0.9 / 0.9**2
    for (row, col) in [(3, 11), (9, 6), (0, 0)]:
        u = (col + 0.5) / w
        v = (row + 0.5) / h
        du = (u - 0.4) / spread
        dv = (v - 0.6) / spread
        bump = math.exp(-0.5 * (du * du + dv * dv))
        tex = 0.5 * (1.0 + math.sin(2.0 * math.pi * 5.0 * u))
        shade = -SHADE0 * amp * bump * (du * 0.6 + dv * 0.8)
        for ch, bg in enumerate((0.3, 0.4, 0.5)):
            expected = min(1.0, max(0.0, bg + amp * bump * tex + shade))
            assert img[row, col, ch] == pytest.approx(expected, abs=1e-6)


def test_stiffness_shrinks_amplitude_and_widens_spread():
    lat = _latent(contact_depth=1.0)
    soft = touch_pixels(lat, _profile(stiffness=0.85), 0)
    stiff = touch_pixels(lat, _profile(stiffness=1.3), 0)
    # Peak indentation scales with 1/stiffness^2.
    assert soft.max() > stiff.max()
    # A pixel far from center sees relatively more signal on the stiff gel.
    far = np.abs(soft[0, 0].astype(np.float64) - 0.2), np.abs(stiff[0, 0].astype(np.float64) - 0.2)
    assert far[1].max() >= far[0].max()


def test_vision_is_sensor_free_and_canonical():
    lat = _latent(contact_depth=0.8, texture_frequency=4.0)
    img = render_vision(lat)
    # Far corner carries only the Gaussian tail of the centered bump.
    corner = (0.5 / 32 - 0.5) / SPREAD0
    tail = AMP0 * 0.8 * math.exp(-0.5 * 2 * corner * corner)
    assert img[0, 0] == pytest.approx(0.5, abs=tail + 1e-6)
    # Gray image: channels identical.
    np.testing.assert_array_equal(img[..., 0], img[..., 1])
    np.testing.assert_array_equal(img[..., 0], img[..., 2])
    # Closed form at one pixel.
    u, v = (20 + 0.5) / 32, (12 + 0.5) / 32
    du, dv = (u - 0.5) / SPREAD0, (v - 0.5) / SPREAD0
    bump = math.exp(-0.5 * (du * du + dv * dv))
    tex = 0.5 * (1 + math.sin(2 * math.pi * 4.0 * u))
    expected = min(1.0, 0.5 + AMP0 * 0.8 * bump * tex)
    assert img[12, 20, 0] == pytest.approx(expected, abs=1e-6)


def test_noise_seed_determinism():
    lat = _latent()
    prof = _profile(bg=(0.3, 0.3, 0.3), noise=0.05)
    a = touch_pixels(lat, prof, noise_seed=7)
    b = touch_pixels(lat, prof, noise_seed=7)
    c = touch_pixels(lat, prof, noise_seed=8)
    np.testing.assert_array_equal(a, b)
    assert np.any(a != c)


@settings(max_examples=30, deadline=None)
@given(
    depth=st.floats(0.1, 1.0),
    freq=st.floats(0.5, 12.0),
    cx=st.floats(0.25, 0.75),
    cy=st.floats(0.25, 0.75),
    stiff=st.floats(0.85, 1.3),
    seed=st.integers(0, 2**31),
)
def test_touch_always_in_unit_range(depth, freq, cx, cy, stiff, seed):
    lat = _latent(contact_depth=depth, texture_frequency=freq, contact_center=(cx, cy))
    prof = _profile(bg=(0.7, 0.7, 0.7), stiffness=stiff, illum=(0.0, 1.0), noise=0.05)
    img = touch_pixels(lat, prof, noise_seed=seed, h=16, w=16)
    assert img.dtype == np.float32
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_render_touch_validates_latent():
    bad = _latent(contact_depth=1.5)
    with pytest.raises(ValueError):
        render_touch(bad, _profile(), 0)


# --- frequency bands ---------------------------------------------------------

def test_class_bands_disjoint_with_gap():
    for m in range(4):
        lo, hi = class_frequency_band(m)
        assert hi - lo == pytest.approx(1.5)
        if m:
            prev_hi = class_frequency_band(m - 1)[1]
            assert lo - prev_hi == pytest.approx(0.3)


def test_object_frequencies_sit_inside_band():
    j = 8
    for cls in range(3):
        lo, hi = class_frequency_band(cls)
        freqs = [object_base_frequency(cls, s, j) for s in range(j)]
        assert all(lo < f < hi for f in freqs)
        assert freqs == sorted(freqs)
        # Even grid spacing.
        gaps = np.diff(freqs)
        np.testing.assert_allclose(gaps, gaps[0])


# --- profiles ----------------------------------------------------------------

def test_default_profiles_are_mutually_distinct():
    profs = default_profiles(5, 0.02)
    assert [p.sensor_id for p in profs] == list(range(5))
    for i, a in enumerate(profs):
        a.validate()
        for b in profs[i + 1 :]:
            l1 = sum(abs(x - y) for x, y in zip(a.background_color, b.background_color))
            assert l1 >= datagen.MIN_BACKGROUND_L1
        assert math.hypot(*a.illumination_direction) == pytest.approx(1.0)


def test_profile_validation_rejects_bad_fields():
    with pytest.raises(ValueError):
        _profile(bg=(0.5, 0.5, 1.2)).validate()
    with pytest.raises(ValueError):
        _profile(illum=(1.0, 1.0)).validate()
    with pytest.raises(ValueError):
        _profile(stiffness=-1.0).validate()
    with pytest.raises(ValueError):
        _profile(noise=0.5).validate()


# --- world generation ---------------------------------------------------------

@pytest.fixture(scope="module")
def small_world():
    cfg = WorldConfig(m=3, k=2, image_size=16, patch_size=4,
                      pairs_per_sensor=300, objects_per_class=4)
    return generate_world(cfg, seed=11)


def test_world_shapes_and_dtypes(small_world):
    ds = small_world
    assert len(ds.parts) == 2
    for part in ds.parts:
        assert part.touch.shape == (300, 16, 16, 3)
        assert part.touch.dtype == np.float32
        assert part.vision.shape == (300, 16, 16, 3)
        assert part.material_class.min() >= 0 and part.material_class.max() < 3
        assert np.all((part.contact_depth >= 0.1) & (part.contact_depth <= 1.0))
        assert np.all((part.contact_center >= 0.25) & (part.contact_center <= 0.75))


def test_grasp_flip_rate_near_ten_percent(small_world):
    flips = 0
    total = 0
    for part in small_world.parts:
        naive = (part.contact_depth >= 0.5).astype(np.int64)
        flips += int(np.sum(part.grasp_outcome != naive))
        total += part.size
    rate = flips / total
    # Binomial(600, 0.1): 5 sigma is about 0.06.
    assert abs(rate - GRASP_FLIP_PROB) < 0.06


def test_sample_frequency_within_jitter_of_object_grid(small_world):
    j = small_world.config.objects_per_class
    for part in small_world.parts:
        slots = part.object_id % j
        base = np.array([
            object_base_frequency(int(c), int(s), j)
            for c, s in zip(part.material_class, slots)
        ])
        assert np.all(np.abs(part.texture_frequency - base) <= FREQ_JITTER + 1e-12)


def test_splits_partition_objects(small_world):
    ds = small_world
    split_sets = {name: set(ids) for name, ids in ds.split_objects.items()}
    assert not (split_sets["train"] & split_sets["val"])
    assert not (split_sets["train"] & split_sets["test"])
    assert not (split_sets["val"] & split_sets["test"])
    m, j = ds.config.m, ds.config.objects_per_class
    assert split_sets["train"] | split_sets["val"] | split_sets["test"] == set(range(m * j))
    # Every class keeps at least one object in every split.
    for name in ("train", "val", "test"):
        classes = {oid // j for oid in split_sets[name]}
        assert classes == set(range(m))


def test_per_sample_split_matches_object_split(small_world):
    ds = small_world
    for part in ds.parts:
        for code, name in enumerate(datagen.SPLIT_NAMES):
            mask = part.split == code
            assert set(part.object_id[mask]).issubset(set(ds.split_objects[name]))


def test_generate_world_is_deterministic():
    cfg = WorldConfig(m=2, k=2, image_size=16, patch_size=4,
                      pairs_per_sensor=50, objects_per_class=4)
    a = generate_world(cfg, seed=3)
    b = generate_world(cfg, seed=3)
    c = generate_world(cfg, seed=4)
    for pa, pb in zip(a.parts, b.parts):
        np.testing.assert_array_equal(pa.touch, pb.touch)
        np.testing.assert_array_equal(pa.object_id, pb.object_id)
    assert any(np.any(pa.touch != pc.touch) for pa, pc in zip(a.parts, c.parts))


def test_dataset_round_trip(tmp_path, small_world):
    write_dataset(small_world, tmp_path / "d")
    back = read_dataset(tmp_path / "d")
    assert back.m == small_world.m and back.k == small_world.k
    assert back.split_objects == {k: sorted(v) for k, v in small_world.split_objects.items()}
    for pa, pb in zip(small_world.parts, back.parts):
        np.testing.assert_array_equal(pa.touch, pb.touch)
        np.testing.assert_array_equal(pa.vision, pb.vision)
        np.testing.assert_array_equal(pa.material_class, pb.material_class)
        np.testing.assert_array_equal(pa.texture_frequency, pb.texture_frequency)
        np.testing.assert_array_equal(pa.split, pb.split)


def test_dataset_write_is_byte_stable(tmp_path, small_world):
    write_dataset(small_world, tmp_path / "one")
    write_dataset(small_world, tmp_path / "two")
    for name in ("manifest.json",):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()
    for part in small_world.parts:
        for fname in ("samples.bin", "samples.json"):
            a = (tmp_path / "one" / part.name / fname).read_bytes()
            b = (tmp_path / "two" / part.name / fname).read_bytes()
            assert a == b


def test_world_config_round_trip_and_unknown_field():
    cfg = WorldConfig(m=3, k=2, image_size=16, patch_size=4,
                      pairs_per_sensor=10, objects_per_class=4)
    back = WorldConfig.from_dict(cfg.to_dict())
    assert back.m == cfg.m and back.k == cfg.k
    with pytest.raises(ValueError):
        WorldConfig.from_dict({"m": 3, "bogus": 1})


def test_unequal_dataset_sizes():
    cfg = WorldConfig(m=2, k=3, image_size=16, patch_size=4,
                      pairs_per_sensor=999, objects_per_class=4,
                      pairs_by_sensor=(40, 10, 25))
    ds = generate_world(cfg, seed=5)
    assert [p.size for p in ds.parts] == [40, 10, 25]
    # from_dict accepts a JSON list and normalizes it back to a tuple
    back = WorldConfig.from_dict({**cfg.to_dict(), "pairs_by_sensor": [40, 10, 25]})
    assert back.pairs_by_sensor == (40, 10, 25)
    with pytest.raises(ValueError):
        WorldConfig(m=2, k=3, image_size=16, patch_size=4, objects_per_class=4,
                    pairs_by_sensor=(40, 10)).validate()
    with pytest.raises(ValueError):
        WorldConfig(m=2, k=2, image_size=16, patch_size=4, objects_per_class=4,
                    pairs_by_sensor=(40, 0)).validate()


def test_latent_validation():
    with pytest.raises(ValueError):
        _latent(material_class=5).validate(m=4)
    with pytest.raises(ValueError):
        _latent(contact_depth=-0.1).validate()
    with pytest.raises(ValueError):
        _latent(texture_frequency=0.0).validate()
    with pytest.raises(ValueError):
        _latent(grasp_outcome=2).validate()
