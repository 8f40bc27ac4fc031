import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from darkflash import augment
from darkflash.augment import (KINDS, blackbody_rgb, low_light, mix_tinted, mixed_colors,
                               overexpose, shadows, simulate, well_lit)


def planck(lam, temperature):
    return lam**-5 / (math.exp(1.4388e-2 / (lam * temperature)) - 1)


@pytest.fixture(scope="module")
def olats():
    rng = np.random.default_rng(3)
    return [np.clip(rng.random((24, 20, 4)) * s, 0, None) for s in (0.3, 0.5, 0.7, 0.9)]


def test_well_lit_constant_inputs():
    aug = well_lit([np.full((8, 8, 4), 0.2)] * 4)
    np.testing.assert_allclose(aug.image, 0.95)
    assert aug.params["scale"] == pytest.approx(0.95 / 0.2)


def test_well_lit_properties(olats):
    aug = well_lit(olats)
    assert aug.image.max() <= 1.0 and aug.image.max() < 1.0
    perm = well_lit(olats[::-1])
    np.testing.assert_allclose(aug.image, perm.image, rtol=0, atol=1e-15)
    anchor = np.percentile(np.mean([o[..., :3] for o in olats], 0), 99.9)
    assert aug.params["percentile_value"] == pytest.approx(anchor)
    with pytest.raises(ValueError):
        well_lit([np.zeros((4, 4, 4))] * 4)


def test_shadows_picks_one_input(olats):
    aug = shadows(olats, 11)
    k = aug.params["index"]
    assert np.array_equal(aug.image, olats[k][..., :3])
    assert shadows(olats, 11).params == aug.params
    with pytest.raises(ValueError):
        shadows([], 0)


def test_shadows_choice_is_uniform():
    imgs = [np.full((1, 1, 4), 0.1 * k) for k in range(4)]
    counts = np.bincount([shadows(imgs, s).params["index"] for s in range(4000)], minlength=4)
    assert np.all(np.abs(counts - 1000) <= 100)


def test_blackbody_against_planck():
    lam = (600e-9, 550e-9, 450e-9)
    for t in (1900.0, 2900.0, 6500.0, 20000.0):
        ref = np.array([planck(x, t) for x in lam])
        np.testing.assert_allclose(blackbody_rgb(t), ref / ref.max(), rtol=1e-12)
    warm = blackbody_rgb(1900.0)
    assert warm[0] == 1.0 and warm[2] / warm[0] < 0.1
    cool = blackbody_rgb(20000.0)
    assert cool[2] == 1.0 and cool[0] / cool[2] < 0.8
    ratios = [blackbody_rgb(t)[2] / blackbody_rgb(t)[0] for t in np.linspace(1900, 20000, 60)]
    assert np.all(np.diff(ratios) > 0)
    for bad in (999.0, 25001.0):
        with pytest.raises(ValueError):
            blackbody_rgb(bad)


@given(st.integers(0, 2**32 - 1))
def test_mixed_colors_draws(seed):
    imgs = [np.full((2, 2, 4), 0.5)] * 4
    aug = mixed_colors(imgs, seed)
    warm, cool = aug.params["temperatures"]
    assert 1900 <= warm <= 2900 and 7000 <= cool <= 20000
    i, j = aug.params["indices"]
    assert i != j
    assert mixed_colors(imgs, seed).params == aug.params


def test_mixed_colors_degenerate_tint():
    white = np.ones((3, 3, 3))
    out = mix_tinted(white, white, 5000.0, 5000.0)
    np.testing.assert_allclose(out, np.broadcast_to(blackbody_rgb(5000.0), (3, 3, 3)))
    with pytest.raises(ValueError):
        mixed_colors([white], 0)


def test_overexpose_clipping(olats):
    img = np.zeros((2, 2, 4))
    img[0, 0, :3] = 0.6
    img[1, 1, :3] = 0.3
    aug = overexpose([img], 5)
    s = aug.params["scale"]
    assert 1.8 <= s <= 2.3
    assert (aug.image[0, 0] == 1.0).all()
    np.testing.assert_allclose(aug.image[1, 1], 0.3 * s)
    k = overexpose(olats, 8).params["index"]
    np.testing.assert_allclose(overexpose(olats, 8).image,
                               np.clip(olats[k][..., :3] * overexpose(olats, 8).params["scale"], 0, 1))


@given(st.integers(0, 2**32 - 1))
def test_overexpose_scale_range(seed):
    assert 1.8 <= overexpose([np.zeros((1, 1, 3))], seed).params["scale"] <= 2.3


def test_low_light_noise_level():
    gray = [np.full((128, 128, 4), 0.5)]
    aug = low_light(gray, 21)
    assert aug.params["sigma"] == 25 / 255
    sd = float((aug.image - 0.5).std())
    assert abs(sd - 0.098) <= 0.005
    assert aug.image.min() >= 0 and aug.image.max() <= 1
    assert np.array_equal(low_light(gray, 21).image, aug.image)


@given(st.sampled_from(KINDS), st.integers(0, 2**32 - 1))
def test_outputs_bounded_and_deterministic(kind, seed):
    rng = np.random.default_rng(0)
    imgs = [rng.random((6, 5, 4)) * 1.2 for _ in range(4)]
    a = simulate(kind, imgs, seed)
    b = simulate(kind, imgs, seed)
    assert a.image.shape == (6, 5, 3)
    assert a.image.min() >= 0 and a.image.max() <= 1
    assert a.image.tobytes() == b.image.tobytes()
    assert json.loads(json.dumps(a.sidecar())) == json.loads(json.dumps(b.sidecar()))
    assert a.sidecar()["kind"] == kind


@pytest.mark.parametrize("kind", [k for k in KINDS if k != "low-light"])
def test_lighting_record_explains_image(olats, kind):
    aug = simulate(kind, olats, 4)
    model = sum(np.asarray(g) * olats[k][..., :3] for k, g in aug.lighting)
    np.testing.assert_allclose(aug.image, np.clip(model, 0, 1), atol=1e-12)


def test_unknown_kind():
    with pytest.raises(ValueError, match="unknown"):
        simulate("sunset", [np.zeros((2, 2, 3))])
    with pytest.raises(ValueError):
        augment.shadows([np.zeros((2, 2, 3)), np.zeros((3, 2, 3))], 0)
