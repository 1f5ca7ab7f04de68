import math

import numpy as np
import pytest

from elastreg import (DisplacementField, InvalidParameterError, PhantomGenerationError,
                      PhantomSpec, make_phantom_pair)
from elastreg.evaluation import fiducial_stats, psnr
from elastreg.phantom import (SHADOW_FACTOR, add_bias_field, add_shadow, apply_deformation,
                              cone_signed_distance, deformation_at, invert_points,
                              jacobian_determinant, make_deformation, make_inverse_deformation,
                              make_phantom, shadow_gland_fraction)

SMALL = PhantomSpec(dims=(40, 40, 40), seed=11)


def test_determinism():
    a, b = make_phantom_pair(SMALL), make_phantom_pair(SMALL)
    for name in ("fixed", "moving"):
        assert np.array_equal(getattr(a, name).data, getattr(b, name).data)
    assert np.array_equal(a.truth.data, b.truth.data)
    assert a.fixed_fiducials == b.fixed_fiducials
    assert a.moving_fiducials == b.moving_fiducials
    c = make_phantom_pair(PhantomSpec(dims=(40, 40, 40), seed=12))
    assert not np.array_equal(a.fixed.data, c.fixed.data)


def test_noise_free_gland_is_brightest_in_the_centre():
    spec = PhantomSpec(dims=(33, 33, 33), speckle_strength=0.0, n_fiducials=4, deform_amplitude=0.0)
    vol, fids = make_phantom(spec)
    # without the fiducial blobs the profile along x peaks at the centre
    from elastreg.phantom import FiducialSet, render_anatomy
    pts = np.stack([np.linspace(0, 32, 33), np.full(33, 16.0), np.full(33, 16.0)], axis=1)
    prof = render_anatomy(spec, FiducialSet(()), pts)
    assert np.argmax(prof) == 16
    assert prof[16] > prof[0]
    assert vol.data.max() > prof.max()  # fiducials render brighter than tissue


def test_fiducials_are_local_maxima():
    spec = PhantomSpec(dims=(48, 48, 48), speckle_strength=0.0, seed=5)
    vol, fids = make_phantom(spec)
    off = np.array([(i, j, k) for i in range(-3, 4) for j in range(-3, 4) for k in range(-3, 4)
                    if 0 < i * i + j * j + k * k <= 9])
    for p in fids.positions:
        c = np.rint(p).astype(int)
        centre = vol.data[tuple(c)]
        around = vol.data[tuple((c + off).T)]
        assert centre >= around.max()


def test_fiducials_are_separated_and_inside():
    pair = make_phantom_pair(SMALL)
    pos = pair.fixed_fiducials.positions
    assert len(pos) == SMALL.n_fiducials
    assert np.all(pos > 0) and np.all(pos < SMALL.extent)
    d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
    assert d[np.triu_indices(len(pos), 1)].min() >= 3.0


def test_deformation_closed_forms():
    spec = PhantomSpec(deform_amplitude=0.0)
    assert np.all(make_deformation(spec).data == 0)
    spec = PhantomSpec(deform_amplitude=4.0, deform_radius=15.0)
    rng = np.random.default_rng(0)
    e = rng.normal(size=(5, 3))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    u = deformation_at(spec, spec.contact + 15.0 * e)
    np.testing.assert_allclose(u, 4.0 * math.exp(-0.5) * e, rtol=1e-6)


def test_numerical_inverse_accuracy():
    spec = PhantomSpec(deform_amplitude=4.0, deform_radius=15.0)
    x = np.moveaxis(spec.grid.coordinates(), 0, -1).reshape(-1, 3)
    back = invert_points(spec, x + deformation_at(spec, x))
    err = np.linalg.norm(back - x, axis=1)
    # the push direction is undefined at the contact point itself, where the
    # fixed-point map stops contracting; skip a 2 voxel ball around it
    far = np.linalg.norm(x - spec.contact, axis=1) > 2.0 * min(spec.spacing)
    assert err[far].max() < 1e-3 * min(spec.spacing)


def test_truth_jacobian_is_positive():
    spec = PhantomSpec(dims=(48, 48, 48), deform_amplitude=5.5, deform_radius=12.0)
    assert jacobian_determinant(make_deformation(spec)).min() > 0


def test_invalid_specs():
    with pytest.raises(InvalidParameterError):
        PhantomSpec(deform_amplitude=8.0, deform_radius=15.0)
    with pytest.raises(InvalidParameterError):
        PhantomSpec(n_fiducials=3)
    with pytest.raises(InvalidParameterError):
        PhantomSpec(speckle_strength=1.0)
    with pytest.raises(InvalidParameterError):
        PhantomSpec(bias_amplitude=-0.1)
    with pytest.raises(InvalidParameterError):
        PhantomSpec(dims=(4, 40, 40))


def test_overcrowded_fiducials_fail():
    with pytest.raises(PhantomGenerationError):
        make_phantom(PhantomSpec(dims=(24, 24, 24), n_fiducials=200, deform_amplitude=0.0))


def test_apply_deformation_cases():
    vol, _ = make_phantom(SMALL)
    g = vol.grid
    out = apply_deformation(vol, DisplacementField.zeros(g))
    assert np.array_equal(out.data, vol.data)
    shift = DisplacementField.from_function(g, lambda p: np.tile([0.0, 1.0, 0.0], (len(p), 1)))
    out = apply_deformation(vol, shift)
    np.testing.assert_allclose(out.data[:, :-1], vol.data[:, 1:], atol=1e-12)


def test_warp_round_trip_psnr():
    spec = PhantomSpec(dims=(48, 48, 48), speckle_strength=0.0, seed=2)
    vol, _ = make_phantom(spec)
    there = apply_deformation(vol, make_deformation(spec))
    back = apply_deformation(there, make_inverse_deformation(spec))
    assert psnr(vol.data, back.data) > 30.0


def test_bias_field_properties():
    vol, _ = make_phantom(SMALL)
    assert np.array_equal(add_bias_field(vol, 0.0, 3).data, vol.data)
    a, b = add_bias_field(vol, 0.3, 3), add_bias_field(vol, 0.3, 3)
    assert np.array_equal(a.data, b.data)
    d = a.data - vol.data
    rng = vol.data.max() - vol.data.min()
    assert np.abs(d).max() == pytest.approx(0.3 * rng, rel=1e-9)
    with pytest.raises(InvalidParameterError):
        add_bias_field(vol, 1.0, 3)


@pytest.mark.parametrize("seed", range(5))
def test_bias_field_is_low_frequency(seed):
    from elastreg import ScalarVolume
    vol = ScalarVolume(np.random.default_rng(seed).uniform(size=(64, 64, 64)))
    d = add_bias_field(vol, 0.3, seed).data - vol.data
    w = np.hanning(64)
    f = np.fft.rfftfreq(64)
    for prof in (d[:, 32, 32], d[20, :, 40], d[10, 50, :]):
        p = np.abs(np.fft.rfft(prof * w)) ** 2
        assert 10 * np.log10(p[f > 0.1].sum() / p.sum()) < -40.0


def test_shadow_cases():
    vol, _ = make_phantom(SMALL)
    far = add_shadow(vol, (-100.0, -100.0, -100.0), (-1.0, 0.0, 0.0), 20.0)
    assert np.array_equal(far.data, vol.data)
    apex, axis = np.array([20.0, 0.0, 20.0]), np.array([0.0, 1.0, 0.0])
    out = add_shadow(vol, apex, axis, 25.0)
    pts = np.moveaxis(vol.grid.coordinates(), 0, -1)
    sd = cone_signed_distance(pts, apex, axis, 25.0)
    deep, clear = sd < -1.01, sd > 1.01
    np.testing.assert_allclose(out.data[deep], SHADOW_FACTOR * vol.data[deep], rtol=1e-12)
    assert np.array_equal(out.data[clear], vol.data[clear])
    for bad in (0.0, 50.0):
        with pytest.raises(InvalidParameterError):
            add_shadow(vol, apex, axis, bad)


def test_default_shadow_covers_a_minor_part_of_the_gland():
    spec = PhantomSpec(shadow=True)
    frac = shadow_gland_fraction(spec, *spec.shadow_cone())
    assert 0.0 < frac <= 0.15


def test_fiducials_follow_the_truth_field():
    pair = make_phantom_pair(PhantomSpec(seed=4))
    p = pair.fixed_fiducials.positions
    np.testing.assert_array_equal(pair.moving_fiducials.positions,
                                  p + deformation_at(pair.spec, p))
    mean, _, worst = fiducial_stats(pair.fixed_fiducials, pair.moving_fiducials, pair.truth)
    assert worst < 0.05 * min(pair.spec.spacing)
