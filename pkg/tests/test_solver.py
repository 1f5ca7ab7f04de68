import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from cases import manufactured_case
from elastreg import (DisplacementField, Grid, GridMismatchError, InvalidParameterError,
                      NoInformationError, PhantomSpec, ScalarVolume, SolverParams,
                      make_phantom_pair, register_elastic, solve_level)
from elastreg.energy import cap_array, consistency_energy, estimate_shift, force_consistency, \
    force_distance
from elastreg.solver import (Convergence, _Direction, _total_force, apply_elliptic,
                             check_convergence, elliptic_array, enforce_boundary, relax_array)
from elastreg.volume import smooth_array


def test_params_validation_and_lame():
    assert SolverParams().lam == 0.0
    assert SolverParams(mu=2.0, poisson=0.25).lam == pytest.approx(2.0)
    for bad in (dict(mu=0.0), dict(dt=-1.0), dict(sigma=0.0), dict(cap_voxels=0.5),
                dict(tol=0.0), dict(levels=0), dict(gs_sweeps=0), dict(poisson=0.5),
                dict(distance_mode="ncc"), dict(intensity_range=-1.0)):
        with pytest.raises(InvalidParameterError):
            SolverParams(**bad)
    assert SolverParams().as_dict()["lambda"] == 0.0


# -- elliptic operator ----------------------------------------------------------------------


def test_elliptic_matches_dense_stencil():
    rng = np.random.default_rng(0)
    u = rng.normal(size=(3, 7, 6, 8))
    spacing = (0.8, 1.0, 1.3)
    got = elliptic_array(u, spacing, 1.2, 0.7)
    ref = oracles.elliptic(u, spacing, 1.2, 0.7)
    assert np.max(np.abs(got - ref)) < 1e-6


def test_elliptic_of_quadratic_and_affine():
    g = Grid((9, 9, 9), (0.5, 0.5, 0.5), (0.0, 0.0, 0.0))
    mu, lam = 1.0, 0.0
    quad = DisplacementField.from_function(g, lambda p: np.c_[p[:, 0] ** 2, 0 * p[:, :2]])
    out = apply_elliptic(quad, mu, lam).data[:, 1:-1, 1:-1, 1:-1]
    np.testing.assert_allclose(out[0], 2 * mu + (lam + mu) * 2, atol=1e-9)
    np.testing.assert_allclose(out[1:], 0.0, atol=1e-9)
    a = np.random.default_rng(1).normal(size=(3, 3))
    aff = DisplacementField.from_function(g, lambda p: p @ a.T + 1.0)
    np.testing.assert_allclose(apply_elliptic(aff, 1.3, 0.4).data, 0.0, atol=1e-9)


def _cubic(rng):
    c = rng.normal(size=(4, 4, 4))
    a, b, d = np.meshgrid(range(4), range(4), range(4), indexing="ij")
    c[a + b + d > 3] = 0.0
    return c


def test_elliptic_exact_on_cubic_polynomials():
    # central second and mixed differences are exact up to total degree 3
    rng = np.random.default_rng(2)
    mu, lam = 0.9, 1.7
    g = Grid((7, 7, 7), (0.6, 0.9, 1.1), (-1.0, 0.5, 0.0))
    coefs = [_cubic(rng) for _ in range(3)]
    x, y, z = g.coordinates()
    u = np.stack([oracles.eval_poly(c, x, y, z) for c in coefs])
    d = oracles.poly_derivative
    expect = []
    for c in range(3):
        lap = sum(d(d(coefs[c], a), a) for a in range(3))
        gd = sum(d(d(coefs[o], o), c) for o in range(3))
        expect.append(oracles.eval_poly(mu * lap + (lam + mu) * gd, x, y, z))
    got = elliptic_array(u, g.spacing, mu, lam)
    inner = (slice(None),) + (slice(1, -1),) * 3
    np.testing.assert_allclose(got[inner], np.stack(expect)[inner], atol=1e-8)


# -- boundary conditions and relaxation ----------------------------------------------------------


def test_boundary_rule_matches_oracle():
    u = np.random.default_rng(3).normal(size=(3, 5, 6, 7))
    got = enforce_boundary(DisplacementField(u)).data
    np.testing.assert_array_equal(got, oracles.boundary(u))
    # idempotent
    np.testing.assert_array_equal(enforce_boundary(DisplacementField(got)).data, got)


@pytest.mark.parametrize("shape,spacing,poisson", [
    ((4, 4, 4), (1.0, 1.0, 1.0), 0.0),
    ((5, 4, 6), (0.7, 1.2, 0.9), 0.3),
])
def test_single_sweep_equals_scalar_updates(shape, spacing, poisson):
    rng = np.random.default_rng(4)
    p = SolverParams(mu=1.1, poisson=poisson, dt=0.6)
    u0 = oracles.boundary(rng.normal(size=(3,) + shape))
    rhs = rng.normal(size=(3,) + shape)
    got = relax_array(u0, np.zeros_like(u0), spacing, p, 1, rhs=rhs)
    ref = oracles.gauss_seidel_sweep(u0, rhs, spacing, p.mu, p.lam, p.dt)
    np.testing.assert_allclose(got, ref, rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("dt,poisson,spacing", [(0.2, 0.0, (1.0, 1.0, 1.0)),
                                                (2.0, 0.2, (0.8, 1.0, 1.2))])
def test_manufactured_solution(dt, poisson, spacing):
    hist, err = manufactured_case(dt=dt, poisson=poisson, spacing=spacing)
    assert hist[-1] < 1e-6
    assert all(b < a for a, b in zip(hist, hist[1:]))
    assert err < 1e-5


def test_relaxation_fixed_point_of_zero():
    p = SolverParams()
    z = np.zeros((3, 6, 6, 6))
    assert np.all(relax_array(z, z, (1.0,) * 3, p, 3) == 0)


# -- convergence rule -------------------------------------------------------------------------


def test_check_convergence_examples():
    h = (10, 5, 2, 1, 0.9999)
    assert check_convergence(h, h, 1e-2) is Convergence.CONVERGED
    o = (5, 3, 5.0001, 3.0002)
    assert check_convergence(o, o, 1e-2) is Convergence.OSCILLATING
    assert check_convergence((10, 8), (10, 8), 1e-2) is Convergence.CONTINUE
    # one direction still moving
    assert check_convergence(h, (10, 8), 1e-2) is Convergence.CONTINUE
    with pytest.raises(InvalidParameterError):
        check_convergence((), (1.0,), 1e-2)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=8), st.floats(1e-4, 1.0))
def test_check_convergence_never_converges_on_large_last_step(h, tol):
    status = check_convergence(h, h, tol)
    if len(h) < 2 or abs(h[-1] - h[-2]) >= tol:
        assert status is not Convergence.CONVERGED


# -- fused force and level solver ----------------------------------------------------------------


def _images(rng, dims=(12, 12, 12), spacing=(1.0, 1.0, 1.0)):
    a = ScalarVolume(smooth_array(rng.normal(size=dims), [1.5] * 3) * 10, spacing)
    b = ScalarVolume(smooth_array(rng.normal(size=dims), [1.5] * 3) * 10, spacing)
    return a, b


def _smooth_field(rng, dims, spacing, amp):
    raw = rng.normal(size=(3,) + dims)
    data = np.stack([smooth_array(raw[c], [1.5] * 3) for c in range(3)])
    return DisplacementField(data * amp / np.abs(data).max(), spacing)


@pytest.mark.parametrize("mode", ["shift_filtered", "plain_ssd"])
@pytest.mark.parametrize("amp", [0.5, 2.5])
def test_fused_force_equals_composition_of_terms(mode, amp):
    rng = np.random.default_rng(5)
    spacing = (1.0, 0.9, 1.2)
    I1, I2 = _images(rng, spacing=spacing)
    phi = _smooth_field(rng, I1.dims, spacing, amp)
    psi = _smooth_field(rng, I1.dims, spacing, amp)
    p = SolverParams(distance_mode=mode, sigma=2.0)
    sigma_mm = p.sigma * I1.grid.min_spacing
    shift = estimate_shift(I1, I2, phi, sigma_mm) if mode == "shift_filtered" else None
    total = force_distance(I1, I2, phi, shift).data + force_consistency(psi, phi).data
    expect = cap_array(total, p.cap_voxels * I1.grid.min_spacing / p.dt)
    got, rms = _total_force(_Direction(I1, I2), phi.data, psi.data, I1.grid, p, sigma_mm)
    np.testing.assert_allclose(got, expect, rtol=1e-10, atol=1e-10)
    assert rms == pytest.approx(np.sqrt(np.mean(np.sum(expect**2, axis=0))), rel=1e-12)


def test_identical_images_give_zero_fields_quickly():
    I = _images(np.random.default_rng(6), dims=(16, 16, 16))[0]
    z = DisplacementField.zeros(I.grid)
    phi, psi, diag = solve_level(I, I, z, z, SolverParams())
    assert np.all(phi.data == 0) and np.all(psi.data == 0)
    assert diag.outer_iterations <= 2 and diag.converged


def _blob_pair(shift_vox=2, n=32, texture=0.3):
    """Textured Gaussian blob and its copy translated by a whole number of voxels.

    Both images are cut from one array, so I2(x + shift e_x) = I1(x) exactly.
    """
    rng = np.random.default_rng(0)
    xs = np.arange(n + shift_vox)[:, None, None]
    ys = np.arange(n)[None, :, None]
    zs = np.arange(n)[None, None, :]
    c = (n - 1) / 2
    blob = np.exp(-((xs - c - shift_vox) ** 2 + (ys - c) ** 2 + (zs - c) ** 2) / (2 * 5.0**2))
    tex = smooth_array(rng.normal(size=blob.shape), [1.0] * 3)
    big = blob * (1 + texture * tex / tex.std())
    return ScalarVolume(big[shift_vox:]), ScalarVolume(big[:n])


def test_translated_blob_is_recovered():
    # a featureless blob pinned by the sliding walls stops short (about 1.6 voxel);
    # texture inside the blob supplies the gradients needed to pull it through
    I1, I2 = _blob_pair()
    res = register_elastic(I1, I2)
    core = I1.data > 0.5 * I1.data.max()
    mean = res.forward.data[:, core].mean(axis=1)
    assert abs(mean[0] - 2.0) < 0.25
    assert np.all(np.abs(mean[1:]) < 0.25)
    core2 = I2.data > 0.5 * I2.data.max()
    assert abs(res.backward.data[0][core2].mean() + 2.0) < 0.25


def test_step_cap_and_boundary_hold_every_iteration():
    I1, I2 = _blob_pair(3, n=24)
    p = SolverParams(max_outer=40)
    cap = p.cap_voxels * I1.grid.min_spacing
    seen = {"prev": None, "n": 0}

    def cb(k, u, v, nf, nb):
        for w in (u, v):
            np.testing.assert_array_equal(oracles.boundary(w), w)
        if seen["prev"] is not None:
            for w, w0 in zip((u, v), seen["prev"]):
                assert np.sqrt(np.sum((w - w0) ** 2, axis=0)).max() <= cap * (1 + 1e-12)
        seen["prev"] = (u.copy(), v.copy())
        seen["n"] += 1

    z = DisplacementField.zeros(I1.grid)
    solve_level(I1, I2, z, z, p, callback=cb)
    assert seen["n"] > 2


def test_solver_errors():
    I1, I2 = _images(np.random.default_rng(7), dims=(16, 16, 16))
    z = DisplacementField.zeros(I1.grid)
    other = ScalarVolume(np.zeros((16, 16, 15)) + np.arange(15.0))
    with pytest.raises(GridMismatchError):
        register_elastic(I1, other)
    with pytest.raises(GridMismatchError):
        solve_level(I1, I2, DisplacementField.zeros(other.grid), z, SolverParams())
    with pytest.raises(InvalidParameterError):
        register_elastic(I1, I2, params=SolverParams(levels=4))
    with pytest.raises(NoInformationError):
        register_elastic(I1.with_data(np.ones(I1.dims)), I2)


@pytest.fixture(scope="module")
def small_pair():
    return make_phantom_pair(PhantomSpec(dims=(32, 32, 32), deform_amplitude=2.0, seed=3))


def test_register_is_deterministic(small_pair):
    a = register_elastic(small_pair.fixed, small_pair.moving)
    b = register_elastic(small_pair.fixed, small_pair.moving)
    assert np.array_equal(a.forward.data, b.forward.data)
    assert np.array_equal(a.backward.data, b.backward.data)
    assert [d.outer_iterations for d in a.per_level] == [d.outer_iterations for d in b.per_level]
    assert all(np.isfinite(d.energy.elastic) for d in a.per_level)
    assert a.wall_time > 0


def test_swapping_images_swaps_roles(small_pair):
    a = register_elastic(small_pair.fixed, small_pair.moving)
    b = register_elastic(small_pair.moving, small_pair.fixed)
    ea = consistency_energy(a.backward, a.forward)
    eb = consistency_energy(b.forward, b.backward)
    assert eb == pytest.approx(ea, rel=0.10)
    # the swapped forward field approximates the original backward field
    core = (slice(None),) + (slice(6, -6),) * 3
    diff = np.abs(b.forward.data[core] - a.backward.data[core]).mean()
    assert diff < 0.1 * np.abs(a.backward.data[core]).mean() + 0.05
