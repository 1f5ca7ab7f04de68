"""Inverse-consistent elastic registration.

Forward and backward displacement fields are advanced together: at each outer
iteration both total forces (shift-filtered distance plus inverse consistency)
are frozen, capped, and each field takes one semi-implicit step

    (I - dt * L) u_next = u + dt * f,      L u = mu lap u + (lambda + mu) grad div u,

solved approximately by red-black Gauss-Seidel. Levels of a Gaussian pyramid
are processed coarse to fine, each to convergence.
"""

from __future__ import annotations

import logging
import functools
import time
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from . import _kernels
from .energy import (EnergyBreakdown, estimate_shift, check_lame, consistency_energy,
                     distance_energy, elastic_energy, smooth_residual)
from .errors import GridMismatchError, InvalidParameterError, NumericalError, NoInformationError
from .volume import (DisplacementField, ScalarVolume, build_pyramid, gradient_volume,
                     pyramid_depth, smooth_array, upsample_field)

log = logging.getLogger(__name__)

DISTANCE_MODES = ("shift_filtered", "plain_ssd")


@dataclass(frozen=True)
class SolverParams:
    """Solver constants.

    ``cap_voxels`` is in voxels of the current pyramid level. ``sigma`` is in
    voxels of the finest level, so the shift filter keeps the same physical
    width on every level; with ``sigma_per_level`` it is in voxels of the
    current level instead. ``tol`` is relative to the first force norm of a
    level.
    """

    mu: float = 1.0
    poisson: float = 0.0
    dt: float = 0.2
    sigma: float = 4.0
    cap_voxels: float = 0.45
    tol: float = 1e-3
    max_outer: int = 200
    gs_sweeps: int = 5
    levels: int = 3
    distance_mode: str = "shift_filtered"
    intensity_range: float | None = 10.0
    sigma_per_level: bool = False

    def __post_init__(self):
        if not self.mu > 0:
            raise InvalidParameterError(f"mu must be > 0, got {self.mu}")
        if not -1.0 < self.poisson < 0.5:
            raise InvalidParameterError(f"poisson must lie in (-1, 0.5), got {self.poisson}")
        if not self.dt > 0:
            raise InvalidParameterError(f"dt must be > 0, got {self.dt}")
        if not self.sigma > 0:
            raise InvalidParameterError(f"sigma must be > 0, got {self.sigma}")
        if not 0 < self.cap_voxels < 0.5:
            raise InvalidParameterError(f"cap_voxels must lie in (0, 0.5), got {self.cap_voxels}")
        if not self.tol > 0:
            raise InvalidParameterError(f"tol must be > 0, got {self.tol}")
        if self.max_outer < 1 or self.gs_sweeps < 1 or self.levels < 1:
            raise InvalidParameterError("max_outer, gs_sweeps and levels must be >= 1")
        if self.intensity_range is not None and not self.intensity_range > 0:
            raise InvalidParameterError(
                f"intensity_range must be > 0 or None, got {self.intensity_range}")
        if self.distance_mode not in DISTANCE_MODES:
            raise InvalidParameterError(
                f"distance_mode must be one of {DISTANCE_MODES}, got {self.distance_mode!r}")

    @property
    def lam(self) -> float:
        nu = self.poisson
        return 2.0 * self.mu * nu / (1.0 - 2.0 * nu)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = self.lam
        return d


class Convergence(Enum):
    CONTINUE = "continue"
    CONVERGED = "converged"
    OSCILLATING = "oscillating"


@dataclass
class LevelDiagnostics:
    level: int
    dims: tuple
    outer_iterations: int
    final_force_norms: tuple[float, float]
    energy: EnergyBreakdown
    energy_backward: EnergyBreakdown
    oscillation_detected: bool
    converged: bool
    wall_time: float


@dataclass
class RegistrationResult:
    """Forward field maps fixed -> (rigidly resampled) moving; backward the reverse."""

    forward: DisplacementField
    backward: DisplacementField
    per_level: list = field(default_factory=list)
    wall_time: float = 0.0
    rigid: object = None
    params: SolverParams | None = None

    def map_points(self, points) -> np.ndarray:
        """Fixed-space points to moving space, rigid initialisation included."""
        p = self.forward.map_points(points)
        return p if self.rigid is None else self.rigid.apply(p)

    def map_points_backward(self, points) -> np.ndarray:
        """Moving-space points to fixed space."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if self.rigid is not None:
            p = self.rigid.inverse_apply(p)
        return self.backward.map_points(p)

    def total_forward(self) -> DisplacementField:
        """Displacement of the complete fixed -> moving map on the fixed grid."""
        if self.rigid is None:
            return self.forward
        grid = self.forward.grid
        pts = grid.coordinates().reshape(3, -1).T
        disp = self.map_points(pts) - pts
        return DisplacementField(disp.T.reshape((3,) + grid.dims), grid.spacing, grid.origin)

    def total_backward(self) -> DisplacementField:
        if self.rigid is None:
            return self.backward
        grid = self.backward.grid
        pts = grid.coordinates().reshape(3, -1).T
        disp = self.map_points_backward(pts) - pts
        return DisplacementField(disp.T.reshape((3,) + grid.dims), grid.spacing, grid.origin)


# -- elliptic operator and relaxation ---------------------------------------------


def _shift(a, d):
    sl = tuple(slice(1 + di, n - 1 + di) for n, di in zip(a.shape, d))
    return a[sl]


_UNIT = ((1, 0, 0), (0, 1, 0), (0, 0, 1))


def elliptic_array(u: np.ndarray, spacing, mu: float, lam: float) -> np.ndarray:
    """mu lap u + (lambda + mu) grad div u on interior voxels; zero on the border."""
    h = spacing
    lm = lam + mu
    out = np.zeros_like(u)
    inner = (slice(1, -1),) * 3
    for c in range(3):
        w = u[c]
        centre = w[inner]
        lap = sum((_shift(w, e) + _shift(w, tuple(-x for x in e)) - 2 * centre) / h[a] ** 2
                  for a, e in enumerate(_UNIT))
        gd = (_shift(w, _UNIT[c]) + _shift(w, tuple(-x for x in _UNIT[c])) - 2 * centre) / h[c] ** 2
        for o in range(3):
            if o == c:
                continue
            v = u[o]

            def off(a, b):
                e = [0, 0, 0]
                e[c], e[o] = a, b
                return tuple(e)

            gd = gd + (_shift(v, off(1, 1)) - _shift(v, off(1, -1)) - _shift(v, off(-1, 1))
                       + _shift(v, off(-1, -1))) / (4 * h[c] * h[o])
        out[c][inner] = mu * lap + lm * gd
    return out


def apply_elliptic(u: DisplacementField, mu: float, lam: float) -> DisplacementField:
    check_lame(mu, lam)
    return u.with_data(elliptic_array(u.data, u.spacing, mu, lam))


def enforce_boundary(u: DisplacementField) -> DisplacementField:
    """Copy of ``u`` with fixed edges and sliding faces imposed."""
    data = u.data.copy()
    _kernels.enforce_boundary(data)
    return u.with_data(data)


def relax_array(u_prev: np.ndarray, f: np.ndarray, spacing, params: SolverParams,
                sweeps: int, rhs: np.ndarray | None = None) -> np.ndarray:
    if rhs is None:
        rhs = u_prev + params.dt * f
    u = np.ascontiguousarray(u_prev, dtype=np.float64).copy()
    hx, hy, hz = spacing
    _kernels.rbgs(u, np.ascontiguousarray(rhs), params.dt, params.mu, params.lam,
                  hx, hy, hz, int(sweeps))
    return u


def relax_semi_implicit(u_prev: DisplacementField, f: DisplacementField, params: SolverParams,
                        sweeps: int | None = None) -> DisplacementField:
    """Red-black Gauss-Seidel for (I - dt L) u = u_prev + dt f, warm-started at u_prev."""
    u_prev.grid.check_same(f.grid, "field and force grids")
    sweeps = params.gs_sweeps if sweeps is None else sweeps
    return u_prev.with_data(relax_array(u_prev.data, f.data, u_prev.spacing, params, sweeps))


# -- convergence --------------------------------------------------------------------


def _oscillates(h, tol):
    if len(h) < 4:
        return False
    a = h[-4:]
    for k in (3, 2):
        if not (abs(a[k] - a[k - 2]) < tol and abs(a[k] - a[k - 1]) >= tol):
            return False
    return True


def check_convergence(hist_fwd, hist_bwd, tol: float) -> Convergence:
    """Converged when both force norms changed by less than ``tol`` in the last
    iteration; oscillating when either history settled into a 2-cycle."""
    if len(hist_fwd) == 0 or len(hist_bwd) == 0:
        raise InvalidParameterError("force-norm histories must be non-empty")
    if len(hist_fwd) >= 2 and len(hist_bwd) >= 2:
        if abs(hist_fwd[-1] - hist_fwd[-2]) < tol and abs(hist_bwd[-1] - hist_bwd[-2]) < tol:
            return Convergence.CONVERGED
    if _oscillates(hist_fwd, tol) or _oscillates(hist_bwd, tol):
        return Convergence.OSCILLATING
    return Convergence.CONTINUE


# -- one pyramid level -----------------------------------------------------------------


class _Direction:
    """Per-level image data for one registration direction, plus work buffers."""

    def __init__(self, target: ScalarVolume, source: ScalarVolume):
        self.target = target.data
        grad = gradient_volume(source)
        stacked = np.concatenate([source.data[None], grad])
        self.source = np.ascontiguousarray(np.moveaxis(stacked, 0, -1))
        dims = target.dims
        self.packed = np.empty(dims + (12,))
        self.resid = np.empty(dims)
        self.terms = np.empty(dims + (6,))
        self.mask = np.empty(dims, dtype=np.bool_)


def _total_force(d: _Direction, own: np.ndarray, other: np.ndarray, grid, params,
                 sigma_mm: float):
    """Capped total force (distance plus consistency) on ``own`` and its RMS norm."""
    isx, isy, isz = (1.0 / s for s in grid.spacing)
    _kernels.pack_field_jacobian(other, isx, isy, isz, d.packed)
    _kernels.force_terms(d.target, d.source, own, d.packed, isx, isy, isz,
                         d.resid, d.terms, d.mask)
    if params.distance_mode == "shift_filtered":
        if d.mask.all():
            shift = smooth_array(d.resid, [sigma_mm / s for s in grid.spacing])
        else:
            shift = smooth_residual(d.resid, d.mask, grid.spacing, sigma_mm)
    else:
        shift = np.zeros(grid.dims)
    out = np.empty((3,) + grid.dims)
    slab_ss = np.empty(grid.dims[0])
    _kernels.combine_and_cap(d.resid, shift, d.terms, d.mask,
                             params.cap_voxels * grid.min_spacing / params.dt, out, slab_ss)
    return out, float(np.sqrt(slab_ss.sum() / np.prod(grid.dims)))


def _energies(I1, I2, phi, psi, params, sigma_mm):
    shift = None
    if params.distance_mode == "shift_filtered":
        shift = estimate_shift(I1, I2, phi, sigma_mm)
    return EnergyBreakdown(distance_energy(I1, I2, phi, shift),
                           elastic_energy(phi, params.mu, params.lam),
                           consistency_energy(psi, phi))


def _check_information(vol: ScalarVolume, name: str):
    if not np.ptp(vol.data) > 0:
        raise NoInformationError(f"{name} has zero intensity variance")


def solve_level(I1: ScalarVolume, I2: ScalarVolume, phi0: DisplacementField,
                psi0: DisplacementField, params: SolverParams, level: int = 0,
                callback=None, sigma_mm: float | None = None):
    """Iterate the coupled forward/backward update on one grid until convergence.

    ``callback(k, u, v, norm_f, norm_b)``, if given, is called after each force
    evaluation with the current field arrays (mm) and normalised force norms.
    ``sigma_mm`` overrides the shift-filter width (default: ``params.sigma``
    voxels of this grid).
    Returns ``(phi, psi, diagnostics)``.
    """
    t0 = time.perf_counter()
    grid = I1.grid
    for other, what in ((I2.grid, "moving image"), (phi0.grid, "forward field"),
                        (psi0.grid, "backward field")):
        if other != grid:
            raise GridMismatchError(f"{what} grid {other} differs from fixed grid {grid}")
    _check_information(I1, "fixed image")
    _check_information(I2, "moving image")
    fwd, bwd = _Direction(I1, I2), _Direction(I2, I1)
    u = phi0.data.copy()
    v = psi0.data.copy()
    _kernels.enforce_boundary(u)
    _kernels.enforce_boundary(v)
    step_cap = params.cap_voxels * grid.min_spacing
    if sigma_mm is None:
        sigma_mm = params.sigma * grid.min_spacing

    hist_f, hist_b = [], []
    norm0 = None
    prev = None
    status = Convergence.CONTINUE
    iterations = 0
    for k in range(params.max_outer):
        F, nf = _total_force(fwd, u, v, grid, params, sigma_mm)
        B, nb = _total_force(bwd, v, u, grid, params, sigma_mm)
        if not (np.isfinite(nf) and np.isfinite(nb)):
            raise NumericalError(f"non-finite force norm on level {level} at iteration {k}")
        if norm0 is None:
            norm0 = (max(nf, 1e-300), max(nb, 1e-300))
        hist_f.append(nf / norm0[0])
        hist_b.append(nb / norm0[1])
        if callback is not None:
            callback(k, u, v, hist_f[-1], hist_b[-1])
        status = check_convergence(hist_f, hist_b, params.tol)
        if status is Convergence.OSCILLATING:
            # keep whichever iterate of the 2-cycle has the lower total force
            if prev is not None and hist_f[-2] + hist_b[-2] < hist_f[-1] + hist_b[-1]:
                u, v = prev
                hist_f.pop()
                hist_b.pop()
            break
        if status is Convergence.CONVERGED:
            break
        prev = (u, v)
        iterations += 1
        u_new = relax_array(u, F, grid.spacing, params, params.gs_sweeps)
        v_new = relax_array(v, B, grid.spacing, params, params.gs_sweeps)
        u = u.copy()
        v = v.copy()
        _kernels.clamped_step(u, u_new, step_cap)
        _kernels.clamped_step(v, v_new, step_cap)
        _kernels.enforce_boundary(u)
        _kernels.enforce_boundary(v)

    phi = phi0.with_data(u)
    psi = psi0.with_data(v)
    energy = _energies(I1, I2, phi, psi, params, sigma_mm)
    energy_b = _energies(I2, I1, psi, phi, params, sigma_mm)
    if not np.isfinite(energy.total) or not np.isfinite(energy_b.total):
        raise NumericalError(f"non-finite energy on level {level}")
    diag = LevelDiagnostics(
        level=level, dims=grid.dims, outer_iterations=iterations,
        final_force_norms=(hist_f[-1] * norm0[0], hist_b[-1] * norm0[1]),
        energy=energy, energy_backward=energy_b,
        oscillation_detected=status is Convergence.OSCILLATING,
        converged=status is not Convergence.CONTINUE,
        wall_time=time.perf_counter() - t0)
    log.info("level %d %s: %d iterations, forces %.4g/%.4g, %s", level, grid.dims, iterations,
             diag.final_force_norms[0], diag.final_force_norms[1], status.value)
    return phi, psi, diag


# -- full pipeline ----------------------------------------------------------------------


def _intensity_scale(I1: ScalarVolume) -> float:
    lo, hi = np.percentile(I1.data, [1.0, 99.0])
    span = float(hi - lo)
    if not span > 0:
        span = float(np.ptp(I1.data))
    if not span > 0:
        raise NoInformationError("fixed image has zero intensity variance")
    return 1.0 / span


def register_elastic(I1: ScalarVolume, I2: ScalarVolume, init=None,
                     params: SolverParams | None = None, callback=None) -> RegistrationResult:
    """Coarse-to-fine inverse-consistent elastic registration of I2 onto I1.

    ``init`` is an optional rigid transform (fixed -> moving); I2 is resampled
    through it first. Wall time includes pyramid construction. ``callback``
    receives ``(level, k, u, v, norm_f, norm_b)`` after every force evaluation.
    """
    params = params or SolverParams()
    t0 = time.perf_counter()
    if I1.grid != I2.grid:
        raise GridMismatchError(f"fixed grid {I1.grid} differs from moving grid {I2.grid}")
    _check_information(I1, "fixed image")
    _check_information(I2, "moving image")
    if pyramid_depth(I1.dims, params.levels) < params.levels:
        raise InvalidParameterError(
            f"dims {I1.dims} too small for {params.levels} pyramid levels "
            f"(at most {pyramid_depth(I1.dims, params.levels)})")
    moving = I2
    if init is not None:
        from .rigid import resample_rigid
        moving = resample_rigid(I2, init)
    if params.intensity_range is not None:
        s = params.intensity_range * _intensity_scale(I1)
        fixed = I1.with_data(I1.data * s)
        moving = moving.with_data(moving.data * s)
    else:
        fixed = I1
    pyr1 = build_pyramid(fixed, params.levels)
    pyr2 = build_pyramid(moving, params.levels)
    phi = psi = None
    per_level = []
    for lvl in range(len(pyr1) - 1, -1, -1):
        a, b = pyr1[lvl], pyr2[lvl]
        if phi is None:
            phi = DisplacementField.zeros(a.grid)
            psi = DisplacementField.zeros(a.grid)
        else:
            phi = upsample_field(phi, a.dims)
            psi = upsample_field(psi, a.dims)
        cb = None if callback is None else functools.partial(callback, lvl)
        sigma_mm = None if params.sigma_per_level else params.sigma * I1.grid.min_spacing
        phi, psi, diag = solve_level(a, b, phi, psi, params, level=lvl, callback=cb,
                                     sigma_mm=sigma_mm)
        per_level.append(diag)
    return RegistrationResult(phi, psi, per_level, time.perf_counter() - t0, init, params)
