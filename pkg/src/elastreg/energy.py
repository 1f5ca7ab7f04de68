"""Registration energies and their force terms.

Forces are descent directions normalised per unit volume: for an energy
``E = sum_x e(x) * voxel_volume`` the force at voxel x is
``-0.5 * dE/du(x) / voxel_volume``. The intensity shift ``b`` is held fixed
while forces are evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError
from .volume import (DisplacementField, ScalarVolume, compose_fields, gradient_volume,
                     map_jacobian, smooth_array, warp_channels)

# The intensity shift b: a ScalarVolume on the fixed image grid.
ShiftField = ScalarVolume


@dataclass(frozen=True)
class EnergyBreakdown:
    distance: float
    elastic: float
    consistency: float

    @property
    def total(self) -> float:
        return self.distance + self.elastic + self.consistency


def residual(I1: ScalarVolume, I2: ScalarVolume, phi: DisplacementField):
    """``I1 - I2 o phi`` (zero outside the domain) and the domain mask."""
    I1.grid.check_same(I2.grid, "image grids")
    I1.grid.check_same(phi.grid, "image and field grids")
    warped, mask = warp_channels(I2.data[None], I2.grid, phi.data)
    r = np.where(mask, I1.data - warped[0], 0.0)
    return r, mask


def smooth_residual(r: np.ndarray, mask: np.ndarray, spacing, sigma: float) -> np.ndarray:
    """Gaussian of the residual normalised by the Gaussian of the domain mask.

    Out-of-domain voxels carry no weight, so a constant offset on the domain
    is reproduced exactly.
    """
    sig = [sigma / s for s in spacing]
    num = smooth_array(np.where(mask, r, 0.0), sig)
    den = smooth_array(mask.astype(np.float64), sig)
    return np.where(den > 1e-12, num / np.maximum(den, 1e-12), 0.0)


def estimate_shift(I1: ScalarVolume, I2: ScalarVolume, phi: DisplacementField,
                   sigma: float) -> ShiftField:
    """Local intensity shift: Gaussian (``sigma`` mm) of the masked residual."""
    if not sigma > 0:
        raise InvalidParameterError(f"shift filter sigma must be > 0, got {sigma}")
    r, mask = residual(I1, I2, phi)
    return I1.with_data(smooth_residual(r, mask, I1.spacing, sigma))


def _shift_values(shift, grid):
    if shift is None:
        return 0.0
    grid.check_same(shift.grid, "shift field grid")
    return shift.data


def distance_energy(I1: ScalarVolume, I2: ScalarVolume, phi: DisplacementField,
                    shift: ShiftField | None = None) -> float:
    """Shift-filtered SSD over the domain; ``shift=None`` gives plain SSD."""
    r, mask = residual(I1, I2, phi)
    d = np.where(mask, r - _shift_values(shift, I1.grid), 0.0)
    return float(np.sum(d * d) * I1.grid.voxel_volume)


def check_lame(mu: float, lam: float) -> None:
    if not mu > 0 or not lam >= 0:
        raise InvalidParameterError(f"need mu > 0 and lambda >= 0, got mu={mu}, lambda={lam}")


def elastic_energy(u: DisplacementField, mu: float, lam: float) -> float:
    """Linearised elastic potential, central differences, voxel-volume weighted."""
    check_lame(mu, lam)
    grads = [np.gradient(u.data[c], *u.spacing, edge_order=1) for c in range(3)]
    # grads[k][j] = d u_k / d x_j
    shear = np.zeros(u.dims)
    for j in range(3):
        for k in range(3):
            shear += (grads[k][j] + grads[j][k]) ** 2
    div = grads[0][0] + grads[1][1] + grads[2][2]
    density = 0.25 * mu * shear + 0.5 * lam * div * div
    return float(np.sum(density) * u.grid.voxel_volume)


def consistency_residual(psi: DisplacementField, phi: DisplacementField):
    """``psi(phi(x)) - x`` and the mask of voxels whose phi(x) is in-domain."""
    return compose_fields(psi, phi, return_mask=True)


def consistency_energy(psi: DisplacementField, phi: DisplacementField) -> float:
    res, mask = consistency_residual(psi, phi)
    sq = np.where(mask, np.sum(res.data**2, axis=0), 0.0)
    return float(np.sum(sq) * phi.grid.voxel_volume)


def distance_force_arrays(I1: np.ndarray, grad2: np.ndarray, stack2: np.ndarray, grid,
                          phi: np.ndarray, shift: np.ndarray | float):
    """Array-level distance force; ``stack2`` is I2 as a (1, ...) stack.

    Returns ``(force, residual, mask)``.
    """
    warped, mask = warp_channels(np.concatenate([stack2, grad2]), grid, phi)
    r = np.where(mask, I1 - warped[0], 0.0)
    d = np.where(mask, r - shift, 0.0)
    return d[None] * warped[1:], r, mask


def force_distance(I1: ScalarVolume, I2: ScalarVolume, phi: DisplacementField,
                   shift: ShiftField | None = None) -> DisplacementField:
    """(I1 - I2 o phi - b) * (grad I2) o phi, zero outside the domain."""
    I1.grid.check_same(I2.grid, "image grids")
    I1.grid.check_same(phi.grid, "image and field grids")
    f, _, _ = distance_force_arrays(I1.data, gradient_volume(I2), I2.data[None], I1.grid,
                                    phi.data, _shift_values(shift, I1.grid))
    return phi.with_data(f)


def consistency_force_arrays(psi_u: np.ndarray, psi_jac: np.ndarray, grid, phi: np.ndarray):
    """Array-level consistency force from psi's displacement and map Jacobian."""
    warped, mask = warp_channels(np.concatenate([psi_u, psi_jac]), grid, phi)
    res = phi + warped[:3]
    jac = warped[3:].reshape((3, 3) + res.shape[1:])
    # -J^T res : f_a = -sum_c J[c, a] res_c
    f = -np.einsum("ca...,c...->a...", jac, res)
    return np.where(mask[None], f, 0.0)


def force_consistency(psi: DisplacementField, phi: DisplacementField) -> DisplacementField:
    """Descent force of the consistency energy with respect to phi.

    The Jacobian of the map psi (identity plus displacement) is taken on psi's
    grid and interpolated at phi(x), then its transpose is applied to the
    residual ``psi(phi(x)) - x``.
    """
    psi.grid.check_same(phi.grid, "composed field grids")
    f = consistency_force_arrays(psi.data, map_jacobian(psi), psi.grid, phi.data)
    return phi.with_data(f)


def cap_array(f: np.ndarray, max_step: float) -> np.ndarray:
    n = np.sqrt(np.sum(f * f, axis=0))
    scale = np.where(n > max_step, max_step / np.maximum(n, 1e-300), 1.0)
    return f * scale[None]


def cap_forces(f: DisplacementField, max_step: float) -> DisplacementField:
    """Rescale vectors longer than ``max_step`` to that length."""
    if not max_step > 0:
        raise InvalidParameterError(f"max_step must be > 0, got {max_step}")
    return f.with_data(cap_array(f.data, max_step))
