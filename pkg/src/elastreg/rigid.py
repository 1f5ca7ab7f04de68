"""Six-parameter rigid pre-alignment by derivative-free coordinate descent.

The transform maps fixed-space points to moving-space points, so
``resample_rigid(moving, t)`` is aligned with the fixed image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from . import _kernels
from .errors import NoInformationError
from .volume import ScalarVolume, build_pyramid, gaussian_smooth

MAX_EVALUATIONS_PER_LEVEL = 3000
# above this many voxels the cost is evaluated on every second voxel per axis
_STRIDE_THRESHOLD = 2**18


@dataclass(frozen=True)
class RigidTransform:
    """x -> R (x - center) + center + translation, R from xyz Euler angles (rad)."""

    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("rotation", "translation", "center"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))

    @classmethod
    def identity(cls, center=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(center=center)

    @classmethod
    def from_params(cls, params, center) -> "RigidTransform":
        return cls(tuple(params[:3]), tuple(params[3:6]), center)

    @property
    def params(self) -> np.ndarray:
        return np.array(self.rotation + self.translation)

    def matrix(self) -> np.ndarray:
        return Rotation.from_euler("xyz", self.rotation).as_matrix()

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        c = np.asarray(self.center)
        return (p - c) @ self.matrix().T + c + np.asarray(self.translation)

    def inverse_apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        c = np.asarray(self.center)
        return (p - c - np.asarray(self.translation)) @ self.matrix() + c

    def inverse(self) -> "RigidTransform":
        rt = self.matrix().T
        angles = Rotation.from_matrix(rt).as_euler("xyz")
        return RigidTransform(tuple(angles), tuple(-rt @ np.asarray(self.translation)), self.center)


def volume_center(vol: ScalarVolume) -> tuple[float, float, float]:
    g = vol.grid
    return tuple(o + s * (n - 1) / 2.0 for o, s, n in zip(g.origin, g.spacing, g.dims))


def _voxel_affine(vol: ScalarVolume, t: RigidTransform, stride: int = 1):
    """Map output voxel indices (strided) to input voxel coordinates."""
    s = np.asarray(vol.spacing)
    o = np.asarray(vol.origin)
    c = np.asarray(t.center)
    r = t.matrix()
    mat = (r * s[None, :]) / s[:, None] * stride
    off = (r @ (o - c) + c + np.asarray(t.translation) - o) / s
    return np.ascontiguousarray(mat), np.ascontiguousarray(off)


def _resample(vol: ScalarVolume, t: RigidTransform, stride: int = 1):
    dims = tuple(len(range(0, n, stride)) for n in vol.dims)
    mat, off = _voxel_affine(vol, t, stride)
    out = np.empty((1,) + dims)
    mask = np.empty(dims, dtype=np.bool_)
    _kernels.warp_affine(vol.data[None], mat, off, out, mask)
    return out[0], mask


def resample_rigid(vol: ScalarVolume, t: RigidTransform, return_mask: bool = False):
    """out(x) = vol(t(x)) by trilinear interpolation with clamped addressing."""
    data, mask = _resample(vol, t)
    out = vol.with_data(data)
    return (out, mask) if return_mask else out


def _ssd(fixed: np.ndarray, moving: ScalarVolume, t: RigidTransform, stride: int) -> float:
    vals, mask = _resample(moving, t, stride)
    n = np.count_nonzero(mask)
    if n == 0:
        return math.inf
    d = np.where(mask, fixed - vals, 0.0)
    return float(np.sum(d * d) / n)


def highpass(vol: ScalarVolume, sigma: float) -> ScalarVolume:
    """``vol`` minus its Gaussian (``sigma`` mm): drops slowly varying intensity bias."""
    return vol.with_data(vol.data - gaussian_smooth(vol, sigma).data)


def register_rigid(I1: ScalarVolume, I2: ScalarVolume, levels: int = 3,
                   init: RigidTransform | None = None,
                   shift_sigma: float | None = None) -> RigidTransform:
    """Coarse-to-fine minimisation of the mean squared difference over 6 parameters.

    Coordinate descent with step halving, from 2 voxels / 5 degrees down to
    0.1 voxel / 0.25 degrees on the finest level (coarser levels stop earlier).
    With ``shift_sigma`` (mm) both images are high-passed first, so a smooth
    intensity bias cannot drag the alignment.
    """
    for vol, name in ((I1, "fixed"), (I2, "moving")):
        if not np.ptp(vol.data) > 0:
            raise NoInformationError(f"{name} image has zero intensity variance")
    center = volume_center(I1)
    if shift_sigma is not None:
        I1, I2 = highpass(I1, shift_sigma), highpass(I2, shift_sigma)
    x = np.zeros(6) if init is None else init.params
    pyr1 = build_pyramid(I1, levels)
    pyr2 = build_pyramid(I2, levels)
    for lvl in range(len(pyr1) - 1, -1, -1):
        a, b = pyr1[lvl], pyr2[lvl]
        stride = 2 if np.prod(a.dims) > _STRIDE_THRESHOLD else 1
        fixed = a.data[::stride, ::stride, ::stride]
        h = a.grid.min_spacing
        t_step, a_step = 2.0 * h, math.radians(5.0)
        if lvl == 0:
            t_min, a_min = 0.1 * h, math.radians(0.25)
        else:
            t_min, a_min = 0.25 * h, math.radians(1.0)

        def cost(p):
            return _ssd(fixed, b, RigidTransform.from_params(p, center), stride)

        best = cost(x)
        evals = 1
        while (t_step >= t_min or a_step >= a_min) and evals < MAX_EVALUATIONS_PER_LEVEL:
            improved = True
            while improved and evals < MAX_EVALUATIONS_PER_LEVEL:
                improved = False
                for p in range(6):
                    step = a_step if p < 3 else t_step
                    if step < (a_min if p < 3 else t_min):
                        continue
                    for sgn in (1.0, -1.0):
                        y = x.copy()
                        y[p] += sgn * step
                        c = cost(y)
                        evals += 1
                        if c < best:
                            x, best, improved = y, c, True
                            break
            t_step /= 2.0
            a_step /= 2.0
    return RigidTransform.from_params(x, center)
