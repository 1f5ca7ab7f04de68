"""Scalar volumes and displacement fields on regular grids.

Arrays are indexed ``[x, y, z]`` (scalars) and ``[component, x, y, z]``
(fields). Physical position of voxel ``(i, j, k)`` is
``origin + (i, j, k) * spacing`` in mm. Displacements are stored in mm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import GridMismatchError, InvalidParameterError

PYRAMID_SIGMA_VOXELS = 1.0
MIN_PYRAMID_DIM = 4


def _triple(values, name):
    out = tuple(float(v) for v in values)
    if len(out) != 3:
        raise InvalidParameterError(f"{name} must have 3 components, got {len(out)}")
    return out


@dataclass(frozen=True)
class Grid:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]

    @property
    def voxel_volume(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    @property
    def min_spacing(self) -> float:
        return min(self.spacing)

    def to_voxel(self, points):
        """Convert (N, 3) physical points (mm) to voxel coordinates."""
        pts = np.asarray(points, dtype=np.float64)
        return (pts - np.asarray(self.origin)) / np.asarray(self.spacing)

    def to_physical(self, coords):
        c = np.asarray(coords, dtype=np.float64)
        return c * np.asarray(self.spacing) + np.asarray(self.origin)

    def coordinates(self):
        """Physical coordinates of every voxel, shape (3, nx, ny, nz)."""
        axes = [o + s * np.arange(n) for n, s, o in zip(self.dims, self.spacing, self.origin)]
        return np.stack(np.meshgrid(*axes, indexing="ij"))

    def check_same(self, other: "Grid", what: str = "grids"):
        if self != other:
            raise GridMismatchError(f"{what} differ: {self} vs {other}")


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    """3D scalar image with physical spacing and origin."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise InvalidParameterError(f"volume data must be 3D, got shape {data.shape}")
        if min(data.shape) < 2:
            raise InvalidParameterError(f"all dims must be >= 2, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidParameterError("volume contains non-finite values")
        spacing = _triple(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise InvalidParameterError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def grid(self) -> Grid:
        return Grid(self.dims, self.spacing, self.origin)

    def with_data(self, data) -> "ScalarVolume":
        return ScalarVolume(data, self.spacing, self.origin)


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Vector field u (mm) on a voxel grid; the map is x -> x + u(x)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 4 or data.shape[0] != 3:
            raise InvalidParameterError(f"field data must be (3, nx, ny, nz), got {data.shape}")
        if min(data.shape[1:]) < 2:
            raise InvalidParameterError(f"all dims must be >= 2, got {data.shape[1:]}")
        if not np.all(np.isfinite(data)):
            raise InvalidParameterError("field contains non-finite values")
        spacing = _triple(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise InvalidParameterError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))

    @classmethod
    def zeros(cls, grid: Grid) -> "DisplacementField":
        return cls(np.zeros((3,) + tuple(grid.dims)), grid.spacing, grid.origin)

    @classmethod
    def from_function(cls, grid: Grid, func) -> "DisplacementField":
        """Evaluate ``func(points) -> displacements`` on every voxel (points (N, 3), mm)."""
        pts = grid.coordinates().reshape(3, -1).T
        vals = np.asarray(func(pts), dtype=np.float64)
        return cls(vals.T.reshape((3,) + tuple(grid.dims)), grid.spacing, grid.origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape[1:])

    @property
    def grid(self) -> Grid:
        return Grid(self.dims, self.spacing, self.origin)

    def with_data(self, data) -> "DisplacementField":
        return DisplacementField(data, self.spacing, self.origin)

    def norms(self) -> np.ndarray:
        return np.sqrt(np.sum(self.data**2, axis=0))

    def norms_voxels(self) -> np.ndarray:
        """Per-voxel displacement length measured in voxel units."""
        s = np.asarray(self.spacing).reshape(3, 1, 1, 1)
        return np.sqrt(np.sum((self.data / s) ** 2, axis=0))

    def sample(self, points) -> np.ndarray:
        """Trilinear displacement (N, 3) at physical points (N, 3)."""
        vals, _ = sample_channels(self.data, self.grid, points)
        return vals.T

    def map_points(self, points) -> np.ndarray:
        """Apply x -> x + u(x) to physical points."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return pts + self.sample(pts)


@dataclass(frozen=True)
class GaussianPyramid:
    """Level 0 is full resolution; each further level is smoothed and halved."""

    levels: tuple

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, idx):
        return self.levels[idx]


# -- sampling -----------------------------------------------------------------


def sample_channels(channels: np.ndarray, grid: Grid, points):
    """Trilinearly sample a (C, nx, ny, nz) stack at physical points.

    Returns ``(values (C, N), in_domain (N,))``. Addressing is clamped to the
    grid; points outside the grid are flagged rather than rejected.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    coords = np.ascontiguousarray(grid.to_voxel(pts))
    out = np.empty((channels.shape[0], coords.shape[0]))
    mask = np.empty(coords.shape[0], dtype=np.bool_)
    _kernels.sample_points(np.ascontiguousarray(channels, dtype=np.float64), coords, out, mask)
    return out, mask


def sample_trilinear(vol: ScalarVolume, p, return_mask: bool = False):
    """Trilinear value of ``vol`` at physical point(s) ``p`` (mm).

    A single point returns a float, an (N, 3) array returns N values. With
    ``return_mask`` the in-domain flag(s) are returned as well.
    """
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    vals, mask = sample_channels(vol.data[None], vol.grid, pts.reshape(-1, 3))
    vals = vals[0]
    if single:
        vals, mask = float(vals[0]), bool(mask[0])
    return (vals, mask) if return_mask else vals


def warp_channels(channels: np.ndarray, grid: Grid, disp: np.ndarray):
    """Sample a (C, nx, ny, nz) stack at ``x + disp(x)`` for every voxel x.

    Returns ``(values (C, nx, ny, nz), in_domain (nx, ny, nz))``.
    """
    sx, sy, sz = grid.spacing
    out = np.empty(channels.shape)
    mask = np.empty(channels.shape[1:], dtype=np.bool_)
    _kernels.warp_channels(np.ascontiguousarray(channels, dtype=np.float64),
                           np.ascontiguousarray(disp, dtype=np.float64),
                           1.0 / sx, 1.0 / sy, 1.0 / sz, out, mask)
    return out, mask


def warp_volume(vol: ScalarVolume, field: DisplacementField):
    """``vol(x + u(x))`` on vol's grid, plus the in-domain mask."""
    vol.grid.check_same(field.grid, "volume and field grids")
    vals, mask = warp_channels(vol.data[None], vol.grid, field.data)
    return vol.with_data(vals[0]), mask


# -- derivatives and smoothing -------------------------------------------------


def gradient_volume(vol: ScalarVolume) -> np.ndarray:
    """Spacing-aware central differences, one-sided on the border; (3, nx, ny, nz)."""
    return np.stack(np.gradient(vol.data, *vol.spacing, edge_order=1))


def gradient_at(vol: ScalarVolume, p) -> np.ndarray:
    """Grid gradient of ``vol`` trilinearly sampled at physical point(s) ``p``."""
    pts = np.asarray(p, dtype=np.float64)
    vals, _ = sample_channels(gradient_volume(vol), vol.grid, pts.reshape(-1, 3))
    return vals[:, 0] if pts.ndim == 1 else vals.T


def gaussian_kernel(sigma_vox: float) -> np.ndarray:
    """Unit-sum 1D Gaussian sampled at integers and truncated at 3 sigma."""
    radius = max(1, int(math.floor(3.0 * sigma_vox)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma_vox) ** 2)
    return k / k.sum()


def smooth_array(data: np.ndarray, sigma_vox) -> np.ndarray:
    """Separable Gaussian of a 3D array, renormalised over in-grid support.

    ``sigma_vox`` is one value per axis (voxels); zero skips that axis. Because
    the kernel and the grid are both separable, renormalising each 1D pass
    equals renormalising the full 3D kernel over the box.
    """
    out = np.ascontiguousarray(data, dtype=np.float64)
    for axis, s in enumerate(sigma_vox):
        if s <= 0:
            continue
        nxt = np.empty_like(out)
        _kernels.smooth_axis(out, gaussian_kernel(s), axis, nxt)
        out = nxt
    return out if out is not data else out.copy()


def gaussian_smooth(vol: ScalarVolume, sigma: float) -> ScalarVolume:
    """Gaussian smoothing with standard deviation ``sigma`` in mm."""
    if sigma < 0:
        raise InvalidParameterError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return vol.with_data(vol.data.copy())
    return vol.with_data(smooth_array(vol.data, [sigma / s for s in vol.spacing]))


# -- pyramid -------------------------------------------------------------------


def _halve(data: np.ndarray, spacing, origin):
    sm = smooth_array(data, [PYRAMID_SIGMA_VOXELS] * 3)
    return sm[::2, ::2, ::2], tuple(2.0 * s for s in spacing), origin


def build_pyramid(vol: ScalarVolume, max_levels: int) -> GaussianPyramid:
    """Smooth (1 voxel) and subsample by 2 until ``max_levels`` or the 4-voxel floor."""
    if max_levels < 1:
        raise InvalidParameterError(f"max_levels must be >= 1, got {max_levels}")
    levels = [vol]
    while len(levels) < max_levels:
        cur = levels[-1]
        if min(math.ceil(n / 2) for n in cur.dims) < MIN_PYRAMID_DIM:
            break
        data, spacing, origin = _halve(cur.data, cur.spacing, cur.origin)
        levels.append(ScalarVolume(data, spacing, origin))
    return GaussianPyramid(tuple(levels))


def pyramid_depth(dims, max_levels: int) -> int:
    """Number of levels ``build_pyramid`` produces for a volume of ``dims``."""
    depth, cur = 1, tuple(dims)
    while depth < max_levels and min(math.ceil(n / 2) for n in cur) >= MIN_PYRAMID_DIM:
        cur = tuple(math.ceil(n / 2) for n in cur)
        depth += 1
    return depth


def coarse_grid(grid: Grid) -> Grid:
    return Grid(tuple(math.ceil(n / 2) for n in grid.dims),
                tuple(2.0 * s for s in grid.spacing), grid.origin)


# -- field operations -------------------------------------------------------------


def compose_fields(outer: DisplacementField, inner: DisplacementField,
                   return_mask: bool = False):
    """Displacement of ``outer o inner``: r(x) = x + u_i(x) + u_o(x + u_i(x)) - x."""
    outer.grid.check_same(inner.grid, "composed field grids")
    vals, mask = warp_channels(outer.data, outer.grid, inner.data)
    res = inner.with_data(inner.data + vals)
    return (res, mask) if return_mask else res


def upsample_field(field: DisplacementField, target_dims) -> DisplacementField:
    """Trilinear prolongation onto the next finer pyramid grid (values in mm kept)."""
    target = tuple(int(n) for n in target_dims)
    if len(target) != 3 or any(math.ceil(t / 2) != n for t, n in zip(target, field.dims)):
        raise GridMismatchError(
            f"target dims {target} are not a halving-rule parent of {field.dims}")
    spacing = tuple(s / 2.0 for s in field.spacing)
    fine = Grid(target, spacing, field.origin)
    # fine voxel i sits at coarse coordinate i / 2
    mat = np.diag([0.5, 0.5, 0.5])
    out = np.empty((3,) + target)
    mask = np.empty(target, dtype=np.bool_)
    _kernels.warp_affine(field.data, mat, np.zeros(3), out, mask)
    return DisplacementField(out, fine.spacing, fine.origin)


def map_jacobian(field: DisplacementField) -> np.ndarray:
    """Jacobian of x -> x + u(x), shape (9, nx, ny, nz), entry ``3*c + axis``."""
    sx, sy, sz = field.spacing
    out = np.empty((9,) + field.dims)
    _kernels.map_jacobian(field.data, 1.0 / sx, 1.0 / sy, 1.0 / sz, out)
    return out
