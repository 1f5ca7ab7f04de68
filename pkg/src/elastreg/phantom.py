"""Synthetic gland phantoms with exact landmark ground truth.

A phantom pair consists of a fixed image, a moving image rendered through the
inverse of an analytic probe-pressure deformation, the forward truth field
``u`` (tissue at x moves to x + u(x)) and the two fiducial sets, where moving
fiducials are the analytically displaced fixed ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidParameterError, PhantomGenerationError
from .volume import DisplacementField, Grid, ScalarVolume, smooth_array, warp_channels

BACKGROUND = 0.2
GLAND = 0.5
GLAND_CENTER_BOOST = 0.1
FIDUCIAL_AMPLITUDE = 0.5
RIM_WIDTH_MM = 1.5
SPECKLE_SIGMA_VOXELS = 0.5
SHADOW_FACTOR = 0.1
SHADOW_BORDER_VOXELS = 2.0
# keeps the direction (x - c)/|x - c| finite at the contact point itself
_RADIAL_EPS_MM = 1e-6


@dataclass(frozen=True)
class Fiducial:
    id: int
    position: tuple[float, float, float]


@dataclass(frozen=True)
class FiducialSet:
    entries: tuple[Fiducial, ...]

    def __post_init__(self):
        ids = [f.id for f in self.entries]
        if len(set(ids)) != len(ids):
            raise InvalidParameterError("fiducial ids must be unique")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def ids(self) -> list[int]:
        return [f.id for f in self.entries]

    @property
    def positions(self) -> np.ndarray:
        return np.array([f.position for f in self.entries], dtype=np.float64).reshape(-1, 3)

    def by_id(self) -> dict[int, np.ndarray]:
        return {f.id: np.asarray(f.position, dtype=np.float64) for f in self.entries}

    def subset(self, ids) -> "FiducialSet":
        keep = set(ids)
        return FiducialSet(tuple(f for f in self.entries if f.id in keep))

    @classmethod
    def from_positions(cls, positions, ids=None) -> "FiducialSet":
        pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        ids = range(len(pos)) if ids is None else ids
        return cls(tuple(Fiducial(int(i), tuple(float(v) for v in p)) for i, p in zip(ids, pos)))


@dataclass(frozen=True)
class PhantomSpec:
    """Phantom parameters; ``None`` entries are derived from the grid extent."""

    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    gland_semi_axes: tuple[float, float, float] | None = None
    n_fiducials: int = 12
    deform_amplitude: float = 4.0
    deform_radius: float | None = None
    probe_contact: tuple[float, float, float] | None = None
    speckle_strength: float = 0.2
    bias_amplitude: float = 0.0
    shadow: bool = False
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise InvalidParameterError(f"phantom dims must be >= 8 per axis, got {self.dims}")
        if min(self.spacing) <= 0:
            raise InvalidParameterError("phantom spacing must be positive")
        if self.n_fiducials < 4:
            raise InvalidParameterError("n_fiducials must be >= 4")
        if self.deform_amplitude < 0:
            raise InvalidParameterError("deform_amplitude must be >= 0")
        if not 0 <= self.speckle_strength < 1:
            raise InvalidParameterError("speckle_strength must lie in [0, 1)")
        if not 0 <= self.bias_amplitude < 1:
            raise InvalidParameterError("bias_amplitude must lie in [0, 1)")
        if not 0 <= self.seed < 2**64:
            raise InvalidParameterError("seed must be a 64-bit unsigned integer")
        if self.deform_amplitude >= self.radius / 2:
            raise InvalidParameterError(
                f"deform_amplitude {self.deform_amplitude} must be < deform_radius/2 "
                f"({self.radius / 2}) to keep the deformation invertible")

    @property
    def grid(self) -> Grid:
        return Grid(tuple(int(n) for n in self.dims), tuple(float(s) for s in self.spacing),
                    (0.0, 0.0, 0.0))

    @property
    def extent(self) -> np.ndarray:
        return (np.asarray(self.dims) - 1) * np.asarray(self.spacing)

    @property
    def center(self) -> np.ndarray:
        return self.extent / 2.0

    @property
    def semi_axes(self) -> np.ndarray:
        if self.gland_semi_axes is not None:
            return np.asarray(self.gland_semi_axes, dtype=np.float64)
        return self.extent * np.array([0.32, 0.24, 0.21])

    @property
    def radius(self) -> float:
        if self.deform_radius is not None:
            return float(self.deform_radius)
        return float(0.24 * self.extent.min())

    @property
    def contact(self) -> np.ndarray:
        if self.probe_contact is not None:
            return np.asarray(self.probe_contact, dtype=np.float64)
        c = self.center.copy()
        c[1] -= 1.2 * self.semi_axes[1]
        return c

    def shadow_cone(self):
        """(apex, axis, half-angle in degrees) of the default acoustic shadow."""
        apex = self.center + np.array([0.25, -0.45, 0.1]) * self.semi_axes
        return apex, np.array([0.0, 1.0, 0.0]), 25.0


@dataclass(frozen=True)
class PhantomPair:
    spec: PhantomSpec
    fixed: ScalarVolume
    moving: ScalarVolume
    truth: DisplacementField
    fixed_fiducials: FiducialSet
    moving_fiducials: FiducialSet
    shadow: tuple | None = field(default=None)

    def fiducials_outside_shadow(self, margin_voxels: float = SHADOW_BORDER_VOXELS):
        """Ids whose moving position lies outside the shadow cone (plus margin)."""
        if self.shadow is None:
            return self.fixed_fiducials.ids
        apex, axis, angle = self.shadow
        margin = margin_voxels * min(self.spec.spacing)
        d = cone_signed_distance(self.moving_fiducials.positions, apex, axis, angle)
        return [f.id for f, di in zip(self.moving_fiducials, d) if di > margin]


def _rngs(seed: int):
    ss = np.random.SeedSequence(int(seed))
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def _ellipsoid_radius(pts, center, semi):
    return np.sqrt(np.sum(((pts - center) / semi) ** 2, axis=-1))


def place_fiducials(spec: PhantomSpec, rng, max_tries: int = 20000) -> FiducialSet:
    """Rejection-sample fiducials inside the inner gland with a minimum spacing."""
    semi, center = spec.semi_axes, spec.center
    min_dist = max(3.0 * min(spec.spacing), 0.35 * float(semi.min()))
    pts = []
    tries = 0
    while len(pts) < spec.n_fiducials:
        tries += 1
        if tries > max_tries:
            raise PhantomGenerationError(
                f"placed {len(pts)} of {spec.n_fiducials} fiducials after {max_tries} tries")
        p = center + semi * rng.uniform(-0.75, 0.75, size=3)
        if _ellipsoid_radius(p, center, semi) > 0.75:
            continue
        if any(np.linalg.norm(p - q) < min_dist for q in pts):
            continue
        pts.append(p)
    return FiducialSet.from_positions(np.array(pts))


def render_anatomy(spec: PhantomSpec, fiducials: FiducialSet, pts: np.ndarray) -> np.ndarray:
    """Noise-free intensity at physical points ``pts`` (..., 3)."""
    semi, center = spec.semi_axes, spec.center
    rho = _ellipsoid_radius(pts, center, semi)
    gland = GLAND + GLAND_CENTER_BOOST * np.clip(1.0 - rho**2, 0.0, None)
    dist = (rho - 1.0) * semi.min()
    inside = 0.5 * (1.0 - np.tanh(dist / RIM_WIDTH_MM))
    img = BACKGROUND + (gland - BACKGROUND) * inside
    sig = min(spec.spacing)
    for p in fiducials.positions:
        img = img + FIDUCIAL_AMPLITUDE * np.exp(-np.sum((pts - p) ** 2, axis=-1) / (2 * sig * sig))
    return img


def speckle_texture(spec: PhantomSpec, rng) -> np.ndarray:
    """Smoothed uniform noise in [-1, 1]-like units, attached to tissue coordinates."""
    noise = rng.uniform(-1.0, 1.0, size=tuple(spec.dims))
    tex = smooth_array(noise, [SPECKLE_SIGMA_VOXELS] * 3)
    return tex * (1.0 / math.sqrt(3.0)) / max(float(tex.std()), 1e-12)


def deformation_at(spec: PhantomSpec, pts) -> np.ndarray:
    """Radial push away from the probe contact with Gaussian falloff (mm)."""
    pts = np.asarray(pts, dtype=np.float64)
    d = pts - spec.contact
    n = np.sqrt(np.sum(d * d, axis=-1, keepdims=True))
    r = spec.radius
    return spec.deform_amplitude * np.exp(-(n * n) / (2 * r * r)) * d / (n + _RADIAL_EPS_MM)


def invert_points(spec: PhantomSpec, y, iterations: int = 30) -> np.ndarray:
    """Solve x + u(x) = y by the fixed-point iteration x <- y - u(x)."""
    y = np.asarray(y, dtype=np.float64)
    x = y.copy()
    for _ in range(iterations):
        x = y - deformation_at(spec, x)
    return x


def make_deformation(spec: PhantomSpec) -> DisplacementField:
    """Forward ground-truth displacement sampled on the phantom grid."""
    return DisplacementField.from_function(spec.grid, lambda p: deformation_at(spec, p))


def make_inverse_deformation(spec: PhantomSpec, iterations: int = 30) -> DisplacementField:
    return DisplacementField.from_function(spec.grid,
                                           lambda p: invert_points(spec, p, iterations) - p)


def jacobian_determinant(field: DisplacementField) -> np.ndarray:
    from .volume import map_jacobian

    j = map_jacobian(field)
    j = np.moveaxis(j.reshape((3, 3) + field.dims), (0, 1), (-2, -1))
    return np.linalg.det(j)


def _render_volume(spec, fids, texture, pts):
    img = render_anatomy(spec, fids, pts)
    if spec.speckle_strength > 0:
        img = img * (1.0 + spec.speckle_strength * texture)
    return img


def make_phantom(spec: PhantomSpec) -> tuple[ScalarVolume, FiducialSet]:
    """Undeformed gland phantom and its fiducials (deterministic in the seed)."""
    rng_fid, rng_tex, _, _ = _rngs(spec.seed)
    fids = place_fiducials(spec, rng_fid)
    grid = spec.grid
    texture = speckle_texture(spec, rng_tex) if spec.speckle_strength > 0 else None
    pts = np.moveaxis(grid.coordinates(), 0, -1)
    img = _render_volume(spec, fids, texture, pts)
    return ScalarVolume(img, grid.spacing, grid.origin), fids


def apply_deformation(vol: ScalarVolume, field: DisplacementField) -> ScalarVolume:
    """Backward warp: out(x) = vol(x + u(x)); out-of-domain samples are clamped."""
    vol.grid.check_same(field.grid, "volume and field grids")
    vals, _ = warp_channels(vol.data[None], vol.grid, field.data)
    return vol.with_data(vals[0])


def add_bias_field(vol: ScalarVolume, amplitude: float, seed: int) -> ScalarVolume:
    """Add a smooth low-frequency intensity field (sum of up to 5 wide Gaussians).

    The peak magnitude of the added field is ``amplitude`` times the volume's
    dynamic range.
    """
    if not 0 <= amplitude < 1:
        raise InvalidParameterError(f"bias amplitude must lie in [0, 1), got {amplitude}")
    if amplitude == 0:
        return vol.with_data(vol.data.copy())
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)).spawn(8)[5])
    grid = vol.grid
    extent = (np.asarray(grid.dims) - 1) * np.asarray(grid.spacing)
    pts = np.moveaxis(grid.coordinates(), 0, -1) - np.asarray(grid.origin)
    n = int(rng.integers(2, 6))
    bias = np.zeros(grid.dims)
    for i in range(n):
        c = rng.uniform(0.2, 0.8, size=3) * extent
        w = rng.uniform(0.25, 0.4) * float(extent.min())
        # first lobe is negative: a low-contrast zone as from weak probe contact
        sign = -1.0 if i == 0 else float(rng.choice([-1.0, 1.0])) * rng.uniform(0.3, 0.8)
        bias += sign * np.exp(-np.sum((pts - c) ** 2, axis=-1) / (2 * w * w))
    peak = float(np.abs(bias).max())
    rng_range = float(vol.data.max() - vol.data.min())
    return vol.with_data(vol.data + bias * (amplitude * rng_range / peak))


def cone_signed_distance(pts, apex, axis, angle_deg):
    """Approximate signed distance to the cone surface, positive outside."""
    pts = np.asarray(pts, dtype=np.float64)
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    d = pts - np.asarray(apex, dtype=np.float64)
    along = d @ axis
    radial = np.sqrt(np.maximum(np.sum(d * d, axis=-1) - along**2, 0.0))
    a = math.radians(angle_deg)
    # distance to the infinite half-cone opening along +axis; behind the apex
    # the nearest cone point is the apex itself
    dist_surface = radial * math.cos(a) - along * math.sin(a)
    behind = along * math.cos(a) + radial * math.sin(a) < 0
    return np.where(behind, np.sqrt(np.sum(d * d, axis=-1)), dist_surface)


def add_shadow(vol: ScalarVolume, apex, axis, angle: float) -> ScalarVolume:
    """Attenuate intensities inside a cone (x0.1) with a smooth 2-voxel border."""
    if not 0 < angle <= 45:
        raise InvalidParameterError(f"shadow angle must lie in (0, 45] degrees, got {angle}")
    pts = np.moveaxis(vol.grid.coordinates(), 0, -1)
    sd = cone_signed_distance(pts, apex, axis, angle) / vol.grid.min_spacing
    half = SHADOW_BORDER_VOXELS / 2.0
    t = np.clip((sd + half) / (2 * half), 0.0, 1.0)
    inside = 0.5 * (1.0 + np.cos(math.pi * t))
    factor = 1.0 - (1.0 - SHADOW_FACTOR) * inside
    return vol.with_data(vol.data * factor)


def shadow_gland_fraction(spec: PhantomSpec, apex, axis, angle: float) -> float:
    """Fraction of gland voxels lying inside the cone."""
    pts = np.moveaxis(spec.grid.coordinates(), 0, -1)
    gland = _ellipsoid_radius(pts, spec.center, spec.semi_axes) <= 1.0
    inside = cone_signed_distance(pts, apex, axis, angle) < 0
    return float(np.count_nonzero(gland & inside) / max(np.count_nonzero(gland), 1))


def make_phantom_pair(spec: PhantomSpec) -> PhantomPair:
    """Fixed/moving phantom pair with forward truth and both fiducial sets."""
    fixed, fids = make_phantom(spec)
    _, rng_tex, _, _ = _rngs(spec.seed)
    texture = speckle_texture(spec, rng_tex) if spec.speckle_strength > 0 else None
    grid = spec.grid
    pts = np.moveaxis(grid.coordinates(), 0, -1)
    if spec.deform_amplitude > 0:
        src = invert_points(spec, pts)
    else:
        src = pts
    img = render_anatomy(spec, fids, src)
    if texture is not None:
        tex, _ = warp_channels(texture[None], grid, np.moveaxis(src - pts, -1, 0))
        img = img * (1.0 + spec.speckle_strength * tex[0])
    moving = ScalarVolume(img, grid.spacing, grid.origin)
    if spec.bias_amplitude > 0:
        moving = add_bias_field(moving, spec.bias_amplitude, spec.seed)
    shadow = None
    if spec.shadow:
        shadow = spec.shadow_cone()
        moving = add_shadow(moving, *shadow)
    truth = make_deformation(spec)
    moved = fids.positions + deformation_at(spec, fids.positions)
    moving_fids = FiducialSet.from_positions(moved, fids.ids)
    return PhantomPair(spec, fixed, moving, truth, fids, moving_fids, shadow)


def with_seed(spec: PhantomSpec, seed: int) -> PhantomSpec:
    return replace(spec, seed=seed)
