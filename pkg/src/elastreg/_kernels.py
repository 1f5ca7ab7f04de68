"""Compiled inner loops.

All kernels operate on C-ordered float64 arrays indexed ``[x, y, z]`` (scalar)
or ``[c, x, y, z]`` (multi-channel). Coordinates passed to the samplers are in
voxel units. Every parallel loop writes disjoint output slabs so results do not
depend on the number of threads.
"""

import numba as nb
import numpy as np

_opts = {"cache": True, "nogil": True}

# Points within this distance (voxels) outside the grid are still in-domain;
# absorbs round-off from mm <-> voxel conversions.
_DOMAIN_EPS = 1e-9


@nb.njit(inline="always", **_opts)
def _axis_weights(c, n):
    inside = c >= -_DOMAIN_EPS and c <= n - 1 + _DOMAIN_EPS
    if c < 0.0:
        c = 0.0
    elif c > n - 1:
        c = n - 1.0
    i0 = int(np.floor(c))
    if i0 >= n - 1:
        i0 = n - 2
    return i0, c - i0, inside


@nb.njit(parallel=True, **_opts)
def warp_channels(data, disp, inv_sx, inv_sy, inv_sz, out, mask):
    """Sample every channel of ``data`` at ``index + disp / spacing``.

    ``disp`` is (3, nx, ny, nz) in mm on the output grid; the output grid
    equals the data grid.
    """
    nc, nx, ny, nz = data.shape
    for i in nb.prange(nx):
        for j in range(ny):
            for k in range(nz):
                cx = i + disp[0, i, j, k] * inv_sx
                cy = j + disp[1, i, j, k] * inv_sy
                cz = k + disp[2, i, j, k] * inv_sz
                x0, fx, okx = _axis_weights(cx, nx)
                y0, fy, oky = _axis_weights(cy, ny)
                z0, fz, okz = _axis_weights(cz, nz)
                mask[i, j, k] = okx and oky and okz
                gx = 1.0 - fx
                gy = 1.0 - fy
                gz = 1.0 - fz
                for c in range(nc):
                    out[c, i, j, k] = (
                        gx * (gy * (gz * data[c, x0, y0, z0] + fz * data[c, x0, y0, z0 + 1])
                              + fy * (gz * data[c, x0, y0 + 1, z0] + fz * data[c, x0, y0 + 1, z0 + 1]))
                        + fx * (gy * (gz * data[c, x0 + 1, y0, z0] + fz * data[c, x0 + 1, y0, z0 + 1])
                                + fy * (gz * data[c, x0 + 1, y0 + 1, z0]
                                        + fz * data[c, x0 + 1, y0 + 1, z0 + 1]))
                    )


@nb.njit(parallel=True, **_opts)
def warp_affine(data, mat, off, out, mask):
    """Sample ``data`` at ``mat @ (i, j, k) + off`` for every output voxel.

    ``mat`` and ``off`` map output voxel indices to input voxel coordinates.
    The output grid shape is taken from ``out``.
    """
    nc, nx, ny, nz = data.shape
    _, ox, oy, oz = out.shape
    for i in nb.prange(ox):
        for j in range(oy):
            bx = mat[0, 0] * i + mat[0, 1] * j + off[0]
            by = mat[1, 0] * i + mat[1, 1] * j + off[1]
            bz = mat[2, 0] * i + mat[2, 1] * j + off[2]
            for k in range(oz):
                cx = bx + mat[0, 2] * k
                cy = by + mat[1, 2] * k
                cz = bz + mat[2, 2] * k
                x0, fx, okx = _axis_weights(cx, nx)
                y0, fy, oky = _axis_weights(cy, ny)
                z0, fz, okz = _axis_weights(cz, nz)
                mask[i, j, k] = okx and oky and okz
                gx = 1.0 - fx
                gy = 1.0 - fy
                gz = 1.0 - fz
                for c in range(nc):
                    out[c, i, j, k] = (
                        gx * (gy * (gz * data[c, x0, y0, z0] + fz * data[c, x0, y0, z0 + 1])
                              + fy * (gz * data[c, x0, y0 + 1, z0] + fz * data[c, x0, y0 + 1, z0 + 1]))
                        + fx * (gy * (gz * data[c, x0 + 1, y0, z0] + fz * data[c, x0 + 1, y0, z0 + 1])
                                + fy * (gz * data[c, x0 + 1, y0 + 1, z0]
                                        + fz * data[c, x0 + 1, y0 + 1, z0 + 1]))
                    )


@nb.njit(**_opts)
def sample_points(data, coords, out, mask):
    """Sample every channel of ``data`` at arbitrary voxel coordinates (N, 3)."""
    nc, nx, ny, nz = data.shape
    for p in range(coords.shape[0]):
        x0, fx, okx = _axis_weights(coords[p, 0], nx)
        y0, fy, oky = _axis_weights(coords[p, 1], ny)
        z0, fz, okz = _axis_weights(coords[p, 2], nz)
        mask[p] = okx and oky and okz
        gx = 1.0 - fx
        gy = 1.0 - fy
        gz = 1.0 - fz
        for c in range(nc):
            out[c, p] = (
                gx * (gy * (gz * data[c, x0, y0, z0] + fz * data[c, x0, y0, z0 + 1])
                      + fy * (gz * data[c, x0, y0 + 1, z0] + fz * data[c, x0, y0 + 1, z0 + 1]))
                + fx * (gy * (gz * data[c, x0 + 1, y0, z0] + fz * data[c, x0 + 1, y0, z0 + 1])
                        + fy * (gz * data[c, x0 + 1, y0 + 1, z0] + fz * data[c, x0 + 1, y0 + 1, z0 + 1]))
            )


@nb.njit(parallel=True, **_opts)
def map_jacobian(u, inv_sx, inv_sy, inv_sz, out):
    """Jacobian of the map Id + u, shape (9, nx, ny, nz), row-major (comp, axis).

    Central differences inside, one-sided on the border (same rule as
    ``numpy.gradient`` with ``edge_order=1``).
    """
    _, nx, ny, nz = u.shape
    for i in nb.prange(nx):
        ia = i - 1 if i > 0 else 0
        ib = i + 1 if i < nx - 1 else nx - 1
        wx = inv_sx / (ib - ia)
        for j in range(ny):
            ja = j - 1 if j > 0 else 0
            jb = j + 1 if j < ny - 1 else ny - 1
            wy = inv_sy / (jb - ja)
            for k in range(nz):
                ka = k - 1 if k > 0 else 0
                kb = k + 1 if k < nz - 1 else nz - 1
                wz = inv_sz / (kb - ka)
                for c in range(3):
                    out[3 * c + 0, i, j, k] = (u[c, ib, j, k] - u[c, ia, j, k]) * wx
                    out[3 * c + 1, i, j, k] = (u[c, i, jb, k] - u[c, i, ja, k]) * wy
                    out[3 * c + 2, i, j, k] = (u[c, i, j, kb] - u[c, i, j, ka]) * wz
                out[0, i, j, k] += 1.0
                out[4, i, j, k] += 1.0
                out[8, i, j, k] += 1.0


@nb.njit(**_opts)
def enforce_boundary(u):
    """Sliding faces (zero normal component, zero normal derivative of the
    tangential components) and fixed edges (all components zero)."""
    _, nx, ny, nz = u.shape
    for j in range(ny):
        for k in range(nz):
            u[0, 0, j, k] = 0.0
            u[0, nx - 1, j, k] = 0.0
            for c in (1, 2):
                u[c, 0, j, k] = u[c, 1, j, k]
                u[c, nx - 1, j, k] = u[c, nx - 2, j, k]
    for i in range(nx):
        for k in range(nz):
            u[1, i, 0, k] = 0.0
            u[1, i, ny - 1, k] = 0.0
            for c in (0, 2):
                u[c, i, 0, k] = u[c, i, 1, k]
                u[c, i, ny - 1, k] = u[c, i, ny - 2, k]
    for i in range(nx):
        for j in range(ny):
            u[2, i, j, 0] = 0.0
            u[2, i, j, nz - 1] = 0.0
            for c in (0, 1):
                u[c, i, j, 0] = u[c, i, j, 1]
                u[c, i, j, nz - 1] = u[c, i, j, nz - 2]
    # edges: voxels lying on two faces at once
    for c in range(3):
        for i in (0, nx - 1):
            for j in (0, ny - 1):
                for k in range(nz):
                    u[c, i, j, k] = 0.0
            for k in (0, nz - 1):
                for j in range(ny):
                    u[c, i, j, k] = 0.0
        for j in (0, ny - 1):
            for k in (0, nz - 1):
                for i in range(nx):
                    u[c, i, j, k] = 0.0


@nb.njit(parallel=True, **_opts)
def _half_sweep(u, rhs, dt, mu, lam, hx, hy, hz, color, comp):
    _, nx, ny, nz = u.shape
    ix2 = 1.0 / (hx * hx)
    iy2 = 1.0 / (hy * hy)
    iz2 = 1.0 / (hz * hz)
    lm = lam + mu
    mxy = lm / (4.0 * hx * hy)
    mxz = lm / (4.0 * hx * hz)
    myz = lm / (4.0 * hy * hz)
    base = 2.0 * mu * (ix2 + iy2 + iz2)
    if comp == 0:
        diag = 1.0 + dt * (base + 2.0 * lm * ix2)
    elif comp == 1:
        diag = 1.0 + dt * (base + 2.0 * lm * iy2)
    else:
        diag = 1.0 + dt * (base + 2.0 * lm * iz2)
    inv_diag = 1.0 / diag
    for i in nb.prange(1, nx - 1):
        for j in range(1, ny - 1):
            k0 = 1 if (i + j + 1) % 2 == color else 2
            for k in range(k0, nz - 1, 2):
                if comp == 0:
                    w = u[0]
                    s = ((mu + lm) * ix2 * (w[i + 1, j, k] + w[i - 1, j, k])
                         + mu * iy2 * (w[i, j + 1, k] + w[i, j - 1, k])
                         + mu * iz2 * (w[i, j, k + 1] + w[i, j, k - 1]))
                    v = u[1]
                    s += mxy * (v[i + 1, j + 1, k] - v[i + 1, j - 1, k]
                                - v[i - 1, j + 1, k] + v[i - 1, j - 1, k])
                    v = u[2]
                    s += mxz * (v[i + 1, j, k + 1] - v[i + 1, j, k - 1]
                                - v[i - 1, j, k + 1] + v[i - 1, j, k - 1])
                elif comp == 1:
                    w = u[1]
                    s = (mu * ix2 * (w[i + 1, j, k] + w[i - 1, j, k])
                         + (mu + lm) * iy2 * (w[i, j + 1, k] + w[i, j - 1, k])
                         + mu * iz2 * (w[i, j, k + 1] + w[i, j, k - 1]))
                    v = u[0]
                    s += mxy * (v[i + 1, j + 1, k] - v[i + 1, j - 1, k]
                                - v[i - 1, j + 1, k] + v[i - 1, j - 1, k])
                    v = u[2]
                    s += myz * (v[i, j + 1, k + 1] - v[i, j + 1, k - 1]
                                - v[i, j - 1, k + 1] + v[i, j - 1, k - 1])
                else:
                    w = u[2]
                    s = (mu * ix2 * (w[i + 1, j, k] + w[i - 1, j, k])
                         + mu * iy2 * (w[i, j + 1, k] + w[i, j - 1, k])
                         + (mu + lm) * iz2 * (w[i, j, k + 1] + w[i, j, k - 1]))
                    v = u[0]
                    s += mxz * (v[i + 1, j, k + 1] - v[i + 1, j, k - 1]
                                - v[i - 1, j, k + 1] + v[i - 1, j, k - 1])
                    v = u[1]
                    s += myz * (v[i, j + 1, k + 1] - v[i, j + 1, k - 1]
                                - v[i, j - 1, k + 1] + v[i, j - 1, k - 1])
                u[comp, i, j, k] = (rhs[comp, i, j, k] + dt * s) * inv_diag


@nb.njit(**_opts)
def rbgs(u, rhs, dt, mu, lam, hx, hy, hz, sweeps):
    """Red-black Gauss-Seidel sweeps for (I - dt L) u = rhs, in place.

    Within one colour the three components are updated one after another; a
    component's own stencil only touches opposite-colour voxels, and the
    mixed-derivative terms only read the other components, so each pass over
    one (colour, component) pair is order independent.
    """
    for _ in range(sweeps):
        for color in range(2):
            for comp in range(3):
                _half_sweep(u, rhs, dt, mu, lam, hx, hy, hz, color, comp)
            enforce_boundary(u)


@nb.njit(parallel=True, **_opts)
def pack_field_jacobian(u, inv_sx, inv_sy, inv_sz, out):
    """Channel-last (nx, ny, nz, 12) stack of u and the Jacobian of Id + u.

    Channels 0-2 hold u, channel 3 + 3 * c + a holds d(Id + u)_c / dx_a with
    the same difference rule as ``map_jacobian``.
    """
    _, nx, ny, nz = u.shape
    for i in nb.prange(nx):
        ia = i - 1 if i > 0 else 0
        ib = i + 1 if i < nx - 1 else nx - 1
        wx = inv_sx / (ib - ia)
        for j in range(ny):
            ja = j - 1 if j > 0 else 0
            jb = j + 1 if j < ny - 1 else ny - 1
            wy = inv_sy / (jb - ja)
            for k in range(nz):
                ka = k - 1 if k > 0 else 0
                kb = k + 1 if k < nz - 1 else nz - 1
                wz = inv_sz / (kb - ka)
                for c in range(3):
                    out[i, j, k, c] = u[c, i, j, k]
                    out[i, j, k, 3 + 3 * c] = (u[c, ib, j, k] - u[c, ia, j, k]) * wx
                    out[i, j, k, 4 + 3 * c] = (u[c, i, jb, k] - u[c, i, ja, k]) * wy
                    out[i, j, k, 5 + 3 * c] = (u[c, i, j, kb] - u[c, i, j, ka]) * wz
                out[i, j, k, 3] += 1.0
                out[i, j, k, 7] += 1.0
                out[i, j, k, 11] += 1.0


@nb.njit(inline="always", **_opts)
def _gather(packed, x0, y0, z0, fx, fy, fz, acc):
    nc = acc.shape[0]
    for c in range(nc):
        acc[c] = 0.0
    for dx in range(2):
        wx = fx if dx else 1.0 - fx
        for dy in range(2):
            wxy = wx * (fy if dy else 1.0 - fy)
            for dz in range(2):
                w = wxy * (fz if dz else 1.0 - fz)
                for c in range(nc):
                    acc[c] += w * packed[x0 + dx, y0 + dy, z0 + dz, c]


@nb.njit(parallel=True, **_opts)
def force_terms(target, source, own, other, inv_sx, inv_sy, inv_sz, resid, terms, mask):
    """Per-voxel ingredients of the total force on ``own``.

    ``source`` is the channel-last stack (image, gradient) and ``other`` the
    output of ``pack_field_jacobian`` for the opposite field. With
    phi(x) = x + own(x) this writes the residual ``target - image(phi)`` (zero
    off-domain), ``terms[..., 0:3]`` = gradient at phi and
    ``terms[..., 3:6]`` = -J_other(phi)^T (other(phi) + own), plus the mask.
    """
    nx, ny, nz = target.shape
    for i in nb.prange(nx):
        s = np.empty(4)
        o = np.empty(12)
        for j in range(ny):
            for k in range(nz):
                cx = i + own[0, i, j, k] * inv_sx
                cy = j + own[1, i, j, k] * inv_sy
                cz = k + own[2, i, j, k] * inv_sz
                x0, fx, okx = _axis_weights(cx, nx)
                y0, fy, oky = _axis_weights(cy, ny)
                z0, fz, okz = _axis_weights(cz, nz)
                ok = okx and oky and okz
                mask[i, j, k] = ok
                if not ok:
                    resid[i, j, k] = 0.0
                    for c in range(6):
                        terms[i, j, k, c] = 0.0
                    continue
                _gather(source, x0, y0, z0, fx, fy, fz, s)
                _gather(other, x0, y0, z0, fx, fy, fz, o)
                resid[i, j, k] = target[i, j, k] - s[0]
                r0 = own[0, i, j, k] + o[0]
                r1 = own[1, i, j, k] + o[1]
                r2 = own[2, i, j, k] + o[2]
                for a in range(3):
                    terms[i, j, k, a] = s[1 + a]
                    terms[i, j, k, 3 + a] = -(o[3 + a] * r0 + o[6 + a] * r1 + o[9 + a] * r2)


@nb.njit(parallel=True, **_opts)
def combine_and_cap(resid, shift, terms, mask, cap, out, slab_ss):
    """out = cap((resid - shift) * grad + f_cons) on the domain, zero elsewhere.

    ``slab_ss[i]`` receives the sum of squared output norms of slab ``i`` so
    the caller can reduce in a fixed order.
    """
    _, nx, ny, nz = out.shape
    for i in nb.prange(nx):
        acc = 0.0
        for j in range(ny):
            for k in range(nz):
                if not mask[i, j, k]:
                    out[0, i, j, k] = 0.0
                    out[1, i, j, k] = 0.0
                    out[2, i, j, k] = 0.0
                    continue
                d = resid[i, j, k] - shift[i, j, k]
                f0 = d * terms[i, j, k, 0] + terms[i, j, k, 3]
                f1 = d * terms[i, j, k, 1] + terms[i, j, k, 4]
                f2 = d * terms[i, j, k, 2] + terms[i, j, k, 5]
                n2 = f0 * f0 + f1 * f1 + f2 * f2
                sc = 1.0
                if n2 > cap * cap:
                    sc = cap / np.sqrt(n2)
                    n2 = cap * cap
                acc += n2
                out[0, i, j, k] = f0 * sc
                out[1, i, j, k] = f1 * sc
                out[2, i, j, k] = f2 * sc
        slab_ss[i] = acc


@nb.njit(parallel=True, **_opts)
def clamped_step(u, u_new, cap):
    """In place: u += (u_new - u), shortened per voxel to length <= cap."""
    _, nx, ny, nz = u.shape
    for i in nb.prange(nx):
        for j in range(ny):
            for k in range(nz):
                d0 = u_new[0, i, j, k] - u[0, i, j, k]
                d1 = u_new[1, i, j, k] - u[1, i, j, k]
                d2 = u_new[2, i, j, k] - u[2, i, j, k]
                n = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
                sc = cap / n if n > cap else 1.0
                u[0, i, j, k] += d0 * sc
                u[1, i, j, k] += d1 * sc
                u[2, i, j, k] += d2 * sc


@nb.njit(parallel=True, **_opts)
def smooth_axis(data, k, axis, out):
    """Correlate ``data`` with the odd kernel ``k`` along ``axis`` (zero
    outside the grid), dividing by the kernel mass that falls inside."""
    nx, ny, nz = data.shape
    r = k.shape[0] // 2
    n = data.shape[axis]
    inv = np.empty(n)
    for p in range(n):
        s = 0.0
        for t in range(-r, r + 1):
            if 0 <= p + t < n:
                s += k[t + r]
        inv[p] = 1.0 / s
    if axis == 0:
        for i in nb.prange(nx):
            for j in range(ny):
                for q in range(nz):
                    out[i, j, q] = 0.0
            for t in range(-min(r, i), min(r, nx - 1 - i) + 1):
                w = k[t + r] * inv[i]
                for j in range(ny):
                    for q in range(nz):
                        out[i, j, q] += w * data[i + t, j, q]
    elif axis == 1:
        for i in nb.prange(nx):
            for j in range(ny):
                for q in range(nz):
                    out[i, j, q] = 0.0
                for t in range(-min(r, j), min(r, ny - 1 - j) + 1):
                    w = k[t + r] * inv[j]
                    for q in range(nz):
                        out[i, j, q] += w * data[i, j + t, q]
    else:
        for i in nb.prange(nx):
            for j in range(ny):
                for q in range(nz):
                    s = 0.0
                    for t in range(-min(r, q), min(r, nz - 1 - q) + 1):
                        s += k[t + r] * data[i, j, q + t]
                    out[i, j, q] = s * inv[q]
