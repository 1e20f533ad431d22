"""Signed distance to the zero set of a sampled function, by fast sweeping.

Voxels next to the interface get sub-voxel distances and foot points (their
projection onto the interface). Gauss-Seidel sweeps in the 8 diagonal
orderings then hand each voxel the nearest foot point among its 26
neighbours', and its distance is the Euclidean distance to that foot. This
closest-point form of sweeping stays accurate where characteristics
converge, which the first-order eikonal update does not.
"""
import numba
import numpy as np
from scipy import ndimage

from .errors import EmptyInitializationError
from .stencils import central_gradient

_BIG = 1e300


@numba.njit(cache=True)
def _sweep(dist, foot, fixed, hx, hy, hz, max_rounds):
    nx, ny, nz = dist.shape
    for _ in range(max_rounds):
        changed = False
        for sx in (1, -1):
            for sy in (1, -1):
                for sz in (1, -1):
                    for ii in range(nx):
                        i = ii if sx == 1 else nx - 1 - ii
                        px = i * hx
                        for jj in range(ny):
                            j = jj if sy == 1 else ny - 1 - jj
                            py = j * hy
                            for kk in range(nz):
                                k = kk if sz == 1 else nz - 1 - kk
                                if fixed[i, j, k]:
                                    continue
                                pz = k * hz
                                best = dist[i, j, k]
                                bi, bj, bk = -1, -1, -1
                                for nb in range(27):
                                    di = nb // 9 - 1
                                    dj = (nb // 3) % 3 - 1
                                    dk = nb % 3 - 1
                                    a, b, c = i + di, j + dj, k + dk
                                    if a < 0 or a >= nx or b < 0 or b >= ny or c < 0 or c >= nz:
                                        continue
                                    if dist[a, b, c] >= _BIG:
                                        continue
                                    ex = px - foot[a, b, c, 0]
                                    ey = py - foot[a, b, c, 1]
                                    ez = pz - foot[a, b, c, 2]
                                    cand = np.sqrt(ex * ex + ey * ey + ez * ez)
                                    if cand < best * (1.0 - 1e-14):
                                        best = cand
                                        bi, bj, bk = a, b, c
                                if bi >= 0:
                                    dist[i, j, k] = best
                                    foot[i, j, k, 0] = foot[bi, bj, bk, 0]
                                    foot[i, j, k, 1] = foot[bi, bj, bk, 1]
                                    foot[i, j, k, 2] = foot[bi, bj, bk, 2]
                                    changed = True
        if not changed:
            break
    return dist, foot


def interface_seeds(f, spacing):
    """Sub-voxel distance and foot point for voxels next to the zero set.

    Along every grid edge whose endpoints change sign the crossing is placed
    by linear interpolation. A voxel with crossings at axial distances
    ``d_a`` is projected onto the plane through those crossings, at distance
    ``(sum_a d_a**-2)**-0.5``. Where the interface is oblique to the crossed
    edges that overestimates, and the gradient projection ``|f| / |grad f|``
    is used instead when it is smaller. Voxels with ``f == 0`` are their own
    foot at distance 0.

    Returns ``(distance, foot, is_seed, crossing)``; ``foot`` and
    ``crossing`` (the nearest edge crossing) have a trailing axis of
    physical coordinates.
    """
    f = np.asarray(f, dtype=np.float64)
    spacing = tuple(float(s) for s in spacing)
    inv_sq = np.zeros(f.shape)
    # signed 1/d_a per axis: direction from the voxel towards its crossing
    towards = np.zeros(f.shape + (3,))
    # nearest single edge crossing, an exact point of the interface
    nearest = np.full(f.shape, np.inf)
    nearest_step = np.zeros(f.shape + (3,))
    seed = f == 0
    for ax, h in enumerate(spacing):
        n = f.shape[ax]
        if n < 2:
            continue
        axial = np.full(f.shape, np.inf)
        sign = np.zeros(f.shape)
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[ax] = slice(0, n - 1)
        hi[ax] = slice(1, n)
        lo, hi = tuple(lo), tuple(hi)
        fa, fb = f[lo], f[hi]
        cross = ((fa < 0) & (fb >= 0)) | ((fa > 0) & (fb <= 0)) | ((fa == 0) & (fb != 0))
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(cross, fa / (fa - fb), np.inf)
        da = np.where(cross & (fa != 0), t * h, np.inf)
        db = np.where(cross & (fb != 0), (1.0 - t) * h, np.inf)
        # crossing above a voxel (towards +axis) for the low end, below for the high end
        better = da < axial[lo]
        axial[lo] = np.where(better, da, axial[lo])
        sign[lo] = np.where(better, 1.0, sign[lo])
        better = db < axial[hi]
        axial[hi] = np.where(better, db, axial[hi])
        sign[hi] = np.where(better, -1.0, sign[hi])
        has = np.isfinite(axial)
        # a crossing closer than this is on the voxel; keep 1/d**2 finite
        axial[has] = np.maximum(axial[has], 1e-150)
        closer = has & (axial < nearest)
        nearest[closer] = axial[closer]
        nearest_step[closer] = 0.0
        nearest_step[closer, ax] = sign[closer] * axial[closer]
        inv_sq[has] += 1.0 / axial[has] ** 2
        towards[has, ax] = sign[has] / axial[has]
        seed |= has

    idx = np.indices(f.shape, dtype=np.float64)
    coords = np.stack([idx[a] * spacing[a] for a in range(3)], axis=-1)
    dist = np.full(f.shape, np.inf)
    foot = coords.copy()
    near = seed & (f != 0)

    d_plane = 1.0 / np.sqrt(inv_sq[near])
    # unit normal of the crossing plane, pointing at the interface
    n_plane = towards[near] * d_plane[:, None]
    grads = central_gradient(f, spacing)
    g = np.stack([gr[near] for gr in grads], axis=-1)
    gnorm = np.sqrt(np.sum(g * g, axis=-1))
    with np.errstate(divide="ignore", invalid="ignore"):
        d_grad = np.abs(f[near]) / gnorm
        n_grad = -np.sign(f[near])[:, None] * g / gnorm[:, None]
    use_grad = np.isfinite(d_grad) & (d_grad < d_plane)
    bounds = _cell_bounds(f)
    foot_grad = coords[near][use_grad] + d_grad[use_grad, None] * n_grad[use_grad]
    use_grad[use_grad] = _on_interface(bounds, foot_grad, spacing)
    d = np.where(use_grad, d_grad, d_plane)
    normal = np.where(use_grad[:, None], n_grad, n_plane)
    # never let a strictly signed voxel collapse onto the interface
    d = np.maximum(d, np.finfo(np.float64).tiny)
    dist[near] = d
    foot[near] = coords[near] + d[:, None] * normal
    dist[f == 0] = 0.0
    crossing = coords + nearest_step
    return dist, foot, seed, crossing


def _cell_bounds(f):
    """Min and max of ``f`` over each 2x2x2 cell, indexed by its low corner."""
    lo = f.copy()
    hi = f.copy()
    for ax in range(3):
        if f.shape[ax] < 2:
            continue
        a = [slice(None)] * 3
        b = [slice(None)] * 3
        a[ax] = slice(0, -1)
        b[ax] = slice(1, None)
        a, b = tuple(a), tuple(b)
        lo[a] = np.minimum(lo[a], lo[b])
        hi[a] = np.maximum(hi[a], hi[b])
    return lo, hi


def _on_interface(bounds, points, spacing):
    """Whether each point lies in a grid cell whose corners change sign."""
    lo, hi = bounds
    idx = []
    for ax in range(3):
        n = lo.shape[ax]
        i = np.floor(points[:, ax] / spacing[ax]).astype(np.int64)
        idx.append(np.clip(i, 0, max(n - 2, 0)))
    idx = tuple(idx)
    return (lo[idx] <= 0) & (hi[idx] >= 0)


def _diagonal_candidates(f, spacing, seed, bounds):
    """Gradient projections for voxels whose sign changes only towards a
    diagonal neighbour; kept where the projected foot lies in a cell that
    the interface actually crosses."""
    pos_nb = ndimage.maximum_filter(f, size=3, mode="nearest") >= 0
    neg_nb = ndimage.minimum_filter(f, size=3, mode="nearest") <= 0
    touch = ~seed & (((f > 0) & neg_nb) | ((f < 0) & pos_nb))
    where = np.nonzero(touch)
    grads = central_gradient(f, spacing)
    g = np.stack([gr[touch] for gr in grads], axis=-1)
    gnorm = np.sqrt(np.sum(g * g, axis=-1))
    vals = f[touch]
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.abs(vals) / gnorm
        foot = np.stack([where[a] * float(spacing[a]) for a in range(3)], axis=-1) - (
            np.sign(vals) * d / gnorm
        )[:, None] * g
    ok = np.isfinite(d) & (d <= np.sqrt(np.sum(np.square(spacing))))
    ok[ok] = _on_interface(bounds, foot[ok], spacing)
    return tuple(ix[ok] for ix in where), d[ok], foot[ok]


def _refine_feet(f, spacing, points, feet, order=3, iterations=4):
    """Closest-point refinement onto the zero set of an interpolant of ``f``.

    Alternates a Newton step onto the zero set with removal of the
    tangential offset towards ``points`` (Chopp's scheme). ``order`` 1 uses
    the trilinear interpolant, the natural surface of sampled data; order 3
    a cubic spline, which suits a smooth ``f`` such as an evolved level-set
    function but rings on step-like data. Returns the feet and their
    residual distance ``|f| / |grad f|`` to the zero set.
    """
    h = np.asarray(spacing, dtype=np.float64)
    if order == 3:
        coeffs = ndimage.spline_filter(f, order=3, mode="nearest")
        grads = [ndimage.spline_filter(g, order=3, mode="nearest") for g in central_gradient(f, spacing)]
    else:
        coeffs, grads = f, central_gradient(f, spacing)

    def sample(y):
        at = (y / h).T
        val = ndimage.map_coordinates(coeffs, at, order=order, mode="nearest", prefilter=False)
        g = np.stack(
            [ndimage.map_coordinates(c, at, order=order, mode="nearest", prefilter=False) for c in grads],
            axis=-1,
        )
        return val, g

    hi = (np.asarray(f.shape) - 1) * h
    y = feet.copy()
    for _ in range(iterations):
        val, g = sample(y)
        gg = np.sum(g * g, axis=-1)
        ok = gg > 0
        gg = np.where(ok, gg, 1.0)
        onto = y - (val / gg)[:, None] * g
        off = points - y
        tangential = off - (np.sum(off * g, axis=-1) / gg)[:, None] * g
        y = np.where(ok[:, None], onto + tangential, y)
        np.clip(y, 0.0, hi, out=y)
    # a last pure Newton step so the residual refers to the returned point
    val, g = sample(y)
    gg = np.sum(g * g, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.where((gg > 0)[:, None], y - (val / gg)[:, None] * g, y)
    np.clip(y, 0.0, hi, out=y)
    val, g = sample(y)
    with np.errstate(divide="ignore", invalid="ignore"):
        residual = np.abs(val) / np.sqrt(np.sum(g * g, axis=-1))
    return y, np.where(np.isfinite(residual), residual, np.inf)


def _trilinear_residual(f, spacing, y):
    at = (y / np.asarray(spacing, dtype=np.float64)).T
    val = ndimage.map_coordinates(f, at, order=1, mode="nearest", prefilter=False)
    g = np.stack(
        [ndimage.map_coordinates(c, at, order=1, mode="nearest", prefilter=False)
         for c in central_gradient(f, spacing)], axis=-1,
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.abs(val) / np.sqrt(np.sum(g * g, axis=-1))
    return np.where(np.isfinite(r), r, np.inf)


def _accept(f, spacing, bounds, pts, new, residual):
    diag = np.sqrt(np.sum(np.square(spacing)))
    d_new = np.sqrt(np.sum((new - pts) ** 2, axis=-1))
    good = (residual <= 1e-3 * min(spacing)) & (d_new <= diag)
    good[good] = _on_interface(bounds, new[good], spacing)
    return good, d_new


def signed_distance(f, spacing, max_rounds=8, refine=False):
    """Signed distance to ``{f = 0}``: negative where f < 0, zero where f == 0.

    Seeds come from :func:`interface_seeds`; the rest of the grid is filled
    by closest-point sweeps in all 8 diagonal orderings, repeated until no
    voxel changes (at most ``max_rounds`` times).
    """
    f = np.asarray(f, dtype=np.float64)
    dist, foot, seed, crossing = interface_seeds(f, spacing)
    if not seed.any():
        raise EmptyInitializationError("function has no zero crossing; nothing to initialise from")
    bounds = _cell_bounds(f)
    coords = np.stack(np.indices(f.shape, dtype=np.float64), axis=-1) * np.asarray(spacing, dtype=np.float64)

    # projections are only estimates; snap them onto the trilinear zero set
    # and fall back to the nearest edge crossing, which lies on it exactly
    near = np.nonzero(seed & (f != 0))
    pts = coords[near]
    new, residual = _refine_feet(f, spacing, pts, foot[near], order=1)
    good, d_new = _accept(f, spacing, bounds, pts, new, residual)
    d_cross = np.sqrt(np.sum((crossing[near] - pts) ** 2, axis=-1))
    use = good & (d_new <= dist[near])
    fallback = ~good & (d_cross < dist[near])
    foot[near] = np.where(use[:, None], new, np.where(fallback[:, None], crossing[near], foot[near]))
    dist[near] = np.where(use, d_new, np.where(fallback, d_cross, dist[near]))
    dist = np.where(seed, dist, _BIG)

    # voxels that only touch the interface diagonally start from a snapped
    # gradient projection but stay free for the sweeps to improve
    where, _, guess = _diagonal_candidates(f, spacing, seed, bounds)
    if where[0].size:
        pts = coords[where]
        new, residual = _refine_feet(f, spacing, pts, guess, order=1)
        good, d_new = _accept(f, spacing, bounds, pts, new, residual)
        sel = tuple(ix[good] for ix in where)
        foot[sel] = new[good]
        dist[sel] = d_new[good]

    if refine:
        near = np.nonzero(dist < _BIG)
        pts = coords[near]
        new, residual = _refine_feet(f, spacing, pts, foot[near], order=3)
        good, d_new = _accept(f, spacing, bounds, pts, new, residual)
        # where the spline rings its zero set strays from the data's own
        # (trilinear) one; keep only feet close to both
        good[good] = _trilinear_residual(f, spacing, new[good]) <= 0.25 * min(spacing)
        good &= np.abs(d_new - dist[near]) <= 0.25 * min(spacing)
        sel = tuple(ix[good] for ix in near)
        foot[sel] = new[good]
        dist[sel] = np.where(f[sel] == 0, 0.0, d_new[good])
    hx, hy, hz = (float(s) for s in spacing)
    dist, _ = _sweep(
        np.ascontiguousarray(dist), np.ascontiguousarray(foot), np.ascontiguousarray(seed),
        hx, hy, hz, int(max_rounds),
    )
    return np.where(f < 0, -dist, np.where(f > 0, dist, 0.0))
