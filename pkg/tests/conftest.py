"""Shared fixtures and independent oracles.

The oracles here are deliberately naive (exhaustive loops over point pairs,
hand-written stencils) and share no code with the package.
"""
import numpy as np
import pytest
from scipy.spatial.distance import cdist

from probsnake.volcore import BinaryMask, Volume


def grid_coords(dims, spacing, center=None):
    """Physical coordinate arrays, optionally relative to a voxel-space ``center``."""
    if center is None:
        center = (0.0, 0.0, 0.0)
    axes = [(np.arange(n) - c) * s for n, c, s in zip(dims, center, spacing)]
    return np.meshgrid(*axes, indexing="ij")


def ball_mask(dims, radius, spacing=(1.0, 1.0, 1.0), center=None):
    if center is None:
        center = tuple((n - 1) / 2.0 for n in dims)
    x, y, z = grid_coords(dims, spacing, center)
    return BinaryMask(x * x + y * y + z * z <= radius * radius, spacing)


def crossing_points(f, spacing):
    """Linearly interpolated zero crossings of ``f`` along all grid edges (physical coords)."""
    pts = []
    sp = np.asarray(spacing, dtype=float)
    for ax in range(3):
        idx = np.argwhere(np.ones(f.shape, dtype=bool))
        idx = idx[idx[:, ax] < f.shape[ax] - 1]
        nb = idx.copy()
        nb[:, ax] += 1
        a = f[tuple(idx.T)]
        b = f[tuple(nb.T)]
        hit = ((a < 0) & (b >= 0)) | ((a > 0) & (b <= 0)) | (a == 0)
        a, b = a[hit], b[hit]
        t = np.zeros(a.shape)
        moving = a != b
        t[moving] = a[moving] / (a[moving] - b[moving])
        p = idx[hit].astype(float)
        p[:, ax] += t
        pts.append(p * sp)
    return np.concatenate(pts)


def brute_signed_distance(f, spacing, chunk=4096):
    """Exhaustive distance from every voxel centre to every edge crossing, signed by ``f``."""
    return brute_signed_distance_to(crossing_points(f, spacing), f, spacing, chunk)


def upsample_linear(f, s):
    """Trilinear interpolant of ``f`` sampled ``s`` times more finely along each axis."""
    for ax in range(3):
        n = f.shape[ax]
        coarse = np.arange(n)
        fine = np.arange((n - 1) * s + 1) / s
        f = np.apply_along_axis(lambda v: np.interp(fine, coarse, v), ax, f)
    return f


def trilinear_signed_distance(f, spacing, s=4):
    """Exhaustive distance to the zero set of the trilinear interpolant of ``f``.

    Trilinear interpolation is linear along grid lines, so the edge crossings
    of the ``s``-times supersampled field lie exactly on that surface; the
    cloud is dense to within ``h / s``.
    """
    fine = upsample_linear(np.asarray(f, dtype=float), s)
    return brute_signed_distance_to(crossing_points(fine, tuple(h / s for h in spacing)), f, spacing)


def brute_signed_distance_to(pts, f, spacing, chunk=2048):
    vox = np.argwhere(np.ones(f.shape, dtype=bool)).astype(float) * np.asarray(spacing)
    out = np.empty(len(vox))
    for i in range(0, len(vox), chunk):
        out[i:i + chunk] = cdist(vox[i:i + chunk], pts).min(axis=1)
    out = out.reshape(f.shape)
    return np.where(f < 0, -out, out)


def brute_hausdorff(a, b, spacing):
    """Exhaustive bidirectional max-min distance between voxel-centre sets."""
    pa = np.argwhere(a).astype(float) * np.asarray(spacing)
    pb = np.argwhere(b).astype(float) * np.asarray(spacing)
    if len(pa) == 0 and len(pb) == 0:
        return 0.0
    if len(pa) == 0 or len(pb) == 0:
        return float("inf")
    d = cdist(pa, pb)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def heat_step(I, dt, spacing):
    """One explicit 6-neighbour heat step with mirrored borders, written out by hand."""
    h = min(spacing)
    out = I.copy()
    for ax, s in enumerate(spacing):
        n = I.shape[ax]
        up = np.take(I, np.minimum(np.arange(n) + 1, n - 1), axis=ax)
        dn = np.take(I, np.maximum(np.arange(n) - 1, 0), axis=ax)
        out = out + dt * h * h * (up - 2.0 * I + dn) / (s * s)
    return out


def dice_bits(a, b):
    n = a.sum() + b.sum()
    return 1.0 if n == 0 else 2.0 * np.count_nonzero(a & b) / n


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def random_volume(rng):
    def make(dims=(8, 8, 8), spacing=(1.0, 1.0, 1.0)):
        return Volume(rng.normal(size=dims), spacing)

    return make


def mixture_samples(n, w, sigma, lam, seed, bin_width=1.0):
    """Draw ``n`` difference values from the Gaussian + lattice-Poisson model.

    A Poisson draw k lands uniformly in ``[k, k+1)`` cells of ``bin_width``.
    """
    g = np.random.default_rng(seed)
    n_bg = int(round(w * n))
    bg = g.normal(0.0, sigma * bin_width, n_bg)
    k = g.poisson(lam, n - n_bg)
    tumor = (k + g.uniform(0.0, 1.0, k.size)) * bin_width
    return np.concatenate([bg, tumor])


def unit_histogram(samples, lo=-16, hi=48):
    """Histogram with unit bins whose edges sit on the integers."""
    from probsnake.probmap import Histogram

    edges = np.arange(lo, hi + 1, dtype=float)
    counts, _ = np.histogram(np.clip(samples, lo, hi), bins=edges)
    return Histogram(edges, counts.astype(float))


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """``report(n, ok, detail)`` prints one PASS/FAIL line and asserts ``ok``."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def emit(n, ok, detail):
        line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return emit


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
