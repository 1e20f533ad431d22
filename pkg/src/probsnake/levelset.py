"""Region-competition level-set evolution.

The implicit function ``phi`` is negative inside the segmented region. It
moves under

    phi_t = -alpha * F * |grad phi| + beta * kappa * |grad phi|

where ``F = P(tumor) - P(background)`` is the probability map and
``kappa = div(grad phi / |grad phi|)`` the mean curvature. F > 0 pushes the
front outwards, F < 0 pulls it in, and the curvature term smooths it.
``phi`` is periodically reset to the signed distance of its own zero set.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import stencils
from .distance import signed_distance
from .errors import EmptyInitializationError, NumericalError, ParameterError, ShapeError
from .probmap import ProbField
from .volcore import BinaryMask, Volume

__all__ = [
    "LevelSetParams",
    "LevelSetState",
    "Contour",
    "CFL_MARGIN",
    "initialize",
    "initialize_from_mask",
    "step",
    "evolve",
    "extract_mask",
    "contour",
    "reinitialize",
    "front_displacement",
]

CFL_MARGIN = 0.9


@dataclass(frozen=True)
class LevelSetParams:
    """Evolution settings.

    ``beta``, ``dt`` and ``convergence_eps`` may be left as ``None`` and are
    then filled in by :meth:`resolve` from the grid: ``beta = 0.2 h``,
    ``convergence_eps = 1e-4 h`` and ``dt`` the largest step meeting the CFL
    bound with margin 0.9. ``h`` is the smallest voxel spacing.
    """

    alpha: float = 1.0
    beta: float | None = None
    dt: float | None = None
    max_iterations: int = 300
    reinit_interval: int = 25
    convergence_eps: float | None = None
    band_width: float | None = None

    def cfl_number(self, h, max_force=1.0):
        return self.dt * (self.alpha * max_force / h + 6.0 * self.beta / (h * h))

    def resolve(self, h, max_force=1.0) -> "LevelSetParams":
        """Concrete parameters for a grid of minimum spacing ``h``."""
        beta = 0.2 * h if self.beta is None else float(self.beta)
        eps = 1e-4 * h if self.convergence_eps is None else float(self.convergence_eps)
        p = replace(self, beta=beta, convergence_eps=eps)
        if self.dt is None:
            rate = p.alpha * max_force / h + 6.0 * beta / (h * h)
            if rate <= 0:
                raise ParameterError("alpha and beta are both zero; nothing would move")
            p = replace(p, dt=CFL_MARGIN / rate)
        p.validate(h, max_force)
        return p

    def validate(self, h, max_force=1.0):
        for name in ("alpha", "beta", "convergence_eps"):
            val = getattr(self, name)
            if val is None or not (np.isfinite(val) and val >= 0):
                raise ParameterError(f"{name} must be a nonnegative real, got {val}")
        if self.dt is None or not (np.isfinite(self.dt) and self.dt > 0):
            raise ParameterError(f"dt must be positive, got {self.dt}")
        if int(self.max_iterations) != self.max_iterations or self.max_iterations < 1:
            raise ParameterError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if int(self.reinit_interval) != self.reinit_interval or self.reinit_interval < 1:
            raise ParameterError(f"reinit_interval must be >= 1, got {self.reinit_interval}")
        if self.band_width is not None and not (np.isfinite(self.band_width) and self.band_width > 0):
            raise ParameterError(f"band_width must be positive or None, got {self.band_width}")
        cfl = self.cfl_number(h, max_force)
        if cfl > CFL_MARGIN * (1 + 1e-12):
            raise ParameterError(f"dt={self.dt} violates the CFL bound (number {cfl:.4g} > {CFL_MARGIN})")


@dataclass(frozen=True)
class LevelSetState:
    """Evolution state; ``trace`` holds (iteration, inside_count, last_delta) rows.

    ``pre_reinit_inside`` is the inside count just before the reinitialization
    done in the step that produced this state, or ``None`` if there was none.
    """

    phi: Volume
    iteration: int = 0
    last_delta: float = float("inf")
    trace: tuple = ()
    band: np.ndarray | None = field(default=None, repr=False)
    pre_reinit_inside: int | None = None

    @property
    def inside_count(self):
        return int(np.count_nonzero(self.phi.data <= 0))


@dataclass(frozen=True)
class Contour:
    """Zero level set: the inside mask and the voxels adjacent to a sign change."""

    mask: BinaryMask
    crossing_voxels: np.ndarray


def _band(phi, params):
    if params.band_width is None:
        return None
    band = np.abs(phi) <= params.band_width
    band.setflags(write=False)
    return band


def max_force(force):
    """Largest |F|, or 1 for an all-zero field (keeps the CFL step finite)."""
    m = float(np.max(np.abs(force.map.data)))
    return m if m > 0 else 1.0


def initialize(prob: ProbField, params: LevelSetParams | None = None) -> LevelSetState:
    """Signed distance to the probability map's zero set, negative where map > 0."""
    phi = signed_distance(-prob.map.data, prob.map.spacing)
    return _start(prob.map.with_data(phi), params, prob)


def initialize_from_mask(mask: BinaryMask, params: LevelSetParams | None = None) -> LevelSetState:
    """Signed distance to the boundary of ``mask`` (negative inside)."""
    phi = signed_distance(np.where(mask.bits, -1.0, 1.0), mask.spacing)
    return _start(Volume(phi, mask.spacing), params, None)


def _start(phi, params, prob):
    band = None
    if params is not None and params.band_width is not None:
        band = _band(phi.data, params)
    state = LevelSetState(phi=phi, band=band)
    return replace(state, trace=((0, state.inside_count, float("nan")),))


def reinitialize(phi: Volume) -> Volume:
    """Reset ``phi`` to the signed distance of its own zero set.

    Signs are kept voxel by voxel, so the inside region is unchanged; the
    interface is located on a cubic-spline interpolant of ``phi``. A ``phi``
    without a zero crossing (the front has left the grid) is returned as is.
    """
    try:
        return phi.with_data(signed_distance(phi.data, phi.spacing, refine=True))
    except EmptyInitializationError:
        return phi


def _edge_crossings(phi, axis):
    n = phi.shape[axis]
    a = np.take(phi, np.arange(n - 1), axis=axis)
    b = np.take(phi, np.arange(1, n), axis=axis)
    inside_a, inside_b = a <= 0, b <= 0
    cross = inside_a != inside_b
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(cross, a / (a - b), 0.0)
    return cross, t


def front_displacement(old, new, spacing):
    """Mean displacement of the zero crossings along grid edges.

    An edge crossed in both states contributes the shift of its crossing
    point; an edge crossed in only one contributes the distance from that
    crossing to the nearer endpoint (the least the front must have moved).
    Returns 0 when no edge is crossed in either state.
    """
    total, count = 0.0, 0
    for ax, h in enumerate(spacing):
        if old.shape[ax] < 2:
            continue
        c0, t0 = _edge_crossings(old, ax)
        c1, t1 = _edge_crossings(new, ax)
        both = c0 & c1
        total += h * np.abs(t1[both] - t0[both]).sum()
        gone = c0 & ~c1
        total += h * np.minimum(t0[gone], 1.0 - t0[gone]).sum()
        born = c1 & ~c0
        total += h * np.minimum(t1[born], 1.0 - t1[born]).sum()
        count += int(np.count_nonzero(c0 | c1))
    return total / count if count else 0.0


def _check_grid(state, force):
    if state.phi.dims != force.map.dims or not state.phi.same_grid(force.map):
        raise ShapeError(f"force grid {force.map.dims} does not match phi grid {state.phi.dims}")


def pde_update(phi, force, params):
    """Right-hand side ``dphi/dt`` at every voxel."""
    spacing = phi.spacing
    prop = stencils.upwind_advance(phi.data, spacing, params.alpha * force)
    out = -prop
    if params.beta > 0:
        kappa = stencils.curvature(phi.data, spacing)
        out += params.beta * kappa * stencils.gradient_magnitude(phi.data, spacing)
    return out


def step(state: LevelSetState, force: ProbField, params: LevelSetParams) -> LevelSetState:
    """One explicit Euler step, then reinitialization every ``reinit_interval`` steps.

    ``params`` must be resolved (see :meth:`LevelSetParams.resolve`).
    """
    _check_grid(state, force)
    params.validate(state.phi.h, max_force(force))
    old = state.phi.data
    new = old + params.dt * pde_update(state.phi, force.map.data, params)
    if state.band is not None:
        new = np.where(state.band, new, old)
    it = state.iteration + 1
    if not np.all(np.isfinite(new)):
        raise NumericalError("non-finite value in phi", it)
    delta = front_displacement(old, new, state.phi.spacing)
    phi = state.phi.with_data(new)
    band = state.band
    pre_reinit = None
    if it % int(params.reinit_interval) == 0:
        pre_reinit = int(np.count_nonzero(new <= 0))
        phi = reinitialize(phi)
        band = _band(phi.data, params)
    inside = int(np.count_nonzero(phi.data <= 0))
    return LevelSetState(
        phi=phi, iteration=it, last_delta=delta, trace=state.trace + ((it, inside, delta),), band=band,
        pre_reinit_inside=pre_reinit,
    )


def evolve(state: LevelSetState, force: ProbField, params: LevelSetParams, callback=None) -> LevelSetState:
    """Step until ``max_iterations`` is reached or ``last_delta < convergence_eps``.

    ``callback(state)`` is called after every step; it may inspect but not
    modify the state.
    """
    _check_grid(state, force)
    params = params.resolve(state.phi.h, max_force(force))
    if params.band_width is not None and state.band is None:
        state = replace(state, band=_band(state.phi.data, params))
    while state.iteration < params.max_iterations:
        state = step(state, force, params)
        if callback is not None:
            callback(state)
        if state.last_delta < params.convergence_eps:
            break
    return state


def extract_mask(state: LevelSetState) -> BinaryMask:
    """Inside region ``phi <= 0`` on the grid of ``phi``."""
    return BinaryMask(state.phi.data <= 0, state.phi.spacing)


def contour(state: LevelSetState) -> Contour:
    inside = state.phi.data <= 0
    edge = np.zeros(inside.shape, dtype=bool)
    for ax in range(3):
        if inside.shape[ax] < 2:
            continue
        diff = np.diff(inside, axis=ax)
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        edge[tuple(lo)] |= diff
        edge[tuple(hi)] |= diff
    return Contour(extract_mask(state), np.argwhere(edge))
