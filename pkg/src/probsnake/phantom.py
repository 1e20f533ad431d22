"""Synthetic pre/post-contrast volume pairs with known tumor masks.

Random numbers come from SplitMix64 used as a counter-based generator: the
i-th 64-bit output (i = 0, 1, ...) is ``mix(seed + (i + 1) * GAMMA)``. The
stream is consumed in a fixed order, so a phantom is reproducible from its
spec alone:

1. Gaussian noise for ``pre``, one draw per voxel in x-fastest order;
2. Gaussian noise for ``post``, same order;
3. one uniform per enhancing voxel, x-fastest, inverted to a Poisson draw.

Each Gaussian block uses ``2 * ceil(n / 2)`` uniforms (Box-Muller pairs).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from .errors import ParameterError
from .volcore import BinaryMask, Volume

__all__ = [
    "PhantomSpec",
    "SHAPES",
    "generate",
    "paper_geometry_spec",
    "splitmix64",
    "uniforms",
    "spec_to_text",
    "spec_from_text",
]

SHAPES = ("ball", "blob", "ring")
GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
RING_THICKNESS = 0.3
BLOB_AMPLITUDE = 0.15
MARGIN_VOXELS = 2


def splitmix64(seed, start, count):
    """Outputs ``start .. start + count - 1`` of the SplitMix64 stream for ``seed``."""
    i = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    z = np.uint64(seed) + i * GAMMA
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def uniforms(seed, start, count):
    """Doubles in (0, 1] from the top 53 bits of each output."""
    x = splitmix64(seed, start, count)
    return ((x >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0 ** -53


def _gaussians(seed, start, n):
    m = 2 * ((n + 1) // 2)
    u = uniforms(seed, start, m)
    u1, u2 = u[0::2], u[1::2]
    rad = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(m)
    z[0::2] = rad * np.cos(2.0 * np.pi * u2)
    z[1::2] = rad * np.sin(2.0 * np.pi * u2)
    return z[:n], start + m


def _poisson(u, lam):
    if lam == 0:
        return np.zeros(u.shape)
    kmax = int(np.ceil(lam + 12.0 * np.sqrt(lam) + 20))
    cdf = stats.poisson.cdf(np.arange(kmax + 1), lam)
    k = np.searchsorted(cdf, u, side="left")
    return np.minimum(k, kmax).astype(np.float64)


@dataclass(frozen=True)
class PhantomSpec:
    """Phantom description. ``center`` is in voxel coordinates, ``radius`` in cm."""

    dims: tuple = (64, 64, 64)
    spacing: tuple = (1.0, 1.0, 1.0)
    shape: str = "ball"
    center: tuple | None = None
    radius: float = 10.0
    contrast_lambda: float = 15.0
    noise_sigma: float = 2.0
    base_intensity: float = 100.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if self.center is None:
            object.__setattr__(self, "center", tuple((n - 1) / 2.0 for n in self.dims))
        else:
            object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def outer_radius(self):
        return self.radius * (1.0 + BLOB_AMPLITUDE) if self.shape == "blob" else self.radius

    def validate(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ParameterError(f"dims must be three positive integers, got {self.dims}")
        if len(self.spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in self.spacing):
            raise ParameterError(f"spacing must be three positive reals, got {self.spacing}")
        if len(self.center) != 3:
            raise ParameterError(f"center must have three components, got {self.center}")
        if self.shape not in SHAPES:
            raise ParameterError(f"shape must be one of {SHAPES}, got {self.shape!r}")
        if not (np.isfinite(self.radius) and self.radius > 0):
            raise ParameterError(f"radius must be positive, got {self.radius}")
        if not (np.isfinite(self.contrast_lambda) and self.contrast_lambda > 0):
            raise ParameterError(f"contrast_lambda must be positive, got {self.contrast_lambda}")
        if not (np.isfinite(self.noise_sigma) and self.noise_sigma >= 0):
            raise ParameterError(f"noise_sigma must be nonnegative, got {self.noise_sigma}")
        if not np.isfinite(self.base_intensity):
            raise ParameterError("base_intensity must be finite")
        if int(self.seed) != self.seed or not 0 <= self.seed < 2 ** 64:
            raise ParameterError(f"seed must be an integer in [0, 2**64), got {self.seed}")
        r = self.outer_radius
        for c, s, n in zip(self.center, self.spacing, self.dims):
            ext = r / s
            if c - ext < MARGIN_VOXELS or c + ext > n - 1 - MARGIN_VOXELS:
                raise ParameterError(
                    f"shape of radius {r} cm at voxel {c} leaves less than {MARGIN_VOXELS} voxels "
                    f"of margin in an axis of {n} voxels spaced {s} cm"
                )


def _regions(spec):
    """Boolean (truth, enhancing) arrays for ``spec``."""
    axes = [(np.arange(n) - c) * s for n, c, s in zip(spec.dims, spec.center, spec.spacing)]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    r = np.sqrt(x * x + y * y + z * z)
    R = spec.radius
    if spec.shape == "blob":
        azimuth = np.arctan2(y, x)
        sin_polar2 = np.where(r > 0, (x * x + y * y) / np.where(r > 0, r * r, 1.0), 0.0)
        # sin^2 of the polar angle keeps the bump smooth through the poles
        R = R * (1.0 + BLOB_AMPLITUDE * np.cos(3.0 * azimuth) * sin_polar2)
    truth = r <= R
    if spec.shape == "ring":
        return truth, truth & (r > (1.0 - RING_THICKNESS) * R)
    return truth, truth


def generate(spec: PhantomSpec):
    """``(pre, post, truth)`` for ``spec``; bit-identical for identical specs."""
    spec.validate()
    truth, enh = _regions(spec)
    n = truth.size
    seed = int(spec.seed)
    pre_noise, pos = _gaussians(seed, 0, n)
    post_noise, pos = _gaussians(seed, pos, n)
    enh_f = enh.ravel(order="F")
    u = uniforms(seed, pos, int(np.count_nonzero(enh_f)))
    uptake = np.zeros(n)
    uptake[enh_f] = _poisson(u, spec.contrast_lambda)

    shape = spec.dims
    pre = spec.base_intensity + spec.noise_sigma * pre_noise.reshape(shape, order="F")
    post = (spec.base_intensity + uptake.reshape(shape, order="F")
            + spec.noise_sigma * post_noise.reshape(shape, order="F"))
    return Volume(pre, spec.spacing), Volume(post, spec.spacing), BinaryMask(truth, spec.spacing)


def paper_geometry_spec() -> PhantomSpec:
    """Clinical-scale ball: 128 x 128 x 23 voxels of 1 x 1 x 5 mm, about 50 cm^3."""
    radius = (3.0 * 50.0 / (4.0 * np.pi)) ** (1.0 / 3.0)
    return PhantomSpec(
        dims=(128, 128, 23),
        spacing=(0.1, 0.1, 0.5),
        shape="ball",
        center=(63.5, 63.5, 11.0),
        radius=radius,
        contrast_lambda=15.0,
        noise_sigma=2.0,
        base_intensity=100.0,
        seed=0,
    )


def _fmt(v):
    if isinstance(v, tuple):
        return " ".join(repr(float(x)) if isinstance(x, float) else str(x) for x in v)
    return repr(float(v)) if isinstance(v, float) else str(v)


def spec_to_text(spec: PhantomSpec) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(spec).items())


def spec_from_text(text: str) -> PhantomSpec:
    fields = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = (s.strip() for s in line.partition("="))
        fields[key] = value
    conv = {
        "dims": lambda s: tuple(int(x) for x in s.split()),
        "spacing": lambda s: tuple(float(x) for x in s.split()),
        "center": lambda s: tuple(float(x) for x in s.split()),
        "shape": str,
        "radius": float,
        "contrast_lambda": float,
        "noise_sigma": float,
        "base_intensity": float,
        "seed": int,
    }
    unknown = set(fields) - set(conv)
    if unknown:
        raise ParameterError(f"unknown phantom keys: {sorted(unknown)}")
    try:
        return PhantomSpec(**{k: conv[k](v) for k, v in fields.items()})
    except ValueError as exc:
        raise ParameterError(f"bad phantom spec: {exc}") from None
