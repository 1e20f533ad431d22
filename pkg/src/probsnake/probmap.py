"""Tumor probability map from a contrast difference image.

The difference histogram is modelled as a Gaussian (unenhanced tissue,
centred near zero) plus a Poisson component on the non-negative bin lattice
(contrast uptake). Posteriors of the fitted mixture give a per-voxel
``P(tumor) - P(background)`` field in [-1, 1].
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from .errors import DegenerateInputError, FitError, NoThresholdError, ParameterError
from .volcore import Volume

__all__ = [
    "Histogram",
    "MixtureModel",
    "ProbField",
    "build_histogram",
    "fit_mixture",
    "posterior_tumor",
    "posterior_background",
    "find_threshold",
    "probability_map",
    "write_model",
    "read_model",
    "write_histogram_csv",
    "read_histogram_csv",
]

MIN_BINS = 8
MIN_TAIL_SIGNIFICANCE = 5.0
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.bin_edges, dtype=np.float64)
        counts = np.asarray(self.counts, dtype=np.float64)
        if edges.ndim != 1 or counts.ndim != 1 or edges.size != counts.size + 1:
            raise ParameterError("need len(bin_edges) == len(counts) + 1")
        if counts.size < MIN_BINS:
            raise ParameterError(f"at least {MIN_BINS} bins required, got {counts.size}")
        if not np.all(np.diff(edges) > 0):
            raise ParameterError("bin edges must be strictly increasing")
        if np.any(counts < 0) or not np.all(np.isfinite(counts)):
            raise ParameterError("counts must be finite and non-negative")
        if counts.sum() <= 0:
            raise ParameterError("histogram is empty")
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "counts", counts)

    @property
    def total(self):
        return float(self.counts.sum())

    @property
    def centers(self):
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    @property
    def bin_width(self):
        return float((self.bin_edges[-1] - self.bin_edges[0]) / self.counts.size)

    @property
    def heights(self):
        """Counts normalised to a density on the intensity axis."""
        return self.counts / (self.total * np.diff(self.bin_edges))


@dataclass(frozen=True)
class MixtureModel:
    """Background Gaussian weight ``w`` plus a Poisson tail of rate ``lam``.

    ``lam`` is measured in lattice cells of width ``bin_width`` above zero.
    The Poisson mass of cell k is spread over ``[k*bw, (k+1)*bw)``; the
    density is interpolated linearly between cell centres (constant on the
    first half cell), which keeps the mass of each cell and makes posteriors
    continuous for d > 0.
    """

    w: float
    mu: float
    sigma: float
    lam: float
    bin_width: float
    rms_residual: float = float("nan")

    def __post_init__(self):
        if not 0.0 < self.w < 1.0:
            raise ParameterError(f"w must lie in (0, 1), got {self.w}")
        if not (self.sigma > 0 and self.lam > 0 and self.bin_width > 0):
            raise ParameterError("sigma, lambda and bin_width must be positive")

    def log_gaussian(self, d):
        z = (np.asarray(d, dtype=np.float64) - self.mu) / self.sigma
        return -0.5 * z * z - math.log(self.sigma) - _LOG_SQRT_2PI

    def log_poisson(self, d):
        d = np.asarray(d, dtype=np.float64)
        u = d / self.bin_width - 0.5
        k = np.floor(np.maximum(u, 0.0))
        t = np.clip(u - k, 0.0, 1.0)
        log_lam = math.log(self.lam)
        lp0 = k * log_lam - self.lam - special.gammaln(k + 1.0)
        lp1 = (k + 1.0) * log_lam - self.lam - special.gammaln(k + 2.0)
        with np.errstate(divide="ignore"):
            out = np.logaddexp(np.log1p(-t) + lp0, np.log(t) + lp1)
        out = out - math.log(self.bin_width)
        return np.where(d < 0, -np.inf, out)

    def gaussian_density(self, d):
        return np.exp(self.log_gaussian(d))

    def poisson_density(self, d):
        return np.exp(self.log_poisson(d))

    def density(self, d):
        return self.w * self.gaussian_density(d) + (1.0 - self.w) * self.poisson_density(d)

    @property
    def poisson_mean(self):
        """Mean of the contrast component on the intensity axis."""
        return (self.lam + 0.5) * self.bin_width


@dataclass(frozen=True, eq=False)
class ProbField:
    map: Volume
    threshold_dstar: float


def build_histogram(diff: Volume, num_bins: int = 128) -> Histogram:
    if int(num_bins) != num_bins or num_bins < MIN_BINS:
        raise ParameterError(f"num_bins must be an integer >= {MIN_BINS}, got {num_bins}")
    data = diff.data.ravel()
    lo, hi = float(data.min()), float(data.max())
    if not hi > lo:
        raise DegenerateInputError("difference image is constant; no mixture can be fit")
    edges = np.linspace(lo, hi, int(num_bins) + 1)
    counts, _ = np.histogram(data, bins=edges)
    return Histogram(edges, counts.astype(np.float64))


# --- fitting -------------------------------------------------------------------


def _weighted_median(values, weights):
    order = np.argsort(values, kind="stable")
    v, c = values[order], np.cumsum(weights[order])
    return float(v[np.searchsorted(c, 0.5 * c[-1])])


def _initial_guess(h: Histogram):
    x, c, bw = h.centers, h.counts, h.bin_width
    nonpos = x <= 0
    sigma0 = 1.4826 * _weighted_median(np.abs(x[nonpos]), c[nonpos])
    sigma0 = max(sigma0, 0.5 * bw)
    w0 = float(np.clip(c[x <= 2.0 * sigma0].sum() / h.total, 0.05, 0.995))
    gauss_counts = w0 * h.total * np.diff(special.ndtr(h.bin_edges / sigma0))
    pos = x > 0
    resid = np.maximum(c - gauss_counts, 0.0)[pos]
    k = np.floor(x[pos] / bw)
    weights = resid if resid.sum() > 0 else c[pos]
    lam0 = max(float(np.sum(k * weights) / weights.sum()), 0.5)
    return w0, 0.0, sigma0, lam0


def _unpack(theta, bw):
    return MixtureModel(
        w=float(special.expit(theta[0])),
        mu=float(theta[1]),
        sigma=float(math.exp(theta[2])),
        lam=float(math.exp(theta[3])),
        bin_width=bw,
    )


def _tail_significance(m, total):
    """Tail counts over their noise, counting background mass under the tail."""
    tail = (1.0 - m.w) * total
    spread = 2.0 * math.sqrt(m.lam) * m.bin_width
    a, b = (m.poisson_mean - spread - m.mu) / m.sigma, (m.poisson_mean + spread - m.mu) / m.sigma
    overlap = m.w * total * float(special.ndtr(b) - special.ndtr(a))
    return tail / math.sqrt(tail + overlap)


def fit_mixture(h: Histogram, max_iterations: int = 500, rtol: float = 1e-10) -> MixtureModel:
    """Least-squares fit of the Gaussian + Poisson mixture to bin heights.

    Levenberg-Marquardt (MINPACK) on transformed parameters
    ``(logit w, mu, log sigma, log lambda)`` with a forward-difference
    Jacobian; stops when the relative cost reduction falls below ``rtol`` or
    after ``max_iterations`` Jacobian evaluations.
    """
    x = h.centers
    if not (np.any(h.counts[x <= 0] > 0) and np.any(h.counts[x > 0] > 0)):
        raise DegenerateInputError("histogram needs mass on both sides of zero")
    bw = h.bin_width
    y = h.heights
    w0, mu0, s0, l0 = _initial_guess(h)
    theta0 = np.array([special.logit(w0), mu0, math.log(s0), math.log(l0)])
    log_lam_max = math.log(10.0 * x.size + 10.0)

    def residuals(theta):
        # keep the exponentials finite while LM explores
        theta = np.clip(theta, [-40.0, -1e6, -30.0, -30.0], [40.0, 1e6, 30.0, log_lam_max + 5.0])
        m = _unpack(theta, bw)
        return m.density(x) - y

    with np.errstate(over="ignore", invalid="ignore"):
        res = optimize.least_squares(
            residuals,
            theta0,
            method="lm",
            ftol=rtol,
            xtol=1e-15,
            gtol=1e-15,
            max_nfev=max_iterations * (theta0.size + 1),
        )
    theta = res.x
    if not np.all(np.isfinite(theta)) or not np.all(np.isfinite(res.fun)):
        raise FitError("mixture fit diverged", params=theta)
    w = special.expit(theta[0])
    if not (1e-6 < w < 1.0 - 1e-6):
        raise FitError(f"mixture weight hit the boundary (w={w:.9g})", params=theta)
    if theta[2] < math.log(1e-3 * bw) or theta[3] < math.log(1e-6) or theta[3] > log_lam_max:
        raise FitError("sigma or lambda left the admissible range", params=theta)
    m = _unpack(theta, bw)
    if m.poisson_mean <= m.mu + m.sigma:
        raise FitError(
            "contrast component is not separated from the background "
            f"(Poisson mean {m.poisson_mean:.4g} <= mu + sigma = {m.mu + m.sigma:.4g})",
            params=theta,
        )
    z = _tail_significance(m, h.total)
    if z < MIN_TAIL_SIGNIFICANCE:
        raise FitError(
            f"contrast component is indistinguishable from background noise (z = {z:.3g})",
            params=theta,
        )
    rms = float(np.sqrt(np.mean(res.fun ** 2)))
    return MixtureModel(m.w, m.mu, m.sigma, m.lam, bw, rms)


# --- posteriors ----------------------------------------------------------------


def _log_odds_tumor(m, d):
    return (math.log1p(-m.w) + m.log_poisson(d)) - (math.log(m.w) + m.log_gaussian(d))


def posterior_tumor(m: MixtureModel, d):
    """P(tumor | d); exactly 0 for d < 0."""
    with np.errstate(invalid="ignore"):
        out = special.expit(_log_odds_tumor(m, d))
    return float(out) if np.ndim(out) == 0 else out


def posterior_background(m: MixtureModel, d):
    lb = math.log(m.w) + m.log_gaussian(d)
    lt = math.log1p(-m.w) + m.log_poisson(d)
    with np.errstate(invalid="ignore"):
        out = special.expit(lb - lt)
    return float(out) if np.ndim(out) == 0 else out


def find_threshold(m: MixtureModel, d_max: float, tol: float = 1e-6) -> float:
    """Smallest d in [0, d_max] with P(tumor | d) >= 0.5."""
    if not d_max > 0:
        raise NoThresholdError("difference image has no positive values")
    n = int(min(max(20001, 8 * d_max / m.bin_width), 2_000_001))
    grid = np.linspace(0.0, d_max, n)
    post = posterior_tumor(m, grid)
    hits = np.flatnonzero(post >= 0.5)
    if hits.size == 0:
        raise NoThresholdError(
            f"posterior never reaches 0.5 on [0, {d_max:.6g}]; no contrast class present"
        )
    i = int(hits[0])
    if i == 0:
        return 0.0
    lo, hi = float(grid[i - 1]), float(grid[i])
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if posterior_tumor(m, mid) >= 0.5:
            hi = mid
        else:
            lo = mid
    return hi


def probability_map(m: MixtureModel, diff: Volume) -> ProbField:
    post = posterior_tumor(m, diff.data)
    dstar = find_threshold(m, float(diff.data.max()))
    return ProbField(diff.with_data(2.0 * post - 1.0), dstar)


# --- text formats --------------------------------------------------------------

_MODEL_KEYS = ("w", "mu", "sigma", "lambda", "bin_width", "threshold_dstar", "rms_residual")


def write_model(path, m: MixtureModel, threshold_dstar: float):
    values = (m.w, m.mu, m.sigma, m.lam, m.bin_width, threshold_dstar, m.rms_residual)
    with open(path, "w") as fh:
        for key, val in zip(_MODEL_KEYS, values):
            fh.write(f"{key} = {float(val)!r}\n")


def read_model(path):
    """Return ``(MixtureModel, threshold_dstar)``."""
    fields = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                key, _, val = line.partition("=")
                fields[key.strip()] = float(val)
    missing = [k for k in _MODEL_KEYS if k not in fields]
    if missing:
        from .errors import FormatError

        raise FormatError(missing[0], "missing from model file")
    m = MixtureModel(
        fields["w"], fields["mu"], fields["sigma"], fields["lambda"], fields["bin_width"],
        fields["rms_residual"],
    )
    return m, fields["threshold_dstar"]


def write_histogram_csv(path, h: Histogram, m: MixtureModel | None = None):
    dens = m.density(h.centers) if m is not None else np.full(h.counts.size, np.nan)
    with open(path, "w") as fh:
        fh.write(f"# range = {float(h.bin_edges[0])!r} {float(h.bin_edges[-1])!r}\n")
        fh.write("bin_center,count,model_density\n")
        for c, n, f in zip(h.centers, h.counts, dens):
            fh.write(f"{float(c)!r},{float(n)!r},{float(f)!r}\n")


def read_histogram_csv(path) -> Histogram:
    """Inverse of :func:`write_histogram_csv`.

    Bin edges are regenerated from the ``# range`` line when present so the
    histogram is bit-identical to the exported one; otherwise they are
    inferred from uniformly spaced centres.
    """
    rng = None
    centers, counts = [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].partition("=")
                if key.strip() == "range":
                    rng = tuple(float(s) for s in val.split())
                continue
            if line.startswith("bin_center"):
                continue
            parts = line.split(",")
            centers.append(float(parts[0]))
            counts.append(float(parts[1]))
    centers = np.array(centers)
    if rng is not None:
        edges = np.linspace(rng[0], rng[1], centers.size + 1)
    else:
        width = (centers[-1] - centers[0]) / (centers.size - 1)
        edges = np.concatenate([centers - 0.5 * width, [centers[-1] + 0.5 * width]])
    return Histogram(edges, np.array(counts))
