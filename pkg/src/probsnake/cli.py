"""Command-line entry point: the full pipeline plus one subcommand per stage.

Every option can also be given in a plain ``key = value`` file passed with
``--config``; keys are the long option names with dashes or underscores.
Explicit flags override the file. Exit status is 0 on success, 1 for usage
or parameter errors, 2 for unreadable or malformed input and 3 for
numerical failures.
"""
from __future__ import annotations

import argparse
import os
import shutil
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import filters, levelset, metrics, phantom, probmap
from .errors import InputFormatError, ParameterError, ProbSnakeError
from .volcore import (
    BinaryMask,
    VoxelRegion,
    crop,
    difference,
    read_mask,
    read_volume,
    write_mask,
    write_volume,
)


class UsageError(ParameterError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --- option tables -------------------------------------------------------------


@dataclass(frozen=True)
class Opt:
    name: str
    type: object
    default: object
    help: str
    nargs: object = None
    choices: tuple | None = None

    @property
    def key(self):
        return self.name.replace("-", "_")


def _opt_bool(s):
    s = str(s).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


FILTER_OPTS = [
    Opt("filter", str, "perona-malik", "denoising filter", choices=("perona-malik", "minmax", "none")),
    Opt("pm-k", float, None, "Perona-Malik conductance K (default: 10%% of the intensity range)"),
    Opt("pm-dt", float, 1.0 / 8.0, "Perona-Malik dimensionless step (<= 1/6)"),
    Opt("pm-iterations", int, 10, "Perona-Malik iterations"),
    Opt("pm-conductance", str, "exponential", "conductance function", choices=("exponential", "rational")),
    Opt("mm-dt", float, None, "min/max flow step (default: largest stable)"),
    Opt("mm-iterations", int, 10, "min/max flow iterations"),
    Opt("mm-radius", int, 1, "min/max flow neighbourhood radius"),
]

LEVELSET_OPTS = [
    Opt("alpha", float, 1.0, "propagation weight"),
    Opt("beta", float, None, "curvature weight (default: 0.2 h)"),
    Opt("dt", float, None, "time step (default: largest CFL-stable)"),
    Opt("max-iterations", int, 300, "iteration cap"),
    Opt("reinit-interval", int, 25, "steps between reinitializations"),
    Opt("convergence-eps", float, None, "front displacement for early stop (default: 1e-4 h)"),
    Opt("band-width", float, None, "narrow-band radius in cm (default: full grid)"),
]

SEGMENT_OPTS = (
    [
        Opt("pre", str, None, "pre-contrast volume (.mhd)"),
        Opt("post", str, None, "post-contrast volume (.mhd)"),
        Opt("out", str, None, "output directory"),
        Opt("num-bins", int, 128, "histogram bins"),
        Opt("crop", int, None, "crop box as x0 y0 z0 x1 y1 z1 (upper bounds exclusive)", nargs=6),
        Opt("init-mask", str, None, "initialize from this mask instead of the probability map"),
        Opt("init-sphere", float, None, "initialize from a sphere: cx cy cz (voxels) r (cm)", nargs=4),
        Opt("snapshot-interval", int, 0, "write phi every N iterations (0: never)"),
        Opt("threads", int, 1, "worker threads"),
    ]
    + FILTER_OPTS
    + LEVELSET_OPTS
)


def _add_opts(p, opts):
    for o in opts:
        kw = dict(dest=o.key, default=argparse.SUPPRESS, help=o.help)
        if o.nargs is not None:
            kw["nargs"] = o.nargs
        if o.choices is not None:
            kw["choices"] = o.choices
        kw["type"] = o.type
        p.add_argument("--" + o.name, **kw)
    p.add_argument("--config", dest="config", default=None, help="key = value options file")


def read_config_file(path):
    if not os.path.exists(path):
        raise InputFormatError(f"config file not found: {path}")
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            out[k.replace("-", "_")] = v
    return out


def resolve_options(opts, ns):
    """Defaults, then config file, then flags; returns a plain dict."""
    table = {o.key: o for o in opts}
    values = {o.key: o.default for o in opts}
    if getattr(ns, "config", None):
        for k, v in read_config_file(ns.config).items():
            if k not in table:
                raise UsageError(f"unknown config key {k!r}")
            o = table[k]
            try:
                if o.nargs is not None:
                    parts = v.split()
                    if len(parts) != o.nargs:
                        raise ValueError(f"expected {o.nargs} values")
                    values[k] = [o.type(x) for x in parts]
                elif v.lower() == "none" and o.default is None:
                    values[k] = None
                else:
                    values[k] = o.type(v)
            except ValueError as exc:
                raise UsageError(f"config key {k}: {exc}") from None
            if o.choices is not None and values[k] not in o.choices:
                raise UsageError(f"config key {k}: {values[k]!r} not in {o.choices}")
    for k in table:
        if hasattr(ns, k):
            values[k] = getattr(ns, k)
    return values


def _require(values, *keys):
    for k in keys:
        if values.get(k) is None:
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _manifest_text(values):
    lines = []
    for k in sorted(values):
        v = values[k]
        if isinstance(v, (list, tuple)):
            v = " ".join(repr(float(x)) if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, float):
            v = repr(float(v))
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


# --- shared stages -------------------------------------------------------------


def _filter_params(values, v):
    f = values["filter"]
    if f == "perona-malik":
        k = values["pm_k"]
        p = filters.DiffusionParams(
            K=filters.default_diffusion_params(v).K if k is None else k,
            dt=values["pm_dt"],
            iterations=values["pm_iterations"],
            conductance_fn=values["pm_conductance"],
        )
        p.validate()
        return p
    if f == "minmax":
        p = filters.MinMaxParams(dt=values["mm_dt"], iterations=values["mm_iterations"],
                                 stencil_radius=values["mm_radius"])
        p.validate(v.h)
        return p
    return None


def apply_filter(values, v):
    p = _filter_params(values, v)
    if p is None:
        return v
    if isinstance(p, filters.DiffusionParams):
        return filters.perona_malik(v, p)
    return filters.minmax_flow(v, p)


def _levelset_params(values):
    return levelset.LevelSetParams(
        alpha=values["alpha"],
        beta=values["beta"],
        dt=values["dt"],
        max_iterations=values["max_iterations"],
        reinit_interval=values["reinit_interval"],
        convergence_eps=values["convergence_eps"],
        band_width=values["band_width"],
    )


def _check_file(path, what):
    if not Path(path).is_file():
        raise InputFormatError(f"{what} not found: {path}")


def _sphere_mask(dims, spacing, sphere):
    cx, cy, cz, r = sphere
    axes = [(np.arange(n) - c) * s for n, c, s in zip(dims, (cx, cy, cz), spacing)]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    return BinaryMask(x * x + y * y + z * z <= r * r, spacing)


def _write_trace(path, trace):
    with open(path, "w") as fh:
        fh.write("iteration,inside_count,mean_abs_delta\n")
        for it, n, d in trace:
            fh.write(f"{it},{n},{float(d)!r}\n")


def run_segment(values, out_dir, callback=None):
    """The full pipeline; writes every output into ``out_dir`` (which must exist).

    ``callback(state)``, if given, is called after every level-set step.
    """
    out_dir = Path(out_dir)
    pre = read_volume(values["pre"])
    post = read_volume(values["post"])
    if pre.dims != post.dims or pre.spacing != post.spacing:
        difference(post, pre)  # raises the grid-mismatch error
    _filter_params(values, pre)
    lsp = _levelset_params(values)
    lsp.resolve(pre.h)  # validate before any heavy work (F is bounded by 1)

    threads = max(1, int(values["threads"]))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=2) as ex:
            fpre, fpost = ex.map(lambda v: apply_filter(values, v), (pre, post))
    else:
        fpre, fpost = apply_filter(values, pre), apply_filter(values, post)
    diff = difference(fpost, fpre)
    region = None
    if values["crop"] is not None:
        c = values["crop"]
        region = VoxelRegion(c[:3], c[3:])
        diff = crop(diff, region)

    hist = probmap.build_histogram(diff, values["num_bins"])
    model = probmap.fit_mixture(hist)
    prob = probmap.probability_map(model, diff)
    probmap.write_model(out_dir / "model.txt", model, prob.threshold_dstar)
    probmap.write_histogram_csv(out_dir / "histogram.csv", hist, model)

    if values["init_mask"] is not None:
        init = read_mask(values["init_mask"])
        if region is not None:
            init = crop(init, region)
        if not init.same_grid(diff):
            raise ParameterError(f"init mask grid {init.dims} does not match the working grid {diff.dims}")
        state = levelset.initialize_from_mask(init, lsp)
    elif values["init_sphere"] is not None:
        sphere = list(values["init_sphere"])
        if region is not None:
            sphere[:3] = [c - lo for c, lo in zip(sphere[:3], region.lo)]
        state = levelset.initialize_from_mask(_sphere_mask(diff.dims, diff.spacing, sphere), lsp)
    else:
        state = levelset.initialize(prob, lsp)

    every = int(values["snapshot_interval"])
    if every < 0:
        raise UsageError("--snapshot-interval must be >= 0")

    def snap(s):
        if every and s.iteration % every == 0:
            write_volume(s.phi, out_dir / f"phi_{s.iteration:05d}.mhd", "float32")
        if callback is not None:
            callback(s)

    state = levelset.evolve(state, prob, lsp, snap)
    mask = levelset.extract_mask(state)
    if region is not None:
        full = np.zeros(pre.dims, dtype=bool)
        full[region.slices] = mask.bits
        mask = BinaryMask(full, pre.spacing)
    write_mask(mask, out_dir / "mask.mhd")
    _write_trace(out_dir / "trace.csv", state.trace)
    eff = dict(values)
    resolved = lsp.resolve(diff.h, levelset.max_force(prob))
    eff.update(beta=resolved.beta, dt=resolved.dt, convergence_eps=resolved.convergence_eps)
    if values["filter"] == "perona-malik" and values["pm_k"] is None:
        eff["pm_k_pre"] = filters.default_diffusion_params(pre).K
        eff["pm_k_post"] = filters.default_diffusion_params(post).K
    eff["iterations_run"] = state.iteration
    eff.pop("out", None)
    # parallelism never changes results, so it stays out of the manifest
    eff.pop("threads", None)
    (out_dir / "manifest.txt").write_text(_manifest_text(eff))
    return state


def _staged(out, fn):
    """Run ``fn(staging_dir)`` and move its files into ``out`` only on success."""
    out = Path(out)
    parent = out.parent if out.parent != Path("") else Path(".")
    if not parent.exists():
        raise InputFormatError(f"parent of output directory does not exist: {parent}")
    stage = Path(tempfile.mkdtemp(prefix=".staging-", dir=parent))
    try:
        result = fn(stage)
        out.mkdir(exist_ok=True)
        for f in sorted(stage.iterdir()):
            os.replace(f, out / f.name)
        return result
    finally:
        shutil.rmtree(stage, ignore_errors=True)


# --- subcommands ---------------------------------------------------------------


def cmd_segment(ns):
    values = resolve_options(SEGMENT_OPTS, ns)
    _require(values, "pre", "post", "out")
    _check_file(values["pre"], "pre-contrast volume")
    _check_file(values["post"], "post-contrast volume")
    if values["init_mask"] is not None:
        _check_file(values["init_mask"], "initial mask")
    if values["init_mask"] is not None and values["init_sphere"] is not None:
        raise UsageError("--init-mask and --init-sphere are mutually exclusive")
    if int(values["num_bins"]) < probmap.MIN_BINS:
        raise UsageError(f"--num-bins must be at least {probmap.MIN_BINS}")
    _staged(values["out"], lambda d: run_segment(values, d))
    return 0


def cmd_validate(ns):
    a = read_mask(ns.mask_a)
    b = read_mask(ns.mask_b)
    m = metrics.compare(a, b, ns.percentile)
    sys.stdout.write(m.to_csv())
    return 0


PHANTOM_OPTS = [
    Opt("out", str, None, "output directory"),
    Opt("paper-geometry", _opt_bool, False, "start from the clinical-scale geometry"),
    Opt("shape", str, None, "phantom shape", choices=phantom.SHAPES),
    Opt("dims", int, None, "grid size nx ny nz", nargs=3),
    Opt("spacing", float, None, "voxel spacing in cm", nargs=3),
    Opt("center", float, None, "centre in voxel coordinates", nargs=3),
    Opt("radius", float, None, "radius in cm"),
    Opt("contrast-lambda", float, None, "mean uptake in the enhancing region"),
    Opt("noise-sigma", float, None, "Gaussian noise std of each volume"),
    Opt("base-intensity", float, None, "background intensity"),
    Opt("seed", int, None, "PRNG seed"),
]


def cmd_phantom(ns):
    values = resolve_options(PHANTOM_OPTS, ns)
    _require(values, "out")
    base = phantom.paper_geometry_spec() if values["paper_geometry"] else phantom.PhantomSpec()
    kw = {f: getattr(base, f) for f in base.__dataclass_fields__}
    for f in kw:
        if values.get(f) is not None:
            kw[f] = tuple(values[f]) if isinstance(values[f], list) else values[f]
    if values["dims"] is not None and values["center"] is None and not values["paper_geometry"]:
        kw["center"] = None
    spec = phantom.PhantomSpec(**kw)
    spec.validate()

    def write(d):
        pre, post, truth = phantom.generate(spec)
        write_volume(pre, d / "pre.mhd", "float32")
        write_volume(post, d / "post.mhd", "float32")
        write_mask(truth, d / "truth.mhd")
        (d / "spec.txt").write_text(phantom.spec_to_text(spec))

    _staged(values["out"], write)
    return 0


def cmd_filter(ns):
    values = resolve_options(FILTER_OPTS + [Opt("input", str, None, "input volume"),
                                            Opt("output", str, None, "output volume")], ns)
    _require(values, "input", "output")
    _check_file(values["input"], "input volume")
    v = read_volume(values["input"])
    write_volume(apply_filter(values, v), values["output"], "float32")
    return 0


def cmd_fit(ns):
    if (ns.histogram is None) == (ns.pre is None or ns.post is None):
        raise UsageError("give either --histogram or both --pre and --post")
    if ns.histogram is not None:
        _check_file(ns.histogram, "histogram")
        hist = probmap.read_histogram_csv(ns.histogram)
    else:
        _check_file(ns.pre, "pre-contrast volume")
        _check_file(ns.post, "post-contrast volume")
        hist = probmap.build_histogram(difference(read_volume(ns.post), read_volume(ns.pre)), ns.num_bins)
    model = probmap.fit_mixture(hist)
    dstar = probmap.find_threshold(model, float(hist.bin_edges[-1]))
    probmap.write_model(ns.out, model, dstar)
    if ns.histogram_out:
        probmap.write_histogram_csv(ns.histogram_out, hist, model)
    return 0


def cmd_probmap(ns):
    _check_file(ns.model, "model file")
    _check_file(ns.pre, "pre-contrast volume")
    _check_file(ns.post, "post-contrast volume")
    model, _ = probmap.read_model(ns.model)
    diff = difference(read_volume(ns.post), read_volume(ns.pre))
    write_volume(probmap.probability_map(model, diff).map, ns.out, "float32")
    return 0


def cmd_baseline(ns):
    _check_file(ns.input, "input volume")
    if ns.pre is not None:
        _check_file(ns.pre, "pre-contrast volume")
        v = difference(read_volume(ns.input), read_volume(ns.pre))
    else:
        v = read_volume(ns.input)
    write_mask(metrics.baseline_segment(v, ns.threshold, ns.erode, ns.dilate), ns.out)
    return 0


def build_parser():
    p = _Parser(prog="probsnake", description="Probability-map guided level-set segmentation.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("segment", help="run the full pipeline")
    _add_opts(s, SEGMENT_OPTS)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("validate", help="agreement metrics of two masks as one CSV row")
    s.add_argument("mask_a")
    s.add_argument("mask_b")
    s.add_argument("--percentile", type=float, default=None, help="percentile Hausdorff instead of max")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("phantom", help="write a synthetic pre/post/truth triple")
    _add_opts(s, PHANTOM_OPTS)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("filter", help="denoise one volume")
    _add_opts(s, FILTER_OPTS + [Opt("input", str, None, "input volume"), Opt("output", str, None, "output volume")])
    s.set_defaults(func=cmd_filter)

    s = sub.add_parser("fit", help="fit the mixture model to a histogram")
    s.add_argument("--histogram", default=None, help="histogram CSV as written by segment")
    s.add_argument("--pre", default=None)
    s.add_argument("--post", default=None)
    s.add_argument("--num-bins", type=int, default=128)
    s.add_argument("--out", required=True, help="model file to write")
    s.add_argument("--histogram-out", default=None, help="also write the histogram CSV")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("probmap", help="probability map from a model and a volume pair")
    s.add_argument("--model", required=True)
    s.add_argument("--pre", required=True)
    s.add_argument("--post", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_probmap)

    s = sub.add_parser("baseline", help="threshold / erosion / connectivity / dilation segmenter")
    s.add_argument("--input", required=True, help="volume to threshold (post-contrast if --pre is given)")
    s.add_argument("--pre", default=None, help="subtract this volume first")
    s.add_argument("--threshold", type=float, required=True)
    s.add_argument("--erode", type=int, default=1)
    s.add_argument("--dilate", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_baseline)
    return p


def main(argv=None):
    try:
        ns = build_parser().parse_args(argv)
        return ns.func(ns)
    except ProbSnakeError as exc:
        print(f"probsnake: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"probsnake: error: {exc}", file=sys.stderr)
        return InputFormatError.exit_code


if __name__ == "__main__":
    sys.exit(main())
