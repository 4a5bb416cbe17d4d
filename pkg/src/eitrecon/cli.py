"""Configuration-driven command-line frontend.

Four commands cover the working loop: ``gen-samples`` draws and simulates
a sample collection, ``reconstruct`` runs the full three-stage pipeline,
``kappa`` sweeps a gradient-consistency diagnostic over probe step sizes,
and ``render`` rasters a per-element field to a plain text graymap.

Run configurations are line-oriented ``key = value`` files with dotted
section names (``mesh.radius = 0.1``).  All randomness flows from the one
``seed`` key through named substreams, so every artifact is reproducible.

Exit codes: 0 success, 2 bad configuration, 3 I/O or parse failure,
4 solver failure, 5 degenerate probe direction.
"""

from __future__ import annotations

import argparse
import math
import os
import re
import sys
import time
from dataclasses import dataclass, field as dataclass_field

import numpy as np
from scipy.spatial import cKDTree

from . import fem
from .fem import CemSystem, ExcitationScheme
from .field import sample_field_matrix
from .geometry import build_disc_mesh, load_mesh, place_electrodes
from .grad import DegenerateDirectionError, grad_alpha, grad_p, kappa_test, spatial_gradient
from .opt import (
    CostEvaluator,
    FineControl,
    coarse_field,
    init_zeta,
    partition_field,
    resolve_collection,
    resolve_targets,
    run_pipeline,
    seed_streams,
)

# voltage pattern applied to the 16 electrodes before rotation
DEFAULT_BASE_PATTERN = (-3.0, 1.0, 2.0, -5.0, 4.0, -1.0, -3.0, 2.0,
                        4.0, 3.0, -3.0, 3.0, 2.0, -4.0, 1.0, -3.0)

# demonstration model: three inclusions a third of a turn apart, sized so
# the smallest sits near the recovery limit of the desk-scale setup
DEMO_REGIONS = ((0.0, 0.05, 0.036),
                (-0.0433, -0.025, 0.030),
                (0.0433, -0.025, 0.022))

# sup-norm of the circle-parameter kappa probe: at eps = 1e-3 the step then
# sits where the one-sided differences themselves live, so the quotient can
# track the finite-difference slope before element flips quantize it away
P_PROBE_SCALE = 1.78


class ConfigError(ValueError):
    """Invalid run-configuration contents."""


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class MeshConfig:
    radius: float = 0.1
    target_elements: int = 2000


@dataclass
class ElectrodeConfig:
    m: int = 16
    half_width: float = 0.12
    impedance: float = 0.1


@dataclass
class ExcitationConfig:
    base_pattern: tuple = DEFAULT_BASE_PATTERN


@dataclass
class ModelConfig:
    """Ground-truth source: measurement file > mask file > circle list."""

    regions: tuple = DEMO_REGIONS
    sigma_c: float = 0.4
    sigma_h: float = 0.2
    mask_file: str = ""
    measurement_file: str = ""


@dataclass
class CollectionConfig:
    file: str = ""
    data_file: str = ""
    n: int = 10_000
    n_c_max: int = 8
    r_fraction: float = 0.3
    sigma_c: float = 0.4
    sigma_h: float = 0.2


@dataclass
class OptimizerConfig:
    method: str = "pg"
    eps_tol: float = 1e-9
    max_cost_evals: int = 50_000
    delta_p: float = 1e-3
    delta_zeta_rel: float = 1e-3
    n_s: int = 10
    n_max: int = 3


@dataclass
class RunConfig:
    mesh: MeshConfig = dataclass_field(default_factory=MeshConfig)
    electrodes: ElectrodeConfig = dataclass_field(default_factory=ElectrodeConfig)
    excitation: ExcitationConfig = dataclass_field(default_factory=ExcitationConfig)
    model: ModelConfig = dataclass_field(default_factory=ModelConfig)
    collection: CollectionConfig = dataclass_field(default_factory=CollectionConfig)
    optimizer: OptimizerConfig = dataclass_field(default_factory=OptimizerConfig)
    noise_level: float = 0.0
    seed: int = 0
    output_dir: str = "out"


def _floats(text):
    return tuple(float(tok) for tok in text.replace(",", " ").split())


# key -> (section attribute or None for top level, field, converter)
_KEYS = {
    "mesh.radius": ("mesh", "radius", float),
    "mesh.target_elements": ("mesh", "target_elements", int),
    "electrodes.m": ("electrodes", "m", int),
    "electrodes.half_width": ("electrodes", "half_width", float),
    "electrodes.impedance": ("electrodes", "impedance", float),
    "excitation.base_pattern": ("excitation", "base_pattern", _floats),
    "model.sigma_c": ("model", "sigma_c", float),
    "model.sigma_h": ("model", "sigma_h", float),
    "model.mask_file": ("model", "mask_file", str),
    "model.measurement_file": ("model", "measurement_file", str),
    "collection.file": ("collection", "file", str),
    "collection.data_file": ("collection", "data_file", str),
    "collection.n": ("collection", "n", int),
    "collection.n_c_max": ("collection", "n_c_max", int),
    "collection.r_fraction": ("collection", "r_fraction", float),
    "collection.sigma_c": ("collection", "sigma_c", float),
    "collection.sigma_h": ("collection", "sigma_h", float),
    "optimizer.method": ("optimizer", "method", str),
    "optimizer.eps_tol": ("optimizer", "eps_tol", float),
    "optimizer.max_cost_evals": ("optimizer", "max_cost_evals", int),
    "optimizer.delta_p": ("optimizer", "delta_p", float),
    "optimizer.delta_zeta_rel": ("optimizer", "delta_zeta_rel", float),
    "optimizer.n_s": ("optimizer", "n_s", int),
    "optimizer.n_max": ("optimizer", "n_max", int),
    "noise_level": (None, "noise_level", float),
    "seed": (None, "seed", int),
    "output_dir": (None, "output_dir", str),
}

_CIRCLE_KEY = re.compile(r"^model\.circle(\d+)$")


def parse_config(text):
    """Parse ``key = value`` lines into a :class:`RunConfig`.

    ``#`` starts a comment; blank lines are skipped.  Circles are given as
    ``model.circle1 = x y r`` and collect, sorted by index, into
    ``model.regions``.  Unknown keys are rejected.
    """
    cfg = RunConfig()
    circles = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        matched = _CIRCLE_KEY.match(key)
        if matched:
            try:
                triple = _floats(value)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: {key}: {exc}") from exc
            if len(triple) != 3:
                raise ConfigError(f"line {lineno}: {key} needs exactly x y r")
            circles[int(matched.group(1))] = triple
            continue
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        section, attr, convert = _KEYS[key]
        try:
            parsed = convert(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {key}: {exc}") from exc
        setattr(cfg if section is None else getattr(cfg, section), attr, parsed)
    if circles:
        cfg.model.regions = tuple(circles[i] for i in sorted(circles))
    return cfg


def validate_config(cfg):
    def need(condition, message):
        if not condition:
            raise ConfigError(message)

    need(cfg.mesh.radius > 0.0, "mesh.radius must be positive")
    need(cfg.mesh.target_elements >= 1, "mesh.target_elements must be positive")
    need(cfg.electrodes.m >= 2, "electrodes.m must be at least 2")
    need(cfg.electrodes.half_width > 0.0, "electrodes.half_width must be positive")
    need(cfg.electrodes.m * 2.0 * cfg.electrodes.half_width < 2.0 * math.pi,
         "electrodes overlap: m * 2 * half_width must stay below the full circle")
    need(cfg.electrodes.impedance > 0.0, "electrodes.impedance must be positive")
    pattern = cfg.excitation.base_pattern
    need(len(pattern) == cfg.electrodes.m,
         f"base pattern has {len(pattern)} entries for {cfg.electrodes.m} electrodes")
    scale = max(1.0, max(abs(v) for v in pattern))
    need(abs(sum(pattern)) <= 1e-12 * scale,
         f"base pattern must sum to zero, got {sum(pattern)!r}")
    need(cfg.noise_level >= 0.0, "noise_level must be non-negative")
    need(cfg.seed >= 0, "seed must be non-negative")
    for x, y, r in cfg.model.regions:
        need(r > 0.0, f"model circle at ({x!r}, {y!r}) needs a positive radius")
    need(cfg.model.sigma_c > 0.0, "model.sigma_c must be positive")
    need(cfg.model.sigma_h > 0.0, "model.sigma_h must be positive")
    need(cfg.collection.n >= 1, "collection.n must be positive")
    need(cfg.collection.n_c_max >= 1, "collection.n_c_max must be positive")
    need(0.0 < cfg.collection.r_fraction <= 1.0,
         "collection.r_fraction must lie in (0, 1]")
    need(cfg.collection.sigma_c > 0.0, "collection.sigma_c must be positive")
    need(cfg.collection.sigma_h > 0.0, "collection.sigma_h must be positive")
    need(cfg.optimizer.method in ("pg", "cd"),
         f"optimizer.method must be pg or cd, got {cfg.optimizer.method!r}")
    need(cfg.optimizer.eps_tol > 0.0, "optimizer.eps_tol must be positive")
    need(cfg.optimizer.max_cost_evals >= 1, "optimizer.max_cost_evals must be positive")
    need(cfg.optimizer.delta_p > 0.0, "optimizer.delta_p must be positive")
    need(cfg.optimizer.delta_zeta_rel > 0.0, "optimizer.delta_zeta_rel must be positive")
    need(cfg.optimizer.n_s >= 1, "optimizer.n_s must be positive")
    need(cfg.optimizer.n_max >= 1, "optimizer.n_max must be positive")
    return cfg


def serialize_config(cfg):
    """Render a configuration back to its file form (parse round-trips)."""
    lines = [
        f"mesh.radius = {cfg.mesh.radius!r}",
        f"mesh.target_elements = {cfg.mesh.target_elements}",
        f"electrodes.m = {cfg.electrodes.m}",
        f"electrodes.half_width = {cfg.electrodes.half_width!r}",
        f"electrodes.impedance = {cfg.electrodes.impedance!r}",
        "excitation.base_pattern = " + " ".join(repr(v) for v in cfg.excitation.base_pattern),
    ]
    for i, (x, y, r) in enumerate(cfg.model.regions, start=1):
        lines.append(f"model.circle{i} = {x!r} {y!r} {r!r}")
    lines += [
        f"model.sigma_c = {cfg.model.sigma_c!r}",
        f"model.sigma_h = {cfg.model.sigma_h!r}",
    ]
    if cfg.model.mask_file:
        lines.append(f"model.mask_file = {cfg.model.mask_file}")
    if cfg.model.measurement_file:
        lines.append(f"model.measurement_file = {cfg.model.measurement_file}")
    if cfg.collection.file:
        lines.append(f"collection.file = {cfg.collection.file}")
    if cfg.collection.data_file:
        lines.append(f"collection.data_file = {cfg.collection.data_file}")
    lines += [
        f"collection.n = {cfg.collection.n}",
        f"collection.n_c_max = {cfg.collection.n_c_max}",
        f"collection.r_fraction = {cfg.collection.r_fraction!r}",
        f"collection.sigma_c = {cfg.collection.sigma_c!r}",
        f"collection.sigma_h = {cfg.collection.sigma_h!r}",
        f"optimizer.method = {cfg.optimizer.method}",
        f"optimizer.eps_tol = {cfg.optimizer.eps_tol!r}",
        f"optimizer.max_cost_evals = {cfg.optimizer.max_cost_evals}",
        f"optimizer.delta_p = {cfg.optimizer.delta_p!r}",
        f"optimizer.delta_zeta_rel = {cfg.optimizer.delta_zeta_rel!r}",
        f"optimizer.n_s = {cfg.optimizer.n_s}",
        f"optimizer.n_max = {cfg.optimizer.n_max}",
        f"noise_level = {cfg.noise_level!r}",
        f"seed = {cfg.seed}",
        f"output_dir = {cfg.output_dir}",
    ]
    return "\n".join(lines) + "\n"


def load_config(path):
    with open(path) as fh:
        text = fh.read()
    return validate_config(parse_config(text))


# ---------------------------------------------------------------------------
# commands


def _build_setup(cfg):
    mesh = build_disc_mesh(cfg.mesh.radius, cfg.mesh.target_elements)
    layout = place_electrodes(mesh, cfg.electrodes.m, cfg.electrodes.half_width,
                              cfg.electrodes.impedance)
    scheme = ExcitationScheme(np.asarray(cfg.excitation.base_pattern, dtype=float))
    return mesh, layout, scheme


def cmd_gen_samples(cfg, out_dir, threads=1):
    os.makedirs(out_dir, exist_ok=True)
    mesh, layout, scheme = _build_setup(cfg)
    rng = seed_streams(cfg.seed)["collection"]
    started = time.perf_counter()
    collection = resolve_collection(cfg, mesh, layout, scheme, rng,
                                    threads=threads, out_dir=out_dir)
    wall = time.perf_counter() - started
    print(f"{len(collection)} samples -> {out_dir} in {wall:.1f} s")
    return 0


def cmd_reconstruct(cfg, out_dir, threads=1):
    result = run_pipeline(cfg, out_dir, threads=threads)
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write(serialize_config(cfg))
    line = (f"final cost {result.coarse.cost:.6e} "
            f"after {result.cost_evals} cost evaluations")
    if result.sigma_true is not None:
        errs = [row.l2_err for row in result.trace.rows if row.l2_err is not None]
        line += f", l2 error {errs[-1]:.6e}"
    print(line + f" -> {out_dir}")
    return 0


def cmd_kappa(cfg, out_dir, family, self_test=False, threads=1):
    """Probe one control block's gradient over eps in 10^0 .. 10^-12.

    The state is a generic blend: the first N_s collection samples under
    uniform weights.  Ranking would hand us a near-stationary point whose
    directional slopes are too small to dominate the quotient; a derivative
    check wants a state where the first-order term still carries the cost.
    The threshold-split control is probed along its region values only,
    where the cost is differentiable.
    """
    os.makedirs(out_dir, exist_ok=True)
    mesh, layout, scheme = _build_setup(cfg)
    streams = seed_streams(cfg.seed)
    _, d_star = resolve_targets(cfg, mesh, layout, scheme, streams["noise"])
    collection = resolve_collection(cfg, mesh, layout, scheme, streams["collection"],
                                    threads=threads)
    n_s = cfg.optimizer.n_s
    control = FineControl(samples=collection.samples[:n_s],
                          weights=np.full(n_s, 1.0 / n_s),
                          sigma_pair=collection.sigma_pair)
    evaluator = CostEvaluator(CemSystem(mesh, layout), scheme, d_star)
    rng = streams["directions"]

    if family == "alpha":
        fields = sample_field_matrix(mesh, control.samples, *control.sigma_pair)
        x0 = control.weights.copy()
        res = evaluator.evaluate(fields.T @ x0)
        g_sigma = spatial_gradient(mesh, res.potentials, evaluator.adjoint_potentials(res))
        gradient = grad_alpha(fields, g_sigma)

        def cost_at(a):
            return evaluator.evaluate(fields.T @ a).cost

        # zero-sum keeps the weights on their plane; the sup-norm cap keeps
        # them positive over the whole sweep from the uniform start
        direction = rng.standard_normal(x0.size)
        direction -= direction.mean()
        scale = float(np.max(np.abs(direction)))
        if scale == 0.0:
            raise DegenerateDirectionError(
                "no zero-sum probe direction exists for a single weight")
        direction /= scale * 4.0 * x0.size
    elif family == "P":
        n_p = 3 * sum(control.circle_counts)
        x0 = control.to_vector()[:n_p]
        res = evaluator.evaluate(control.field(mesh))
        g_sigma = spatial_gradient(mesh, res.potentials, evaluator.adjoint_potentials(res))
        gradient = grad_p(mesh, control, *control.sigma_pair, g_sigma,
                          cfg.optimizer.delta_p)

        def cost_at(p):
            trial = control.from_vector(np.concatenate([p, control.weights]))
            return evaluator.evaluate(trial.field(mesh)).cost

        # grow every circle in proportion to its size: center moves and
        # shrinks would mix slope signs and cancel the denominator, and a
        # pure growth never drives a radius negative anywhere in the sweep
        radius = slice(2, None, 3)
        direction = np.zeros_like(x0)
        direction[radius] = x0[radius]
        direction *= P_PROBE_SCALE / np.max(direction[radius])
    elif family == "zeta":
        sigma_hat = control.field(mesh)
        n_max = cfg.optimizer.n_max
        s_ini = 0.5 * (float(sigma_hat.min()) + float(sigma_hat.max()))
        provisional = np.concatenate([[s_ini], np.full(n_max, s_ini), np.full(n_max, s_ini)])
        part = partition_field(mesh, sigma_hat, provisional, n_max)
        x0 = init_zeta(mesh, sigma_hat, part)
        res = evaluator.evaluate(coarse_field(part, x0))
        g_sigma = spatial_gradient(mesh, res.potentials, evaluator.adjoint_potentials(res))
        gradient = np.zeros_like(x0)
        for n in range(n_max + 1):
            gradient[n] = g_sigma[part.labels == n].sum()

        def cost_at(z):
            return evaluator.evaluate(coarse_field(part, z)).cost

        # values only: the cost is piecewise constant in the thresholds, so
        # a threshold component would make the quotient meaningless
        direction = np.zeros_like(x0)
        bump = rng.standard_normal(n_max + 1)
        bump /= np.max(np.abs(bump))
        direction[:n_max + 1] = 0.25 * float(x0[:n_max + 1].min()) * bump
    else:
        raise ConfigError(f"unknown control family {family!r}")

    if self_test:
        gradient = 2.0 * gradient
    report = kappa_test(cost_at, x0, gradient, direction, np.logspace(0.0, -12.0, 13))
    path = os.path.join(out_dir, f"kappa_{family}.csv")
    report.save_csv(path)

    target = 0.5 if self_test else 1.0
    tol = 1e-2 if family == "P" else 1e-4
    best = run = 0
    for k in report.kappa:
        run = run + 1 if abs(k - target) < tol else 0
        best = max(best, run)
    print(f"kappa[{family}] -> {path}: {best} consecutive decades "
          f"with |kappa - {target}| < {tol:g}")
    return 0


def cmd_render(field_path, mesh_path, out_path, size=256):
    mesh = load_mesh(mesh_path)
    values = np.loadtxt(field_path, dtype=float, ndmin=1)
    n_elements = mesh.centroids.shape[0]
    if values.ndim != 1 or values.size != n_elements:
        raise ValueError(f"{field_path}: expected {n_elements} per-element values, "
                         f"got shape {values.shape}")
    if size < 1:
        raise ValueError(f"image size must be positive, got {size}")

    axis = (np.arange(size) + 0.5) / size * (2.0 * mesh.radius) - mesh.radius
    grid_x, grid_y = np.meshgrid(axis, axis[::-1])
    points = np.column_stack([grid_x.ravel(), grid_y.ravel()])
    inside = np.hypot(points[:, 0], points[:, 1]) <= mesh.radius
    _, nearest = cKDTree(mesh.centroids).query(points[inside])

    # field grays span 0..250; 255 marks pixels outside the disc
    vmin, vmax = float(values.min()), float(values.max())
    if vmax > vmin:
        grays = np.rint((values - vmin) / (vmax - vmin) * 250.0).astype(int)
    else:
        grays = np.full(values.size, 125, dtype=int)
    pixels = np.full(size * size, 255, dtype=int)
    pixels[inside] = grays[nearest]

    with open(out_path, "w") as fh:
        fh.write(f"P2\n{size} {size}\n255\n")
        fh.write("\n".join(str(v) for v in pixels))
        fh.write("\n")
    legend_path = out_path + ".legend.txt"
    with open(legend_path, "w") as fh:
        fh.write(f"gray 0 = {vmin!r}\ngray 250 = {vmax!r}\ngray 255 = outside\n")
    print(f"wrote {out_path} ({size}x{size}) and {legend_path}")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing


def _thread_count(args):
    if args.threads is not None:
        count = args.threads
    else:
        raw = os.environ.get("EITRECON_THREADS", "1")
        try:
            count = int(raw)
        except ValueError as exc:
            raise ConfigError(f"EITRECON_THREADS={raw!r} is not an integer") from exc
    if count < 1:
        raise ConfigError(f"thread count must be positive, got {count}")
    return count


def _prepare(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        validate_config(cfg)
    if args.output is not None:
        cfg.output_dir = args.output
    return cfg, _thread_count(args)


def _run_gen_samples(args):
    cfg, threads = _prepare(args)
    return cmd_gen_samples(cfg, cfg.output_dir, threads=threads)


def _run_reconstruct(args):
    cfg, threads = _prepare(args)
    return cmd_reconstruct(cfg, cfg.output_dir, threads=threads)


def _run_kappa(args):
    cfg, threads = _prepare(args)
    return cmd_kappa(cfg, cfg.output_dir, args.family,
                     self_test=args.self_test, threads=threads)


def _run_render(args):
    return cmd_render(args.field, args.mesh, args.out, size=args.size)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="eitrecon",
        description="Binary conductivity reconstruction from electrode currents.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run configuration file")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--output", default=None, help="override the config output directory")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads for sample simulation "
                             "(default: EITRECON_THREADS or 1)")

    p = sub.add_parser("gen-samples", parents=[common],
                       help="draw and simulate a sample collection")
    p.set_defaults(func=_run_gen_samples)

    p = sub.add_parser("reconstruct", parents=[common],
                       help="run the three-stage reconstruction")
    p.set_defaults(func=_run_reconstruct)

    p = sub.add_parser("kappa", parents=[common],
                       help="gradient-consistency sweep for one control block")
    p.add_argument("--family", required=True, choices=("alpha", "P", "zeta"),
                   help="control block to probe")
    p.add_argument("--self-test", action="store_true",
                   help="double the gradient; the sweep must plateau at 0.5")
    p.set_defaults(func=_run_kappa)

    p = sub.add_parser("render", help="raster a per-element field to a text graymap")
    p.add_argument("field", help="per-element values, one per line")
    p.add_argument("mesh", help="mesh file the field lives on")
    p.add_argument("out", help="output image path (plain text graymap)")
    p.add_argument("--size", type=int, default=256, help="image side length in pixels")
    p.set_defaults(func=_run_render)
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except DegenerateDirectionError as err:
        print(f"degenerate direction: {err}", file=sys.stderr)
        return 5
    except fem.SolverError as err:
        print(f"solver failure: {err}", file=sys.stderr)
        return 4
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
