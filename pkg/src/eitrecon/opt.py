"""Sample ranking, the two-stage optimizer, and the full reconstruction driver.

The reconstruction runs in three stages sharing one cost-evaluation
counter:

* rank a precomputed sample collection against the measured currents and
  keep the best few as a basis,
* optimize the basis blend (weights on the simplex, circle parameters in
  their boxes) by projected gradient descent with a backtracking line
  search (a coordinate-descent baseline is available for comparison),
* snap the blended field to few values: partition it into regions by
  thresholding, then optimize the region values and thresholds.

Every simulated measurement paired with a cost computation increments the
shared counter, so reported evaluation counts can be audited.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field as dataclass_field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from . import fem
from .fem import CemSystem, ExcitationScheme, add_noise, load_measurements, save_measurements
from .field import (
    SampleCollection,
    SampleParam,
    l2_error,
    load_collection,
    load_mask_field,
    make_true_model,
    rasterize_sample,
    sample_field_matrix,
    sample_random,
    save_collection,
)
from .geometry import build_disc_mesh, place_electrodes, save_mesh
from .grad import grad_alpha, grad_p, grad_zeta, spatial_gradient


# ---------------------------------------------------------------------------
# bookkeeping


@dataclass
class TraceRow:
    iteration: int
    phase: str
    cost: float
    cost_evals: int
    l2_err: float | None = None


@dataclass
class RunTrace:
    """Per-iteration history: cost, cumulative evaluation count, field error."""

    rows: list = dataclass_field(default_factory=list)

    def add(self, iteration, phase, cost, cost_evals, l2_err=None):
        self.rows.append(TraceRow(iteration, phase, float(cost), int(cost_evals), l2_err))

    def extend(self, other):
        self.rows.extend(other.rows)

    def costs(self, phase=None):
        return [r.cost for r in self.rows if phase is None or r.phase == phase]

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iter,phase,cost,cost_evals,l2_error\n")
            for r in self.rows:
                err = "" if r.l2_err is None else f"{r.l2_err:.17g}"
                fh.write(f"{r.iteration},{r.phase},{r.cost:.17g},{r.cost_evals},{err}\n")


@dataclass
class EvalResult:
    cost: float
    currents: np.ndarray
    potentials: np.ndarray
    factor: object


class CostEvaluator:
    """Simulate-and-compare against fixed target currents, counting every use."""

    def __init__(self, system, scheme, d_star):
        self.system = system
        self.scheme = scheme
        self.d_star = np.asarray(d_star, dtype=float)
        self.evals = 0

    def evaluate(self, sigma):
        potentials, currents, factor = self.system.run_scheme(sigma, self.scheme)
        self.evals += 1
        return EvalResult(fem.cost(currents, self.d_star), currents, potentials, factor)

    def cost_of_data(self, measurements):
        """Cost of already-simulated currents (used by the ranking stage)."""
        self.evals += 1
        return fem.cost(measurements, self.d_star)

    def adjoint_potentials(self, result):
        """Adjoint solves reusing the forward factorization; not counted."""
        weights = fem.residual_weights(result.currents, self.d_star)
        m = self.scheme.m
        psi = np.empty_like(result.potentials)
        for k in range(m):
            psi[:, k] = result.factor.solve(self.system.adjoint_rhs(weights[k]))
        return psi


def converged(prev_cost, new_cost, tol):
    """Relative-decrease termination rule; an exact zero always terminates."""
    if new_cost == 0.0:
        return True
    return abs(prev_cost - new_cost) / abs(new_cost) < tol


def zero_cost_floor(d_star):
    """Cost below this is a perfect fit at working precision."""
    energy = float(np.sum(np.asarray(d_star, dtype=float) ** 2))
    return 1e-18 * (energy if energy > 0.0 else 1.0)


def seed_streams(seed):
    """Independent named generators derived from the one run seed."""
    children = np.random.SeedSequence(seed).spawn(3)
    names = ("collection", "noise", "directions")
    return {name: np.random.default_rng(ss) for name, ss in zip(names, children)}


@contextmanager
def _phase(name):
    """Prefix solver failures with the pipeline phase they came from."""
    try:
        yield
    except fem.SolverError as err:
        raise fem.SolverError(f"{name}: {err}") from err


# ---------------------------------------------------------------------------
# stage 0/1: collection and ranking


def precompute_collection(mesh, layout, scheme, n, rng, n_c_max=8, r_max_fraction=0.3,
                          sigma_pair=(0.4, 0.2), threads=1,
                          samples_path=None, data_path=None):
    """Draw n random samples and simulate each one's electrode currents.

    Samples are drawn sequentially from ``rng`` (deterministic for a fixed
    generator state); the simulations are independent and may run on a
    thread pool.  When paths are given the collection is persisted.
    """
    if n < 1:
        raise ValueError(f"collection size must be positive, got {n}")
    samples = [sample_random(rng, mesh.radius, n_c_max, r_max_fraction) for _ in range(n)]
    system = CemSystem(mesh, layout)

    def currents_of(sample):
        sigma = rasterize_sample(mesh, sample, *sigma_pair)
        return system.run_scheme(sigma, scheme)[1]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            data = list(pool.map(currents_of, samples))
    else:
        data = [currents_of(s) for s in samples]
    collection = SampleCollection(samples=samples, sigma_pair=tuple(sigma_pair), data=data)
    if samples_path is not None:
        save_collection(collection, samples_path, data_path)
    return collection


@dataclass
class CircleBounds:
    """Admissible intervals for circle parameters on a disc domain."""

    r_min: float
    r_max: float
    domain_radius: float


@dataclass
class FineControl:
    """Basis samples with blend weights; the fine-stage optimization state."""

    samples: list
    weights: np.ndarray
    sigma_pair: tuple
    bounds: CircleBounds | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.samples) != self.weights.size:
            raise ValueError("one weight per sample is required")

    @property
    def n_samples(self):
        return len(self.samples)

    @property
    def circle_counts(self):
        return [s.circles.shape[0] for s in self.samples]

    def to_vector(self):
        """Flatten to [all circle (x, y, r) triples, then weights]."""
        parts = [s.circles.ravel() for s in self.samples] + [self.weights]
        return np.concatenate(parts)

    def from_vector(self, z):
        z = np.asarray(z, dtype=float)
        counts = self.circle_counts
        n_p = 3 * sum(counts)
        samples = []
        offset = 0
        for c in counts:
            samples.append(SampleParam(z[offset:offset + 3 * c].reshape(c, 3).copy()))
            offset += 3 * c
        return replace(self, samples=samples, weights=z[n_p:].copy())

    def field(self, mesh):
        matrix = sample_field_matrix(mesh, self.samples, *self.sigma_pair)
        return matrix.T @ self.weights


def rank_and_select(collection, d_star, n_s, counter=None):
    """Order samples by misfit against the target currents; keep the best n_s.

    Ties break toward the earlier sample.  The returned control starts at
    uniform weights.  ``counter`` (a :class:`CostEvaluator`) records the
    ranking's cost computations when provided.
    """
    if collection.data is None:
        raise ValueError("collection carries no simulated currents; run the precompute stage")
    n = len(collection)
    if not 1 <= n_s <= n:
        raise ValueError(f"basis size {n_s} out of range 1..{n}")
    d_star = np.asarray(d_star, dtype=float)
    if counter is not None:
        costs = np.array([counter.cost_of_data(d) for d in collection.data])
    else:
        costs = np.array([fem.cost(d, d_star) for d in collection.data])
    order = np.argsort(costs, kind="stable")
    basis = [collection.samples[i] for i in order[:n_s]]
    return FineControl(
        samples=basis,
        weights=np.full(n_s, 1.0 / n_s),
        sigma_pair=collection.sigma_pair,
    )


# ---------------------------------------------------------------------------
# fine stage: projected gradient on (circle parameters, weights)


def project_simplex(v):
    """Euclidean projection onto the probability simplex (sort method)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    rho = np.nonzero(u + (1.0 - css) / np.arange(1, v.size + 1) > 0.0)[0][-1]
    lam = (1.0 - css[rho]) / (rho + 1.0)
    return np.maximum(v + lam, 0.0)


@dataclass
class OptimizeSettings:
    """Shared knobs for both optimization stages."""

    method: str = "pg"              # "pg" or "cd"
    eps_tol: float = 1e-9
    max_cost_evals: int = 50_000
    delta_p: float = 1e-3
    delta_zeta_rel: float = 1e-3
    r_min_fraction: float = 1e-3
    r_max_fraction: float = 1.0
    n_s: int = 10
    n_max: int = 3
    step0: float = 0.05
    armijo: float = 1e-4
    max_backtracks: int = 40
    max_iterations: int = 10_000
    golden_tol: float = 0.02


@dataclass
class FineResult:
    control: FineControl
    sigma: np.ndarray
    trace: RunTrace
    stalled: bool
    cost: float


def _project_circles(flat, counts, bounds):
    """Clip radii to their box, then pull centers inside the reach disc."""
    out = flat.copy()
    offset = 0
    for c in counts:
        block = out[offset:offset + 3 * c].reshape(c, 3)
        block[:, 2] = np.clip(block[:, 2], bounds.r_min, bounds.r_max)
        reach = (bounds.domain_radius + block[:, 2]) * (1.0 - 1e-9)
        norm = np.hypot(block[:, 0], block[:, 1])
        shrink = norm > reach
        if np.any(shrink):
            scale = reach[shrink] / norm[shrink]
            block[shrink, 0] *= scale
            block[shrink, 1] *= scale
        offset += 3 * c
    return out


def _fine_project(z, counts, bounds):
    n_p = 3 * sum(counts)
    out = z.copy()
    out[:n_p] = _project_circles(z[:n_p], counts, bounds)
    out[n_p:] = project_simplex(z[n_p:])
    return out


def _fine_sigma(mesh, control, z):
    trial = control.from_vector(z)
    return trial.field(mesh), trial


def optimize_fine(mesh, layout, scheme, control0, d_star, settings,
                  sigma_true=None, evaluator=None):
    """Optimize the blend control against the target currents.

    Projected gradient with a backtracking (Armijo) line search by
    default; ``settings.method = "cd"`` switches to the coordinate-descent
    baseline.  Stops on the relative-decrease tolerance, the evaluation
    budget, or when no descent step can be found (stall).
    """
    if evaluator is None:
        evaluator = CostEvaluator(CemSystem(mesh, layout), scheme, d_star)
    if settings.method == "cd":
        return _optimize_fine_cd(mesh, control0, settings, sigma_true, evaluator)
    if settings.method != "pg":
        raise ValueError(f"unknown optimizer method {settings.method!r}")

    bounds = control0.bounds or CircleBounds(
        r_min=settings.r_min_fraction * mesh.radius,
        r_max=settings.r_max_fraction * mesh.radius,
        domain_radius=mesh.radius,
    )
    control0 = replace(control0, bounds=bounds)
    counts = control0.circle_counts
    n_p = 3 * sum(counts)
    floor = zero_cost_floor(d_star)
    trace = RunTrace()

    z = _fine_project(control0.to_vector(), counts, bounds)
    sigma, control = _fine_sigma(mesh, control0, z)
    res = evaluator.evaluate(sigma)
    trace.add(0, "step2", res.cost, evaluator.evals,
              None if sigma_true is None else l2_error(mesh, sigma, sigma_true))

    stalled = False
    step = settings.step0
    for it in range(1, settings.max_iterations + 1):
        if res.cost <= floor or evaluator.evals >= settings.max_cost_evals:
            break
        psi = evaluator.adjoint_potentials(res)
        g = spatial_gradient(mesh, res.potentials, psi)
        fields = sample_field_matrix(mesh, control.samples, *control.sigma_pair)
        g_alpha = grad_alpha(fields, g)
        g_p = grad_p(mesh, control, *control.sigma_pair, g, settings.delta_p)
        gradient = np.concatenate([g_p, g_alpha])

        # one scalar step moves circles by up to step * R and weights by up
        # to step; each block is normalized to its own sup-norm first
        direction = np.zeros_like(z)
        s_p = np.max(np.abs(g_p)) if n_p else 0.0
        if s_p > 0.0:
            direction[:n_p] = g_p / s_p * mesh.radius
        s_a = np.max(np.abs(g_alpha))
        if s_a > 0.0:
            direction[n_p:] = g_alpha / s_a
        if s_p == 0.0 and s_a == 0.0:
            break

        accepted = False
        for _ in range(settings.max_backtracks):
            if evaluator.evals >= settings.max_cost_evals:
                break
            z_trial = _fine_project(z - step * direction, counts, bounds)
            move = z_trial - z
            if not np.any(move):
                step *= 0.5
                continue
            sigma_trial, control_trial = _fine_sigma(mesh, control, z_trial)
            res_trial = evaluator.evaluate(sigma_trial)
            if res_trial.cost <= res.cost + settings.armijo * float(gradient @ move):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if evaluator.evals < settings.max_cost_evals:
                stalled = True
            break

        prev_cost = res.cost
        z, sigma, control, res = z_trial, sigma_trial, control_trial, res_trial
        step *= 2.0
        trace.add(it, "step2", res.cost, evaluator.evals,
                  None if sigma_true is None else l2_error(mesh, sigma, sigma_true))
        if converged(prev_cost, res.cost, settings.eps_tol) or res.cost <= floor:
            break

    return FineResult(control=control, sigma=sigma, trace=trace,
                      stalled=stalled, cost=res.cost)


def _golden_min(f, lo, hi, tol, stop):
    """Golden-section search on [lo, hi]; returns (x_best, f_best).

    Every f call is a counted cost evaluation; ``stop`` cuts the search
    when the shared budget runs out.
    """
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    if stop():
        return None
    fc = f(c)
    if stop():
        return (c, fc)
    fd = f(d)
    best = (c, fc) if fc <= fd else (d, fd)
    while b - a > tol:
        if stop():
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
            if fc < best[1]:
                best = (c, fc)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
            if fd < best[1]:
                best = (d, fd)
    return best


def _optimize_fine_cd(mesh, control0, settings, sigma_true, evaluator):
    """Coordinate-descent baseline: one control at a time, golden-section.

    Cycles weights first, then every circle parameter sample by sample.
    After each weight update the other weights rescale proportionally so
    the simplex constraint is kept exactly.
    """
    bounds = control0.bounds or CircleBounds(
        r_min=settings.r_min_fraction * mesh.radius,
        r_max=settings.r_max_fraction * mesh.radius,
        domain_radius=mesh.radius,
    )
    control0 = replace(control0, bounds=bounds)
    counts = control0.circle_counts
    n_p = 3 * sum(counts)
    n_s = control0.n_samples
    floor = zero_cost_floor(evaluator.d_star)
    trace = RunTrace()

    z = _fine_project(control0.to_vector(), counts, bounds)
    sigma, control = _fine_sigma(mesh, control0, z)
    res = evaluator.evaluate(sigma)
    trace.add(0, "step2", res.cost, evaluator.evals,
              None if sigma_true is None else l2_error(mesh, sigma, sigma_true))
    best_cost = res.cost

    def out_of_budget():
        return evaluator.evals >= settings.max_cost_evals

    def weight_vector(i, t):
        w = z[n_p:].copy()
        rest = 1.0 - w[i]
        w[i] = t
        others = np.arange(n_s) != i
        if rest > 1e-15:
            w[others] *= (1.0 - t) / rest
        else:
            w[others] = (1.0 - t) / max(n_s - 1, 1)
        return w

    stalled = False
    for cycle in range(1, settings.max_iterations + 1):
        if out_of_budget() or best_cost <= floor:
            break
        cycle_start = best_cost
        for i in range(n_s):
            if out_of_budget():
                break

            def f_alpha(t):
                zt = z.copy()
                zt[n_p:] = weight_vector(i, t)
                return evaluator.evaluate(_fine_sigma(mesh, control, zt)[0]).cost

            found = _golden_min(f_alpha, 0.0, 1.0, settings.golden_tol, out_of_budget)
            if found and found[1] < best_cost:
                z[n_p:] = weight_vector(i, found[0])
                best_cost = found[1]
        for j in range(n_p):
            if out_of_budget():
                break
            circle = j // 3
            param = j % 3
            base = 3 * circle
            if param == 2:
                center_norm = math.hypot(z[base], z[base + 1])
                lo = max(bounds.r_min, center_norm - bounds.domain_radius + 1e-12)
                hi = bounds.r_max
            else:
                other = z[base + 1 - param] if param in (0, 1) else 0.0
                reach = bounds.domain_radius + z[base + 2]
                half = math.sqrt(max(reach * reach - other * other, 0.0)) * (1.0 - 1e-9)
                lo, hi = -half, half
            if hi <= lo:
                continue

            def f_param(t):
                zt = z.copy()
                zt[j] = t
                return evaluator.evaluate(_fine_sigma(mesh, control, zt)[0]).cost

            found = _golden_min(f_param, lo, hi, settings.golden_tol * (hi - lo), out_of_budget)
            if found and found[1] < best_cost:
                z[j] = found[0]
                best_cost = found[1]

        sigma, control = _fine_sigma(mesh, control, z)
        trace.add(cycle, "step2", best_cost, evaluator.evals,
                  None if sigma_true is None else l2_error(mesh, sigma, sigma_true))
        if best_cost >= cycle_start and not out_of_budget():
            stalled = True
            break
        if converged(cycle_start, best_cost, settings.eps_tol):
            break

    sigma, control = _fine_sigma(mesh, control, z)
    return FineResult(control=control, sigma=sigma, trace=trace,
                      stalled=stalled, cost=best_cost)


# ---------------------------------------------------------------------------
# coarse stage: region partition and value/threshold optimization


@dataclass
class PartitionMap:
    """Element labels: 0 is background, 1..n_max are anomaly regions."""

    labels: np.ndarray
    n_max: int

    def region_mask(self, n):
        return self.labels == n

    def region_areas(self, mesh):
        return np.array([
            mesh.element_areas[self.labels == n].sum() for n in range(self.n_max + 1)
        ])


def _element_components(mesh, mask):
    """Connected-component ids over masked elements, shared-edge adjacency."""
    pairs = mesh.element_adjacency()
    keep = mask[pairs[:, 0]] & mask[pairs[:, 1]]
    sub = pairs[keep]
    n = mesh.n_elements
    graph = sp.coo_matrix(
        (np.ones(len(sub)), (sub[:, 0], sub[:, 1])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    return comp


def partition_field(mesh, sigma, zeta, n_max, prev=None):
    """Split super-threshold elements into labeled connected regions.

    First call (no previous map): all thresholds coincide, and the n_max
    largest connected components of the super-threshold set (shared-edge
    adjacency) get labels 1..n_max by descending area.

    Later calls: each live region keeps its label and its support becomes
    the connected component of its own threshold's super-level set that
    overlaps its previous support most (by area).  Lower labels win
    contested elements; a region whose level set no longer touches its
    previous support dies.  Re-partitioning at unchanged zeta reproduces
    the map exactly, so line-search baselines stay consistent.
    """
    sigma = np.asarray(sigma, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    if sigma.shape != (mesh.n_elements,):
        raise ValueError("field length does not match the mesh")
    if zeta.shape != (2 * n_max + 1,):
        raise ValueError(f"zeta must have length {2 * n_max + 1}")
    thresholds = zeta[n_max + 1:]
    labels = np.zeros(mesh.n_elements, dtype=np.int64)

    if prev is None:
        passing = sigma >= thresholds.min()
        if not passing.any():
            warnings.warn("no element passes its threshold; partition is all background")
            return PartitionMap(labels=labels, n_max=n_max)
        comp = _element_components(mesh, passing)
        comp_ids, first_index = np.unique(comp[passing], return_index=True)
        areas = np.array([
            mesh.element_areas[passing & (comp == cid)].sum() for cid in comp_ids])
        # ties break toward the component appearing first in element order
        order = np.lexsort((first_index, -areas))[:n_max]
        for rank, idx in enumerate(order):
            labels[passing & (comp == comp_ids[idx])] = rank + 1
        return PartitionMap(labels=labels, n_max=n_max)

    for n in range(1, n_max + 1):
        prev_mask = prev.labels == n
        if not prev_mask.any():
            continue
        level_set = sigma >= thresholds[n - 1]
        seeds = level_set & prev_mask
        if not seeds.any():
            continue
        comp = _element_components(mesh, level_set)
        cand_ids = np.unique(comp[seeds])
        overlaps = np.array([
            mesh.element_areas[seeds & (comp == cid)].sum() for cid in cand_ids])
        best = cand_ids[np.argmax(overlaps)]
        support = level_set & (comp == best) & (labels == 0)
        labels[support] = n
    if not labels.any():
        warnings.warn("no element passes its threshold; partition is all background")
    return PartitionMap(labels=labels, n_max=n_max)


def init_zeta(mesh, sigma, partition):
    """Initial coarse control from a fine field and its partition.

    Thresholds start at the field midpoint; the background value is the
    mean below threshold, each region value the mean over its elements.
    """
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (mesh.n_elements,):
        raise ValueError("field length does not match the mesh")
    n_max = partition.n_max
    s_min, s_max = float(sigma.min()), float(sigma.max())
    s_ini = 0.5 * (s_min + s_max)
    if s_max - s_min <= 1e-12 * max(abs(s_max), 1.0):
        warnings.warn("uniform field: coarse control initialized degenerate")
        return np.concatenate([
            [s_ini * (1.0 - 1e-6)], np.full(n_max, s_ini * (1.0 + 1e-6)),
            np.full(n_max, s_ini),
        ])
    below = sigma < s_ini
    low = float(sigma[below].mean()) if below.any() else s_min
    highs = np.empty(n_max)
    fallback = float(sigma[~below].mean()) if (~below).any() else s_ini
    for n in range(1, n_max + 1):
        mask = partition.labels == n
        if mask.any():
            highs[n - 1] = float(sigma[mask].mean())
        else:
            warnings.warn(f"region {n} is empty; its value defaults to the upper mean")
            highs[n - 1] = fallback
    return np.concatenate([[low], highs, np.full(n_max, s_ini)])


def coarse_field(partition, zeta):
    """Element field taking value zeta[label] (background label indexes zeta[0])."""
    zeta = np.asarray(zeta, dtype=float)
    return zeta[partition.labels]


@dataclass
class CoarseResult:
    sigma: np.ndarray
    zeta: np.ndarray
    partition: PartitionMap
    trace: RunTrace
    stalled: bool
    cost: float


def _coarse_project(zeta, n_max, threshold_bounds):
    out = np.asarray(zeta, dtype=float).copy()
    lo, hi = threshold_bounds
    span = max(hi - lo, 0.0)
    gap = 1e-9 * max(span, abs(hi), 1e-30)
    out[1:n_max + 1] = np.maximum(out[1:n_max + 1], 2.0 * gap)
    out[0] = min(max(out[0], gap), out[1:n_max + 1].min() - gap)
    if span > 0.0:
        out[n_max + 1:] = np.clip(out[n_max + 1:], lo + gap, hi - gap)
    return out


def optimize_coarse(mesh, layout, scheme, sigma_hat, d_star, settings,
                    sigma_true=None, evaluator=None):
    """Snap a fine field to one background and up to n_max region values.

    The fine field stays fixed as the partition reference; each iteration
    re-partitions with the current thresholds (labels matched to the
    previous regions by area overlap), takes a projected gradient step on
    the coarse control, and accepts it under the Armijo rule.
    """
    if evaluator is None:
        evaluator = CostEvaluator(CemSystem(mesh, layout), scheme, d_star)
    sigma_hat = np.asarray(sigma_hat, dtype=float)
    n_max = settings.n_max
    s_min, s_max = float(sigma_hat.min()), float(sigma_hat.max())
    thr_bounds = (s_min, s_max)
    delta_zeta = settings.delta_zeta_rel * max(s_max - s_min, 1e-12 * max(abs(s_max), 1.0))
    floor = zero_cost_floor(evaluator.d_star)

    s_ini = 0.5 * (s_min + s_max)
    provisional = np.concatenate([[s_ini], np.full(n_max, s_ini), np.full(n_max, s_ini)])
    part = partition_field(mesh, sigma_hat, provisional, n_max)
    zeta = init_zeta(mesh, sigma_hat, part)

    trace = RunTrace()
    res = evaluator.evaluate(coarse_field(part, zeta))
    trace.add(0, "step3", res.cost, evaluator.evals,
              None if sigma_true is None else l2_error(mesh, coarse_field(part, zeta), sigma_true))

    # the exact value gradients live on a smooth landscape while threshold
    # moves flip whole element sets at once; a joint step lets the values'
    # curvature veto every productive threshold move, so each iteration
    # takes one projected step per block with its own step memory
    stalled = False
    step_scale = max(s_max - s_min, 1e-12)
    steps = {"values": settings.step0 * step_scale,
             "thresholds": settings.step0 * step_scale}

    def try_block(block, gz):
        nonlocal zeta, part, res
        direction = np.zeros_like(gz)
        if block == "values":
            scale = np.max(np.abs(gz[:n_max + 1]))
            if scale == 0.0:
                return False
            direction[:n_max + 1] = gz[:n_max + 1] / scale
        else:
            scale = np.max(np.abs(gz[n_max + 1:]))
            if scale == 0.0:
                return False
            direction[n_max + 1:] = gz[n_max + 1:] / scale
        live = np.unique(part.labels[part.labels > 0]).size
        step = steps[block]
        for _ in range(settings.max_backtracks):
            if evaluator.evals >= settings.max_cost_evals:
                return False
            zeta_trial = _coarse_project(zeta - step * direction, n_max, thr_bounds)
            move = zeta_trial - zeta
            if not np.any(move):
                step *= 0.5
                continue
            part_trial = partition_field(mesh, sigma_hat, zeta_trial, n_max, prev=part)
            # the output must keep one value per live region: a move that
            # kills or merges a region leaves the feasible set
            if np.unique(part_trial.labels[part_trial.labels > 0]).size != live:
                step *= 0.5
                continue
            res_trial = evaluator.evaluate(coarse_field(part_trial, zeta_trial))
            if res_trial.cost <= res.cost + settings.armijo * float(gz @ move):
                zeta, part, res = zeta_trial, part_trial, res_trial
                steps[block] = step * 2.0
                return True
            step *= 0.5
        return False

    for it in range(1, settings.max_iterations + 1):
        if res.cost <= floor or evaluator.evals >= settings.max_cost_evals:
            break
        psi = evaluator.adjoint_potentials(res)
        g = spatial_gradient(mesh, res.potentials, psi)

        def cost_at(zeta_trial):
            part_trial = partition_field(mesh, sigma_hat, zeta_trial, n_max, prev=part)
            return evaluator.evaluate(coarse_field(part_trial, zeta_trial)).cost

        prev_cost = res.cost
        gz = grad_zeta(part, g, zeta, delta_zeta, cost_at, res.cost, thr_bounds)
        moved_values = try_block("values", gz)
        moved_thresholds = try_block("thresholds", gz)
        if not (moved_values or moved_thresholds):
            if evaluator.evals < settings.max_cost_evals:
                stalled = True
            break

        trace.add(it, "step3", res.cost, evaluator.evals,
                  None if sigma_true is None else l2_error(mesh, coarse_field(part, zeta), sigma_true))
        if converged(prev_cost, res.cost, settings.eps_tol) or res.cost <= floor:
            break

    return CoarseResult(sigma=coarse_field(part, zeta), zeta=zeta, partition=part,
                        trace=trace, stalled=stalled, cost=res.cost)


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class PipelineResult:
    mesh: object
    layout: object
    scheme: object
    sigma_true: np.ndarray | None
    d_star: np.ndarray
    fine: FineResult
    coarse: CoarseResult
    trace: RunTrace
    cost_evals: int


def _write_values(path, values):
    with open(path, "w") as fh:
        for v in np.asarray(values, dtype=float):
            fh.write(f"{v:.17g}\n")


def _write_basis(path, control):
    with open(path, "w") as fh:
        for weight, sample in zip(control.weights, control.samples):
            flat = " ".join(f"{v:.17g}" for v in sample.circles.ravel())
            fh.write(f"{weight:.17g} {sample.n_circles} {flat}\n")


def resolve_targets(config, mesh, layout, scheme, noise_rng):
    """Target currents plus the true field when the model is synthetic.

    A measurement file wins over a mask file, which wins over the circle
    list; simulated targets get multiplicative noise from ``noise_rng``.
    """
    if config.model.measurement_file:
        d_star = load_measurements(config.model.measurement_file)
        if d_star.shape != (layout.m, layout.m):
            raise ValueError(
                f"{config.model.measurement_file}: expected a {layout.m}x{layout.m} matrix")
        return None, d_star
    if config.model.mask_file:
        sigma_true = load_mask_field(mesh, config.model.mask_file,
                                     config.model.sigma_c, config.model.sigma_h)
    else:
        sigma_true = make_true_model(mesh, config.model.regions,
                                     config.model.sigma_c, config.model.sigma_h)
    clean = fem.simulate_measurements(mesh, layout, sigma_true, scheme)
    return sigma_true, add_noise(clean, config.noise_level, noise_rng)


def resolve_collection(config, mesh, layout, scheme, rng, threads=1, out_dir=None):
    """Load the configured sample collection, or draw and simulate one.

    A loaded collection that carries no simulated currents is re-simulated
    in place.  Freshly drawn collections are persisted under ``out_dir``
    when one is given.
    """
    if config.collection.file:
        collection = load_collection(
            config.collection.file,
            (config.collection.sigma_c, config.collection.sigma_h),
            config.collection.data_file or None,
            m=layout.m,
        )
        if collection.data is None:
            system = CemSystem(mesh, layout)
            collection.data = [
                system.run_scheme(rasterize_sample(mesh, s, *collection.sigma_pair), scheme)[1]
                for s in collection.samples
            ]
        return collection
    paths = {}
    if out_dir is not None:
        paths = dict(samples_path=os.path.join(out_dir, "samples.txt"),
                     data_path=os.path.join(out_dir, "samples_data.txt"))
    return precompute_collection(
        mesh, layout, scheme, config.collection.n, rng,
        n_c_max=config.collection.n_c_max,
        r_max_fraction=config.collection.r_fraction,
        sigma_pair=(config.collection.sigma_c, config.collection.sigma_h),
        threads=threads, **paths)


def run_pipeline(config, out_dir, threads=1):
    """Run the full reconstruction described by a run configuration.

    Builds the mesh and electrodes, obtains target currents (simulating a
    ground-truth model with noise, or loading a measurement file), ranks a
    sample collection, optimizes the blend, snaps it to a binary field,
    and persists every artifact under ``out_dir``.
    """
    os.makedirs(out_dir, exist_ok=True)
    mesh = build_disc_mesh(config.mesh.radius, config.mesh.target_elements)
    layout = place_electrodes(mesh, config.electrodes.m, config.electrodes.half_width,
                              config.electrodes.impedance)
    scheme = ExcitationScheme(np.asarray(config.excitation.base_pattern, dtype=float))
    streams = seed_streams(config.seed)

    with _phase("target acquisition"):
        sigma_true, d_star = resolve_targets(config, mesh, layout, scheme, streams["noise"])
    with _phase("sample collection"):
        collection = resolve_collection(config, mesh, layout, scheme, streams["collection"],
                                        threads=threads, out_dir=out_dir)

    settings = OptimizeSettings(
        method=config.optimizer.method,
        eps_tol=config.optimizer.eps_tol,
        max_cost_evals=config.optimizer.max_cost_evals,
        delta_p=config.optimizer.delta_p,
        delta_zeta_rel=config.optimizer.delta_zeta_rel,
        n_s=config.optimizer.n_s,
        n_max=config.optimizer.n_max,
    )

    evaluator = CostEvaluator(CemSystem(mesh, layout), scheme, d_star)
    trace = RunTrace()
    with _phase("step 1 ranking"):
        control0 = rank_and_select(collection, d_star, settings.n_s, counter=evaluator)
        sigma0 = control0.field(mesh)
        res0 = evaluator.evaluate(sigma0)
    trace.add(0, "step1", res0.cost, evaluator.evals,
              None if sigma_true is None else l2_error(mesh, sigma0, sigma_true))

    with _phase("step 2 blend"):
        fine = optimize_fine(mesh, layout, scheme, control0, d_star, settings,
                             sigma_true=sigma_true, evaluator=evaluator)
    trace.extend(fine.trace)
    with _phase("step 3 binary"):
        coarse = optimize_coarse(mesh, layout, scheme, fine.sigma, d_star, settings,
                                 sigma_true=sigma_true, evaluator=evaluator)
    trace.extend(coarse.trace)

    save_mesh(mesh, os.path.join(out_dir, "mesh.txt"))
    save_measurements(d_star, os.path.join(out_dir, "dstar.txt"))
    if sigma_true is not None:
        _write_values(os.path.join(out_dir, "sigma_true.txt"), sigma_true)
    _write_basis(os.path.join(out_dir, "basis.txt"), fine.control)
    _write_values(os.path.join(out_dir, "sigma_fine.txt"), fine.sigma)
    _write_values(os.path.join(out_dir, "sigma_binary.txt"), coarse.sigma)
    _write_values(os.path.join(out_dir, "zeta.txt"), coarse.zeta)
    trace.to_csv(os.path.join(out_dir, "trace.csv"))

    return PipelineResult(mesh=mesh, layout=layout, scheme=scheme, sigma_true=sigma_true,
                          d_star=d_star, fine=fine, coarse=coarse, trace=trace,
                          cost_evals=evaluator.evals)
