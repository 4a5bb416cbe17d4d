"""Forward and adjoint electrode-model solves on a fixed mesh.

The potential satisfies div(sigma grad u) = 0 with a Robin condition
u + Z_l sigma du/dn = U_l on each electrode arc and an insulating boundary
elsewhere.  Discretizing with nodal (piecewise linear) elements gives

    (K(sigma) + B) u = sum_l (U_l / Z_l) q_l,

where K is the sigma-weighted stiffness matrix, B the electrode boundary
mass matrix scaled by 1/Z_l, and q_l the vector of basis integrals over
electrode l.  B removes the constant-field kernel of K, so the system is
symmetric positive definite and one sparse factorization serves all
excitation patterns, and the adjoint solves as well.

Electrode currents use the Robin identity I_l = int_El (U_l - u) / Z_l ds,
which makes the discrete current sum vanish exactly (test with v = 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

RESIDUAL_TOL = 1e-10


class SolverError(RuntimeError):
    """The linear system could not be solved to tolerance."""


def rotate_pattern(pattern, k):
    """Cyclic shift of a voltage pattern by k positions (k = 0 is identity)."""
    pattern = np.asarray(pattern, dtype=float)
    return np.roll(pattern, -int(k))


@dataclass(frozen=True, eq=False)
class ExcitationScheme:
    """A zero-sum base voltage pattern and its m cyclic rotations."""

    base_pattern: np.ndarray

    def __post_init__(self):
        base = np.asarray(self.base_pattern, dtype=float)
        if base.ndim != 1 or base.size < 2:
            raise ValueError("base pattern must be a vector of at least 2 voltages")
        scale = np.max(np.abs(base))
        if scale == 0.0 or abs(base.sum()) > 1e-10 * scale * base.size:
            raise ValueError(f"base pattern must sum to zero, got sum {base.sum():.3e}")
        object.__setattr__(self, "base_pattern", base)

    @property
    def m(self):
        return self.base_pattern.size

    @property
    def rotations(self):
        """(m, m) matrix whose row k is the pattern shifted by k."""
        return np.array([rotate_pattern(self.base_pattern, k) for k in range(self.m)])


def _check_sigma(mesh, sigma):
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (mesh.n_elements,):
        raise ValueError("conductivity length does not match the mesh")
    if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0.0):
        raise ValueError("conductivity must be finite and strictly positive")
    return sigma


class CemSystem:
    """Assembly cache for one (mesh, layout) pair.

    Everything independent of the conductivity is precomputed once: unit
    stiffness blocks, sparse index pattern, electrode boundary mass, and
    the electrode integration vectors.
    """

    def __init__(self, mesh, layout):
        self.mesh = mesh
        self.layout = layout
        tri = mesh.triangles
        gx, gy = mesh.grad_x, mesh.grad_y
        a = mesh.element_areas
        self.unit_stiffness = a[:, None, None] * (
            gx[:, :, None] * gx[:, None, :] + gy[:, :, None] * gy[:, None, :]
        )
        self._rows = tri[:, [0, 0, 0, 1, 1, 1, 2, 2, 2]].ravel()
        self._cols = tri[:, [0, 1, 2, 0, 1, 2, 0, 1, 2]].ravel()

        n_v = mesh.n_vertices
        rows, cols, vals = [], [], []
        self.integration_vectors = np.zeros((layout.m, n_v))
        for ell, sel in enumerate(layout.electrode_edges):
            z = layout.contact_impedance[ell]
            for e in sel:
                i, j = mesh.boundary_edges[e]
                length = mesh.boundary_edge_lengths[e]
                rows += [i, j, i, j]
                cols += [i, j, j, i]
                vals += [length / (3 * z), length / (3 * z), length / (6 * z), length / (6 * z)]
                self.integration_vectors[ell, i] += 0.5 * length
                self.integration_vectors[ell, j] += 0.5 * length
        self.electrode_mass = sp.coo_matrix(
            (vals, (rows, cols)), shape=(n_v, n_v)
        ).tocsc()

    def assemble(self, sigma):
        """Sparse system matrix for the given element conductivity."""
        sigma = _check_sigma(self.mesh, sigma)
        data = (self.unit_stiffness * sigma[:, None, None]).ravel()
        n_v = self.mesh.n_vertices
        stiffness = sp.coo_matrix((data, (self._rows, self._cols)), shape=(n_v, n_v))
        return (stiffness.tocsc() + self.electrode_mass).tocsc()

    def factorize(self, sigma):
        """Sparse direct factorization, reusable across right-hand sides."""
        matrix = self.assemble(sigma)
        try:
            lu = spla.splu(matrix)
        except RuntimeError as exc:
            raise SolverError(f"factorization failed: {exc}") from exc
        return _Factor(matrix, lu)

    def pattern_rhs(self, pattern):
        """Load vector sum_l (U_l / Z_l) q_l for one voltage pattern."""
        pattern = np.asarray(pattern, dtype=float)
        if pattern.shape != (self.layout.m,):
            raise ValueError("pattern length does not match the electrode count")
        return self.integration_vectors.T @ (pattern / self.layout.contact_impedance)

    def currents(self, potentials, pattern):
        """Electrode currents I_l = (U_l s_l - int_El u ds) / Z_l."""
        integrals = self.integration_vectors @ potentials
        return (pattern * self.layout.arc_lengths - integrals) / self.layout.contact_impedance

    def adjoint_rhs(self, residual_weights):
        """Load vector sum_l (g_l / Z_l) q_l for per-electrode weights g."""
        return self.integration_vectors.T @ (
            np.asarray(residual_weights, dtype=float) / self.layout.contact_impedance
        )

    def run_scheme(self, sigma, scheme):
        """Solve all rotated patterns with one factorization.

        Returns (potentials, currents, factor): potentials has one column
        per pattern, currents one row per pattern.
        """
        if scheme.m != self.layout.m:
            raise ValueError("scheme size does not match the electrode count")
        factor = self.factorize(sigma)
        potentials = np.empty((self.mesh.n_vertices, scheme.m))
        currents = np.empty((scheme.m, scheme.m))
        for k in range(scheme.m):
            pattern = rotate_pattern(scheme.base_pattern, k)
            u = factor.solve(self.pattern_rhs(pattern))
            potentials[:, k] = u
            currents[k] = self.currents(u, pattern)
        return potentials, currents, factor


class _Factor:
    """A factorized system matrix with residual-checked solves."""

    def __init__(self, matrix, lu):
        self.matrix = matrix
        self._lu = lu

    def solve(self, rhs):
        x = self._lu.solve(rhs)
        norm = np.linalg.norm(rhs)
        if norm == 0.0:
            return np.zeros_like(rhs)
        residual = np.linalg.norm(self.matrix @ x - rhs) / norm
        if not residual <= RESIDUAL_TOL or not np.all(np.isfinite(x)):
            raise SolverError(
                f"solve exceeded residual tolerance ({residual:.3e} > {RESIDUAL_TOL:.0e}); "
                f"matrix may be near-singular"
            )
        return x


def assemble_and_solve_forward(mesh, layout, sigma, pattern):
    """Nodal potentials for one voltage pattern (convenience wrapper)."""
    system = CemSystem(mesh, layout)
    return system.factorize(sigma).solve(system.pattern_rhs(pattern))


def electrode_currents(mesh, layout, potentials, pattern):
    """Electrode currents from a solved potential and its voltage pattern."""
    return CemSystem(mesh, layout).currents(np.asarray(potentials, dtype=float), pattern)


def simulate_measurements(mesh, layout, sigma, scheme):
    """(m, m) current matrix: row k is the response to the k-times-rotated pattern."""
    _, currents, _ = CemSystem(mesh, layout).run_scheme(sigma, scheme)
    return currents


def cost(measured, target):
    """Squared misfit sum over all patterns and electrodes."""
    measured = np.asarray(measured, dtype=float)
    target = np.asarray(target, dtype=float)
    if measured.shape != target.shape:
        raise ValueError("measurement matrices must have equal shape")
    diff = measured - target
    return float(np.sum(diff * diff))


def residual_weights(currents, target):
    """Per-electrode adjoint weights g_l = -2 (I_l - I*_l), one row per pattern."""
    return -2.0 * (np.asarray(currents, dtype=float) - np.asarray(target, dtype=float))


def solve_adjoint(mesh, layout, sigma, potentials, pattern, target_currents):
    """Adjoint potentials for one pattern.

    The adjoint uses the same symmetric operator as the forward problem;
    its load collects the current misfit on each electrode.
    """
    system = CemSystem(mesh, layout)
    factor = system.factorize(sigma)
    currents = system.currents(np.asarray(potentials, dtype=float), pattern)
    weights = residual_weights(currents, target_currents)
    return factor.solve(system.adjoint_rhs(weights))


def add_noise(measurements, level, rng):
    """Multiplicative Gaussian noise: entry * (1 + level * xi), xi ~ N(0, 1)."""
    measurements = np.asarray(measurements, dtype=float)
    if level < 0.0:
        raise ValueError(f"noise level must be non-negative, got {level}")
    xi = rng.standard_normal(measurements.shape)
    return measurements * (1.0 + level * xi)


def save_measurements(measurements, path):
    """Write an (m, m) current matrix as comma-separated text."""
    measurements = np.asarray(measurements, dtype=float)
    with open(path, "w") as fh:
        for row in measurements:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def load_measurements(path):
    """Read a current matrix written by :func:`save_measurements`."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append([float(t) for t in line.split(",")])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed measurement line") from exc
    matrix = np.array(rows)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"{path}: expected a square current matrix, got {matrix.shape}")
    return matrix
