"""Piecewise-constant conductivity fields and circle-union samples.

A conductivity field is a plain float array with one value per mesh
element.  A sample is a union of circles: elements whose centroid falls
inside any circle take the anomaly value, all others the background value.
Fields built from several samples are convex blends of the rasterized
samples, so every blend stays between the two target values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIMPLEX_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class SampleParam:
    """One candidate anomaly layout: an (n_c, 3) array of (x, y, r) circles."""

    circles: np.ndarray

    def __post_init__(self):
        circles = np.atleast_2d(np.asarray(self.circles, dtype=float))
        if circles.ndim != 2 or circles.shape[1] != 3 or circles.shape[0] < 1:
            raise ValueError("circles must be an (n_c, 3) array of (x, y, r)")
        if np.any(circles[:, 2] <= 0.0):
            raise ValueError("circle radii must be positive")
        object.__setattr__(self, "circles", circles)

    @property
    def n_circles(self):
        return len(self.circles)

    def validate(self, radius, n_c_max=None):
        """Check the restrictions for samples living on a disc of given radius."""
        if n_c_max is not None and self.n_circles > n_c_max:
            raise ValueError(f"sample has {self.n_circles} circles, limit is {n_c_max}")
        centers = np.hypot(self.circles[:, 0], self.circles[:, 1])
        if np.any(centers >= radius + self.circles[:, 2]):
            raise ValueError("circle center too far outside the domain")


@dataclass
class BlendControl:
    """A weighted basis of samples; weights live on the unit simplex."""

    samples: list
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.samples) != len(self.weights):
            raise ValueError("one weight per sample is required")

    def validate(self):
        w = self.weights
        if np.any(w < -SIMPLEX_TOL) or abs(w.sum() - 1.0) > SIMPLEX_TOL:
            raise ValueError(
                f"weights must lie on the unit simplex (sum {w.sum():.3e}, "
                f"min {w.min():.3e})"
            )


def sample_random(rng, radius, n_c_max, r_max_fraction=0.3):
    """Draw one random sample.

    The circle count is uniform on 1..n_c_max.  Each radius is uniform on
    (0, r_max_fraction * radius]; each center is then uniform over the disc
    of radius ``radius + r``, so every circle meets the domain.
    """
    if n_c_max < 1:
        raise ValueError(f"n_c_max must be at least 1, got {n_c_max}")
    if not 0.0 < r_max_fraction:
        raise ValueError(f"r_max_fraction must be positive, got {r_max_fraction}")
    n_c = int(rng.integers(1, n_c_max + 1))
    r = (1.0 - rng.random(n_c)) * r_max_fraction * radius
    rho = (radius + r) * np.sqrt(rng.random(n_c))
    theta = rng.random(n_c) * 2.0 * np.pi
    circles = np.column_stack([rho * np.cos(theta), rho * np.sin(theta), r])
    return SampleParam(circles)


def circle_union_mask(mesh, circles):
    """Boolean element mask: centroid inside any circle.

    Circles with non-positive radius cover nothing, which lets optimizer
    trial states shrink circles away without special-casing.
    """
    circles = np.atleast_2d(np.asarray(circles, dtype=float))
    mask = np.zeros(mesh.n_elements, dtype=bool)
    for x, y, r in circles:
        if r <= 0.0:
            continue
        dx = mesh.centroids[:, 0] - x
        dy = mesh.centroids[:, 1] - y
        mask |= dx * dx + dy * dy <= r * r
    return mask


def rasterize_sample(mesh, sample, sigma_c, sigma_h):
    """Two-valued element field of one sample: sigma_c inside, sigma_h outside."""
    circles = sample.circles if isinstance(sample, SampleParam) else sample
    return np.where(circle_union_mask(mesh, circles), float(sigma_c), float(sigma_h))


def sample_field_matrix(mesh, samples, sigma_c, sigma_h):
    """Stack rasterized sample fields into an (n_samples, n_elements) matrix."""
    return np.array([rasterize_sample(mesh, s, sigma_c, sigma_h) for s in samples])


def blend(mesh, control, sigma_c, sigma_h):
    """Convex combination of the rasterized basis samples.

    Raises ValueError when the weights leave the unit simplex; valid blends
    take values in [sigma_h, sigma_c].
    """
    control.validate()
    fields = sample_field_matrix(mesh, control.samples, sigma_c, sigma_h)
    return fields.T @ control.weights


def make_true_model(mesh, regions, sigma_c, sigma_h):
    """Rasterize a ground-truth anomaly layout.

    Parameters
    ----------
    regions : sequence
        Circles as (x, y, r) or (x, y, r, value); a missing value means
        ``sigma_c``.  Later circles override earlier ones where they
        overlap.  An empty sequence gives the uniform background.
    """
    values = np.full(mesh.n_elements, float(sigma_h))
    for region in regions:
        region = tuple(region)
        if len(region) == 3:
            x, y, r = region
            value = sigma_c
        elif len(region) == 4:
            x, y, r, value = region
        else:
            raise ValueError("each region must be (x, y, r) or (x, y, r, value)")
        if r <= 0.0:
            raise ValueError(f"region radius must be positive, got {r}")
        values[circle_union_mask(mesh, [(x, y, r)])] = float(value)
    return values


def load_mask_field(mesh, path, sigma_c, sigma_h):
    """Rasterize a 0/1 text grid onto the mesh.

    The grid spans the bounding square [-R, R]^2 with the first row at the
    top; each element takes the value of the pixel containing its centroid.
    The grid must resolve the mesh: the pixel diagonal may not exceed the
    median element diameter.
    """
    try:
        grid = np.loadtxt(path, dtype=int, ndmin=2)
    except ValueError as exc:
        raise ValueError(f"{path}: mask grid must contain only integers") from exc
    if grid.size == 0 or not np.isin(grid, (0, 1)).all():
        raise ValueError(f"{path}: mask grid must contain only 0 and 1")
    rows, cols = grid.shape
    r = mesh.radius
    pixel_diag = np.hypot(2.0 * r / cols, 2.0 * r / rows)
    median_diam = float(np.median(2.0 * np.sqrt(mesh.element_areas / np.pi)))
    if pixel_diag > 2.0 * median_diam:
        raise ValueError(
            f"{path}: mask grid ({rows}x{cols}) too coarse for the mesh "
            f"({mesh.n_elements} elements)"
        )
    col = np.clip(((mesh.centroids[:, 0] + r) / (2.0 * r) * cols).astype(int), 0, cols - 1)
    row = np.clip(((r - mesh.centroids[:, 1]) / (2.0 * r) * rows).astype(int), 0, rows - 1)
    return np.where(grid[row, col] == 1, float(sigma_c), float(sigma_h))


def l2_error(mesh, values_a, values_b):
    """Area-weighted L2 distance between two element fields."""
    values_a = np.asarray(values_a, dtype=float)
    values_b = np.asarray(values_b, dtype=float)
    if values_a.shape != (mesh.n_elements,) or values_b.shape != (mesh.n_elements,):
        raise ValueError("field length does not match the mesh")
    diff = values_a - values_b
    return float(np.sqrt(np.sum(mesh.element_areas * diff * diff)))


@dataclass
class SampleCollection:
    """A batch of samples with, optionally, their simulated electrode currents.

    ``data[i]`` is the (m, m) current matrix of sample ``i`` under the full
    excitation scheme; ``sigma_pair`` is the (anomaly, background) value
    pair the samples were rasterized with.
    """

    samples: list
    sigma_pair: tuple
    data: list | None = None

    def __len__(self):
        return len(self.samples)


def save_collection(collection, samples_path, data_path=None):
    """Persist samples (and current data when present) as text files."""
    with open(samples_path, "w") as fh:
        for sample in collection.samples:
            flat = " ".join(f"{v:.17g}" for v in sample.circles.ravel())
            fh.write(f"{sample.n_circles} {flat}\n")
    if data_path is not None:
        if collection.data is None:
            raise ValueError("collection has no current data to save")
        with open(data_path, "w") as fh:
            for d in collection.data:
                fh.write(",".join(f"{v:.17g}" for v in np.asarray(d).ravel()) + "\n")


def load_collection(samples_path, sigma_pair, data_path=None, m=None):
    """Load a collection saved by :func:`save_collection`.

    ``m`` (electrode count) is required to reshape current data rows.
    """
    samples = []
    with open(samples_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            tokens = line.split()
            try:
                n_c = int(tokens[0])
                values = [float(t) for t in tokens[1:]]
            except ValueError as exc:
                raise ValueError(f"{samples_path}:{lineno}: malformed sample line") from exc
            if len(values) != 3 * n_c:
                raise ValueError(
                    f"{samples_path}:{lineno}: expected {3 * n_c} values, got {len(values)}"
                )
            samples.append(SampleParam(np.array(values).reshape(n_c, 3)))
    data = None
    if data_path is not None:
        if m is None:
            raise ValueError("electrode count m is required to load current data")
        data = []
        with open(data_path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    row = np.array([float(t) for t in line.split(",")])
                except ValueError as exc:
                    raise ValueError(f"{data_path}:{lineno}: malformed data line") from exc
                if row.size != m * m:
                    raise ValueError(
                        f"{data_path}:{lineno}: expected {m * m} currents, got {row.size}"
                    )
                data.append(row.reshape(m, m))
        if len(data) != len(samples):
            raise ValueError(
                f"{data_path}: {len(data)} data rows for {len(samples)} samples"
            )
    return SampleCollection(samples=samples, sigma_pair=tuple(sigma_pair), data=data)
