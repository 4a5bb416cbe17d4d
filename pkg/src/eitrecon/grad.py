"""Misfit gradients for every control family, plus the ratio diagnostic.

The element-wise gradient stores the exact derivative of the discrete
misfit with respect to each element value, area weight included:

    g_e = -area_e * sum_k grad(psi_k) . grad(u_k)  on element e.

With that convention every chain rule below is a plain dot product.
Weight gradients are exact (the field is affine in the weights); circle
parameter and threshold gradients difference the rasterization or the
cost with a one-sided step, since those controls act through set
membership rather than smoothly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .field import circle_union_mask


class DegenerateDirectionError(ValueError):
    """The probe direction is orthogonal to the gradient."""


def spatial_gradient(mesh, forward_potentials, adjoint_potentials):
    """Element-wise misfit gradient, area-weighted.

    Parameters
    ----------
    forward_potentials, adjoint_potentials : (n_v, m) arrays
        Nodal solutions, one column per excitation pattern.
    """
    u = np.asarray(forward_potentials, dtype=float)
    psi = np.asarray(adjoint_potentials, dtype=float)
    if u.shape != psi.shape or u.shape[0] != mesh.n_vertices:
        raise ValueError("potential arrays must be (n_vertices, n_patterns) and equal shape")
    if u.ndim == 1:
        u = u[:, None]
        psi = psi[:, None]
    tri = mesh.triangles
    ux = np.einsum("ta,tak->tk", mesh.grad_x, u[tri])
    uy = np.einsum("ta,tak->tk", mesh.grad_y, u[tri])
    px = np.einsum("ta,tak->tk", mesh.grad_x, psi[tri])
    py = np.einsum("ta,tak->tk", mesh.grad_y, psi[tri])
    return -mesh.element_areas * np.sum(ux * px + uy * py, axis=1)


def grad_alpha(sample_fields, spatial_grad):
    """Gradient with respect to the blend weights: one dot product per sample."""
    sample_fields = np.asarray(sample_fields, dtype=float)
    spatial_grad = np.asarray(spatial_grad, dtype=float)
    if sample_fields.ndim != 2 or sample_fields.shape[1] != spatial_grad.shape[0]:
        raise ValueError("sample_fields must be (n_samples, n_elements)")
    return sample_fields @ spatial_grad


def grad_p(mesh, control, sigma_c, sigma_h, spatial_grad, delta=1e-3):
    """Gradient with respect to the circle parameters of every sample.

    Each parameter is perturbed by ``delta`` (length units), the sample is
    re-rasterized, and the field difference is contracted against the
    element gradient.  No cost evaluations are involved, and only the
    owning sample's rasterization is touched, so the derivative for one
    parameter never depends on the other samples.

    Returns a flat array over samples and circles in (x, y, r) order.
    """
    if delta <= 0.0:
        raise ValueError(f"delta must be positive, got {delta}")
    spatial_grad = np.asarray(spatial_grad, dtype=float)
    contrast = float(sigma_c) - float(sigma_h)
    out = []
    for weight, sample in zip(control.weights, control.samples):
        circles = np.atleast_2d(np.asarray(
            sample.circles if hasattr(sample, "circles") else sample, dtype=float))
        masks = [circle_union_mask(mesh, circles[j:j + 1]) for j in range(len(circles))]
        for j in range(len(circles)):
            others = np.zeros(mesh.n_elements, dtype=bool)
            for jj, mask in enumerate(masks):
                if jj != j:
                    others |= mask
            base = others | masks[j]
            for p in range(3):
                perturbed = circles[j].copy()
                perturbed[p] += delta
                shifted = others | circle_union_mask(mesh, perturbed[None, :])
                flips = shifted.astype(float) - base.astype(float)
                out.append(weight * contrast / delta * float(flips @ spatial_grad))
    return np.array(out)


def grad_zeta(partition, spatial_grad, zeta, delta, cost_at_zeta, base_cost,
              threshold_bounds):
    """Gradient of the coarse control [low, highs 1..N, thresholds 1..N].

    Value components are exact sums of the element gradient over each
    region (the coarse field is affine in the values).  Threshold
    components use a one-sided difference of the full cost, one extra
    evaluation each; a perturbation that would leave the admissible
    threshold interval is clipped with a warning.  The cost is piecewise
    constant in each threshold (elements flip in groups), so a probe that
    lands between levels doubles its step until the cost responds, up to
    a quarter of the admissible span.
    """
    if delta <= 0.0:
        raise ValueError(f"delta must be positive, got {delta}")
    zeta = np.asarray(zeta, dtype=float)
    n_max = partition.n_max
    if zeta.shape != (2 * n_max + 1,):
        raise ValueError(f"zeta must have length {2 * n_max + 1}, got {zeta.shape}")
    spatial_grad = np.asarray(spatial_grad, dtype=float)
    labels = partition.labels

    grad = np.zeros_like(zeta)
    grad[0] = spatial_grad[labels == 0].sum()
    for n in range(1, n_max + 1):
        grad[n] = spatial_grad[labels == n].sum()

    lo, hi = threshold_bounds
    span = hi - lo
    for n in range(n_max):
        idx = n_max + 1 + n
        step = delta
        grad[idx] = 0.0
        while True:
            target = zeta[idx] + step
            if target >= hi:
                target = max(zeta[idx] - step, lo + 1e-12 * span)
                if target <= lo:
                    warnings.warn(
                        f"threshold {n + 1} perturbation clipped to the admissible interval")
                    target = min(max(zeta[idx], lo + 1e-12 * span), hi - 1e-12 * span)
            actual = target - zeta[idx]
            if actual == 0.0:
                break
            trial = zeta.copy()
            trial[idx] = target
            diff = cost_at_zeta(trial) - base_cost
            if diff != 0.0:
                grad[idx] = diff / actual
                break
            if 2.0 * step > 0.25 * span:
                break
            step *= 2.0
    return grad


@dataclass
class KappaReport:
    """Gradient-consistency ratios over a sweep of step sizes.

    ``kappa[i]`` is the one-sided difference quotient along the probe
    direction divided by the predicted slope at ``epsilons[i]``;
    ``digits[i]`` is log10 |kappa - 1|.
    """

    epsilons: np.ndarray
    kappa: np.ndarray
    digits: np.ndarray

    def save_csv(self, path):
        with open(path, "w") as fh:
            fh.write("epsilon,kappa,log10_abs_kappa_minus_1\n")
            for e, k, d in zip(self.epsilons, self.kappa, self.digits):
                fh.write(f"{e:.17g},{k:.17g},{d:.17g}\n")

    def plateau_decades(self, tol, eps_range=None):
        """Longest run of consecutive sweep points with |kappa - 1| < tol.

        ``eps_range = (lo, hi)`` restricts the count to that eps interval.
        """
        best = run = 0
        for e, k in zip(self.epsilons, self.kappa):
            inside = eps_range is None or (eps_range[0] <= e <= eps_range[1])
            if inside and abs(k - 1.0) < tol:
                run += 1
                best = max(best, run)
            else:
                run = 0
        return best


def kappa_test(cost_at, x0, gradient, direction, epsilons):
    """Probe a gradient against one-sided cost differences.

    kappa(eps) = [cost(x0 + eps d) - cost(x0)] / (eps * <gradient, d>).
    A correct gradient gives kappa near 1 over a plateau of step sizes.
    """
    x0 = np.asarray(x0, dtype=float)
    gradient = np.asarray(gradient, dtype=float)
    direction = np.asarray(direction, dtype=float)
    epsilons = np.asarray(epsilons, dtype=float)
    slope = float(gradient @ direction)
    if slope == 0.0:
        raise DegenerateDirectionError(
            "probe direction is orthogonal to the gradient; pick another direction")
    base = float(cost_at(x0))
    kappa = np.empty(epsilons.size)
    for i, eps in enumerate(epsilons):
        kappa[i] = (float(cost_at(x0 + eps * direction)) - base) / (eps * slope)
    with np.errstate(divide="ignore"):
        digits = np.log10(np.abs(kappa - 1.0))
    return KappaReport(epsilons=epsilons, kappa=kappa, digits=digits)
