"""Clamped-membrane deflection under piecewise-constant pressure.

The deflection solves the quasilinear equation
``div( grad(w) / sqrt(1 + |grad w|^2) ) = p`` with ``w = 0`` on the
boundary, discretized with P1 elements and solved by frozen-coefficient
(Picard) iteration. A Poisson solver and an exact radial reference
solution on the radius-5 disk are included for verification.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .meshing import (DirichletSolver, InteriorMask, Mesh, interior_mask,
                      load_vector, stiffness_matrix)

logger = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    """Picard iteration failed to reach the requested tolerance."""


@dataclass(frozen=True)
class PressureField:
    """Per-element constant pressure supported on an interior mask.

    Values are dimensionless (scaled by membrane tension) and must vanish
    on every element outside the mask. ``bound``, when given, is the
    existence bound: construction rejects ``max |values| >= bound``.
    """

    values: np.ndarray
    mask: InteriorMask
    bound: float | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        values.setflags(write=False)
        outside = values[~self.mask.element_flags]
        if outside.size and np.any(outside != 0.0):
            raise ValueError("pressure values must vanish outside the interior mask")
        if self.bound is not None and np.max(np.abs(values), initial=0.0) >= self.bound:
            raise ValueError(
                f"pressure magnitude {np.max(np.abs(values)):g} exceeds bound {self.bound:g}")

    def scaled(self, factor: float) -> "PressureField":
        return PressureField(self.values * factor, self.mask, self.bound)


@dataclass(frozen=True)
class DisplacementField:
    """Nodal deflection with per-element constant gradients.

    ``nodal_values`` vanish on boundary nodes (clamped edge) and
    ``element_gradients`` are the exact P1 gradients of the nodal data.
    ``picard_iterations`` records the solver effort when produced by
    :func:`solve_membrane` (None otherwise).
    """

    nodal_values: np.ndarray
    element_gradients: np.ndarray
    picard_iterations: int | None = None

    def __post_init__(self):
        self.nodal_values.setflags(write=False)
        self.element_gradients.setflags(write=False)

    @property
    def max_slope(self) -> float:
        return float(np.linalg.norm(self.element_gradients, axis=1).max(initial=0.0))


def displacement_gradient(mesh: Mesh, nodal_values: np.ndarray) -> np.ndarray:
    """Per-element constant gradient of a P1 nodal field, exact for P1."""
    return np.einsum("kad,ka->kd", mesh.element_gradients,
                     nodal_values[mesh.elements])


def _field_from_nodal(mesh, nodal, iterations=None):
    return DisplacementField(nodal_values=nodal,
                             element_gradients=displacement_gradient(mesh, nodal),
                             picard_iterations=iterations)


def poisson_solve(mesh: Mesh, cell_rhs) -> DisplacementField:
    """P1 solution of ``laplace(v) = rhs`` with zero Dirichlet boundary.

    ``cell_rhs`` is one constant per element. The sign convention follows
    the returned field: ``v`` satisfies ``laplace(v) = rhs`` discretely,
    i.e. the weak form ``(grad v, grad phi) = -(rhs, phi)``.
    """
    cell_rhs = np.asarray(cell_rhs, dtype=float)
    if not np.all(np.isfinite(cell_rhs)):
        raise ValueError("right-hand side must be finite")
    solver = DirichletSolver(mesh)
    nodal = solver.solve(-load_vector(mesh, cell_rhs))
    return _field_from_nodal(mesh, nodal)


def solve_membrane(mesh: Mesh, pressure: PressureField, tol: float = 1e-8,
                   max_iter: int = 100, slope_limit: float = 0.5) -> DisplacementField:
    """Solve the prescribed-curvature membrane problem by Picard iteration.

    At step n the linear problem ``div(a_n grad w) = p`` is solved with the
    frozen coefficient ``a_n = 1/sqrt(1 + |grad w_n|^2)`` per element,
    starting from ``w_0 = 0``. Iteration stops once both the relative
    update and the relative residual (measured in the discrete dual norm
    induced by the identity-coefficient stiffness matrix) fall below
    ``tol``.

    Raises
    ------
    ConvergenceError
        If the residual stalls or ``max_iter`` is exceeded, which signals
        a pressure too large for the membrane model or an over-tight
        tolerance.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    b = load_vector(mesh, pressure.values)
    dual = DirichletSolver(mesh)

    def dual_norm(r):
        return float(np.sqrt(max(dual.solve(r) @ r, 0.0)))

    scale = dual_norm(b)
    nodal = np.zeros(mesh.n_nodes)
    grads = np.zeros((mesh.n_elements, 2))
    if scale == 0.0:
        return _field_from_nodal(mesh, nodal, iterations=0)

    prev_res = np.inf
    update = np.inf
    for iteration in range(max_iter + 1):
        coeff = 1.0 / np.sqrt(1.0 + (grads ** 2).sum(axis=1))
        matrix = stiffness_matrix(mesh, coeff)
        residual = dual_norm(matrix @ nodal + b) / scale
        logger.debug("picard %d: residual %.3e, update %.3e",
                     iteration, residual, update)
        if residual <= tol and update <= tol:
            field = _field_from_nodal(mesh, nodal, iterations=iteration)
            if field.max_slope > slope_limit:
                warnings.warn(
                    f"membrane slope {field.max_slope:.3f} exceeds {slope_limit}; "
                    "the small-slope model is degrading", stacklevel=2)
            return field
        if residual >= prev_res:
            raise ConvergenceError(
                f"residual stalled at {residual:.3e} (iteration {iteration}); "
                "pressure too large or tolerance too tight")
        prev_res = residual

        solver = DirichletSolver(mesh, matrix=matrix)
        new_nodal = solver.solve(-b)
        update = (np.linalg.norm(new_nodal - nodal)
                  / max(np.linalg.norm(new_nodal), np.finfo(float).tiny))
        nodal = new_nodal
        grads = displacement_gradient(mesh, nodal)
    raise ConvergenceError(f"no convergence after {max_iter} Picard iterations")


# ---------------------------------------------------------------------------
# radial reference solution on the radius-5 disk

DISK_RADIUS = 5.0
SUPPORT_RADIUS = 2.0
_A = 1.0 / np.sqrt(2.0)     # slope scale: outer profile a*log(r + sqrt(r^2 - a^2))


def _psi(r):
    return _A * np.log(r + np.sqrt(r * r - _A * _A))


def _psi_prime(r):
    return _A / np.sqrt(r * r - _A * _A)


def _cubic_coeffs(rho):
    # inner cubic rho*r^3 + b*r^2 + c matched C^1 to the outer profile at r=2
    b = -3.0 * rho + _psi_prime(SUPPORT_RADIUS) / 4.0
    c = (4.0 * rho + _psi(SUPPORT_RADIUS) - _psi(DISK_RADIUS)
         - _psi_prime(SUPPORT_RADIUS))
    return b, c


def radial_displacement(rho: float, r) -> np.ndarray:
    """Closed-form radial deflection on the radius-5 disk.

    Inside the pressurized disk of radius 2 the profile is a cubic in r
    whose rho-dependent part vanishes identically outside, so two
    different ``rho`` values give the same deflection there. The outer
    branch is the exact pressure-free (minimal-surface) profile.
    """
    r = np.asarray(r, dtype=float)
    b, c = _cubic_coeffs(rho)
    inner = rho * r**3 + b * r**2 + c
    outer = _psi(np.maximum(r, SUPPORT_RADIUS)) - _psi(DISK_RADIUS)
    return np.where(r < SUPPORT_RADIUS, inner, outer)


def radial_slope(rho: float, r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    b, _ = _cubic_coeffs(rho)
    inner = 3.0 * rho * r**2 + 2.0 * b * r
    outer = _psi_prime(np.maximum(r, SUPPORT_RADIUS))
    return np.where(r < SUPPORT_RADIUS, inner, outer)


def radial_pressure_profile(rho: float, r) -> np.ndarray:
    """Radial divergence of the normalized slope of the closed form.

    Evaluates ``[w'' + (w' + w'^3)/r] / (1 + w'^2)^(3/2)`` inside the
    pressurized disk and 0 outside, where the outer branch is exactly
    divergence-free.
    """
    r = np.asarray(r, dtype=float)
    b, _ = _cubic_coeffs(rho)
    rs = np.where(r > 0, r, 1.0)
    w1 = 3.0 * rho * rs**2 + 2.0 * b * rs
    w2 = 6.0 * rho * rs + 2.0 * b
    p = (w2 + (w1 + w1**3) / rs) / (1.0 + w1 * w1) ** 1.5
    p = np.where(r > 0, p, 4.0 * b)          # limit r -> 0
    return np.where(r < SUPPORT_RADIUS, p, 0.0)


def _radial_flux_divergence(mesh: Mesh, rho: float) -> np.ndarray:
    """Per-element flux-balance divergence of the closed-form slope field.

    Integrates the normalized slope ``q(r) = w'/sqrt(1+w'^2)`` through each
    element boundary by Gauss-Legendre quadrature, splitting edges where
    they cross the flux kink at the support radius. Elements not touching
    the closed pressurized disk carry an exactly divergence-free flux and
    are set to zero.
    """
    gl_x, gl_w = np.polynomial.legendre.leggauss(12)

    def flux_over_r(r):
        s = radial_slope(rho, r)
        return s / np.sqrt(1.0 + s * s) / np.maximum(r, np.finfo(float).tiny)

    node_r = np.hypot(mesh.nodes[:, 0], mesh.nodes[:, 1])
    touching = (node_r[mesh.elements] <= SUPPORT_RADIUS + 1e-9).any(axis=1)
    corners = mesh.nodes[mesh.elements]
    values = np.zeros(mesh.n_elements)
    for k in np.nonzero(touching)[0]:
        total = 0.0
        for e in range(3):
            a, b = corners[k, e], corners[k, (e + 1) % 3]
            d = b - a
            normal = np.array([d[1], -d[0]])       # outward for CCW elements
            cuts = [0.0, 1.0]
            # roots of |a + t d| = support radius
            c2, c1 = d @ d, 2.0 * (a @ d)
            c0 = a @ a - SUPPORT_RADIUS ** 2
            disc = c1 * c1 - 4.0 * c2 * c0
            if disc > 0.0:
                for t in ((-c1 - np.sqrt(disc)) / (2 * c2),
                          (-c1 + np.sqrt(disc)) / (2 * c2)):
                    if 1e-12 < t < 1.0 - 1e-12:
                        cuts.append(t)
            cuts.sort()
            for t0, t1 in zip(cuts[:-1], cuts[1:]):
                t = 0.5 * (t0 + t1) + 0.5 * (t1 - t0) * gl_x
                weights = 0.5 * (t1 - t0) * gl_w
                points = a[None, :] + t[:, None] * d[None, :]
                radii = np.hypot(points[:, 0], points[:, 1])
                total += (weights * flux_over_r(radii) * (points @ normal)).sum()
        values[k] = total / mesh.element_areas[k]
    return values


def radial_example(rho: float, mesh: Mesh, pressure_from: str = "flux"):
    """Exact radial deflection and its pressure on a radius-5 disk mesh.

    Parameters
    ----------
    rho : float
        Free parameter of the inner cubic; any two values agree outside
        the pressurized disk of radius 2.
    mesh : Mesh
        Disk mesh of radius 5. Meshes whose ring count is a multiple of 5
        align an element ring with the support circle, which is what the
        refinement study in the tests relies on.
    pressure_from : {"flux", "centroid"}
        "flux" balances the exact closed-form flux through each element
        boundary (a discrete divergence; second-order accurate);
        "centroid" samples the radial divergence profile at centroids
        (simpler, but first-order near the support circle).

    Returns
    -------
    (DisplacementField, PressureField)
    """
    if mesh.shape != "disk" or not np.isclose(mesh.size, DISK_RADIUS):
        raise ValueError("radial example requires a disk mesh of radius 5")
    radii = np.hypot(mesh.nodes[:, 0], mesh.nodes[:, 1])
    nodal = radial_displacement(rho, radii)
    nodal[mesh.boundary_nodes] = 0.0
    field = _field_from_nodal(mesh, nodal)

    if pressure_from == "flux":
        values = _radial_flux_divergence(mesh, rho)
    elif pressure_from == "centroid":
        centroid_r = np.hypot(mesh.centroids[:, 0], mesh.centroids[:, 1])
        values = np.where(centroid_r < SUPPORT_RADIUS,
                          radial_pressure_profile(rho, centroid_r), 0.0)
    else:
        raise ValueError(f"unknown pressure_from {pressure_from!r}")
    standoff = max(0.0, DISK_RADIUS - SUPPORT_RADIUS - 2.0 * mesh.h)
    mask = interior_mask(mesh, standoff)
    values = np.where(mask.element_flags, values, 0.0)
    return field, PressureField(values=values, mask=mask)


# ---------------------------------------------------------------------------
# CSV serialization


def save_pressure_csv(field: PressureField, path) -> None:
    with open(path, "w") as fh:
        fh.write("element,value\n")
        for k, v in enumerate(field.values):
            fh.write(f"{k},{float(v)!r}\n")


def save_displacement_csv(field: DisplacementField, path) -> None:
    with open(path, "w") as fh:
        fh.write("node,value\n")
        for k, v in enumerate(field.nodal_values):
            fh.write(f"{k},{float(v)!r}\n")


def load_values_csv(path) -> np.ndarray:
    """Read back the value column of a field CSV in index order."""
    values = {}
    with open(path) as fh:
        next(fh)
        for line in fh:
            idx, val = line.strip().split(",")
            values[int(idx)] = float(val)
    return np.array([values[k] for k in range(len(values))])
