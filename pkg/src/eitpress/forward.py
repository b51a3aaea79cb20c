"""Boundary current-voltage data for the deformed membrane.

The deflection enters through the apparent conductivity tensor
``I - grad(w) grad(w)^T / (1 + |grad w|^2)``, an anisotropic P1
coefficient. Currents are driven between adjacent electrode pairs with
uniform density on each arc (gap model, no shunting); voltages are
arc averages. One sparse factorization solves all injection patterns of
a given conductivity.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .meshing import ElectrodeLayout, Mesh, stiffness_matrix
from .membrane import DisplacementField

logger = logging.getLogger(__name__)

ABSOLUTE = "absolute"
DIFFERENCE = "difference"


class SolverError(RuntimeError):
    """A forward linear solve broke down or left a large residual."""


@dataclass(frozen=True)
class ConductivityField:
    """Per-element symmetric 2x2 conductivity tensors, shape (K, 2, 2)."""

    tensors: np.ndarray

    def __post_init__(self):
        self.tensors.setflags(write=False)

    @classmethod
    def isotropic(cls, values) -> "ConductivityField":
        values = np.asarray(values, dtype=float)
        tensors = values[:, None, None] * np.eye(2)[None, :, :]
        return cls(tensors=tensors)


def apparent_conductivity(mesh: Mesh, displacement: DisplacementField) -> ConductivityField:
    """Conductivity tensor equivalent, for boundary data, to conduction
    along the deflected surface.

    Per element: ``I - g g^T / (1 + |g|^2)`` with ``g`` the deflection
    gradient. Eigenvalues are 1 (across the slope) and
    ``1 / (1 + |g|^2)`` (along it), so the tensor is always SPD.
    """
    g = displacement.element_gradients
    denom = 1.0 + (g ** 2).sum(axis=1)
    tensors = np.eye(2)[None, :, :] - g[:, :, None] * g[:, None, :] / denom[:, None, None]
    return ConductivityField(tensors=tensors)


def conductivity_spectrum(field: ConductivityField):
    """Eigenvalues (ascending) and determinants of each tensor."""
    eigvals = np.linalg.eigvalsh(field.tensors)
    dets = np.linalg.det(field.tensors)
    return eigvals, dets


def check_conductivity(field: ConductivityField, tol: float = 1e-12) -> None:
    """Raise if any tensor is asymmetric or not positive definite."""
    asym = np.abs(field.tensors[:, 0, 1] - field.tensors[:, 1, 0])
    if asym.max(initial=0.0) > tol:
        k = int(np.argmax(asym))
        raise SolverError(f"conductivity tensor of element {k} is asymmetric "
                          f"by {asym[k]:.3e}")
    eigvals, _ = conductivity_spectrum(field)
    if eigvals.min(initial=1.0) <= 0.0:
        k = int(np.argmin(eigvals[:, 0]))
        raise SolverError(f"conductivity tensor of element {k} is not positive "
                          f"definite (min eigenvalue {eigvals[k, 0]:.3e})")


# ---------------------------------------------------------------------------
# injection patterns


def _arc_averaging_matrix(mesh: Mesh, layout: ElectrodeLayout) -> np.ndarray:
    """Rows map nodal values to length-weighted arc averages, one per arc."""
    weights = np.zeros((layout.n_electrodes, mesh.n_nodes))
    lengths = mesh.boundary_edge_lengths
    for i, arc in enumerate(layout.arcs):
        arc_len = lengths[arc].sum()
        for e in arc:
            a, b = mesh.boundary_edges[e]
            w = 0.5 * lengths[e] / arc_len
            weights[i, a] += w
            weights[i, b] += w
    return weights


@dataclass(frozen=True)
class InjectionProtocol:
    """Adjacent-pair drive: pattern j feeds ``current`` into arc j and
    draws it from arc j+1 (cyclic), with uniform density on each arc."""

    n_patterns: int
    current: float = 1.0

    def load_matrix(self, mesh: Mesh, layout: ElectrodeLayout) -> np.ndarray:
        """All pattern load vectors, shape (N, n_nodes)."""
        if layout.n_electrodes != self.n_patterns:
            raise ValueError("protocol size does not match electrode layout")
        avg = _arc_averaging_matrix(mesh, layout)
        return self.current * (avg - np.roll(avg, -1, axis=0))

    def load_vector(self, mesh: Mesh, layout: ElectrodeLayout, j: int) -> np.ndarray:
        return self.load_matrix(mesh, layout)[j]


class _GaugedSolver:
    """Factorized Neumann solve with the zero-boundary-mean gauge.

    The singular conductivity system is bordered with the boundary-node
    indicator; compatible loads make the multiplier vanish, so the
    returned potential solves the original system exactly with
    ``sum(u[boundary]) = 0``.
    """

    def __init__(self, mesh: Mesh, gamma: ConductivityField):
        self.mesh = mesh
        self.matrix = stiffness_matrix(mesh, gamma.tensors)
        c = np.zeros(mesh.n_nodes)
        c[mesh.boundary_nodes] = 1.0
        bordered = sp.bmat([[self.matrix, c[:, None]], [c[None, :], None]],
                           format="csc")
        try:
            self._lu = spla.splu(bordered)
        except RuntimeError as exc:
            raise SolverError(f"factorization failed: {exc}") from exc

    def solve(self, loads: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
        """Solve for load rows (m, n_nodes); returns potentials (m, n_nodes)."""
        loads = np.atleast_2d(loads)
        rhs = np.hstack([loads, np.zeros((loads.shape[0], 1))])
        sol = self._lu.solve(rhs.T).T
        potentials = sol[:, :-1]
        for j, (u, b) in enumerate(zip(potentials, loads)):
            res = np.linalg.norm(self.matrix @ u - b)
            if res > rtol * max(np.linalg.norm(b), np.finfo(float).tiny):
                raise SolverError(
                    f"injection {j}: relative residual {res / np.linalg.norm(b):.2e} "
                    f"exceeds {rtol:.0e}")
        return potentials


def solve_injection(mesh: Mesh, layout: ElectrodeLayout, gamma: ConductivityField,
                    j: int, current: float = 1.0) -> np.ndarray:
    """Potential of a single adjacent-pair injection (gauged nodal values)."""
    protocol = InjectionProtocol(layout.n_electrodes, current)
    load = protocol.load_vector(mesh, layout, j)
    if abs(load.sum()) > 1e-12 * abs(current):
        raise ValueError(f"injection pattern {j} is not charge-compatible")
    return _GaugedSolver(mesh, gamma).solve(load)[0]


def solve_all_injections(mesh: Mesh, layout: ElectrodeLayout,
                         gamma: ConductivityField,
                         current: float = 1.0) -> np.ndarray:
    """Potentials of all N adjacent patterns, sharing one factorization.

    Returns shape (N, n_nodes).
    """
    protocol = InjectionProtocol(layout.n_electrodes, current)
    loads = protocol.load_matrix(mesh, layout)
    bad = np.abs(loads.sum(axis=1)).max()
    if bad > 1e-12 * abs(current):
        raise ValueError(f"injection patterns are not charge-compatible ({bad:.2e})")
    return _GaugedSolver(mesh, gamma).solve(loads)


def homogeneous_potentials(mesh: Mesh, layout: ElectrodeLayout,
                           current: float = 1.0) -> np.ndarray:
    """Potentials of the undeformed membrane (identity conductivity)."""
    gamma = ConductivityField.isotropic(np.ones(mesh.n_elements))
    return solve_all_injections(mesh, layout, gamma, current)


# ---------------------------------------------------------------------------
# voltage datasets


@dataclass(frozen=True)
class VoltageDataset:
    """N x N boundary voltage readings.

    Entry (i, j) is the i-th adjacent-pair voltage under the j-th
    injection. ``kind`` distinguishes absolute readings from differences
    against the undeformed baseline.
    """

    matrix: np.ndarray
    kind: str
    current: float
    noise_level: float = 0.0

    def __post_init__(self):
        self.matrix.setflags(write=False)
        if self.kind not in (ABSOLUTE, DIFFERENCE):
            raise ValueError(f"unknown dataset kind {self.kind!r}")

    @property
    def n_electrodes(self) -> int:
        return self.matrix.shape[0]

    @property
    def vector(self) -> np.ndarray:
        """Row-major flattening: measurement index varies slowest."""
        return self.matrix.reshape(-1)

    def reciprocity_gap(self) -> float:
        """Largest asymmetry relative to the largest entry."""
        scale = np.abs(self.matrix).max()
        if scale == 0.0:
            return 0.0
        return float(np.abs(self.matrix - self.matrix.T).max() / scale)


def measure_voltages(mesh: Mesh, layout: ElectrodeLayout, potentials: np.ndarray,
                     current: float = 1.0) -> VoltageDataset:
    """Assemble the absolute dataset from all N solved potentials.

    Entry (i, j) is ``current`` times the difference of arc averages of
    potential j over arcs i and i+1 (cyclic). The averaging weights match
    the injection loads, which makes reciprocity hold to solver precision.
    """
    avg = _arc_averaging_matrix(mesh, layout)
    arc_means = potentials @ avg.T                      # (N_inj, N_arc)
    matrix = current * (arc_means - np.roll(arc_means, -1, axis=1)).T
    return VoltageDataset(matrix=matrix, kind=ABSOLUTE, current=current)


def difference_data(measured: VoltageDataset, baseline: VoltageDataset) -> VoltageDataset:
    """Entrywise difference of two absolute datasets."""
    if measured.kind != ABSOLUTE or baseline.kind != ABSOLUTE:
        raise ValueError("difference_data expects two absolute datasets")
    if measured.matrix.shape != baseline.matrix.shape:
        raise ValueError("dataset sizes differ")
    return VoltageDataset(matrix=measured.matrix - baseline.matrix,
                          kind=DIFFERENCE, current=measured.current,
                          noise_level=measured.noise_level)


def add_noise(dataset: VoltageDataset, level: float, seed: int) -> VoltageDataset:
    """Add i.i.d. Gaussian noise with deviation ``level * max |entry|``."""
    if level < 0:
        raise ValueError("noise level must be non-negative")
    if level == 0.0:
        return dataset
    rng = np.random.default_rng(seed)
    scale = level * np.abs(dataset.matrix).max()
    noisy = dataset.matrix + rng.normal(0.0, scale, dataset.matrix.shape)
    return replace(dataset, matrix=noisy, noise_level=level)


def save_voltages_csv(dataset: VoltageDataset, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# eitpress-voltages kind={dataset.kind} "
                 f"n={dataset.n_electrodes} current={float(dataset.current)!r} "
                 f"noise={float(dataset.noise_level)!r}\n")
        for row in dataset.matrix:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_voltages_csv(path) -> VoltageDataset:
    with open(path) as fh:
        header = fh.readline().split()
        fields = dict(item.split("=") for item in header[2:])
        rows = [[float(v) for v in line.strip().split(",")]
                for line in fh if line.strip()]
    return VoltageDataset(matrix=np.array(rows), kind=fields["kind"],
                          current=float(fields["current"]),
                          noise_level=float(fields["noise"]))


def potential_gradients(mesh: Mesh, potentials: np.ndarray) -> np.ndarray:
    """Per-element gradients of stacked nodal potentials, shape (m, K, 2)."""
    return np.einsum("kad,mka->mkd", mesh.element_gradients,
                     np.atleast_2d(potentials)[:, mesh.elements])
