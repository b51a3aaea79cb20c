"""Triangular meshes of the square and disk with boundary electrodes.

Provides the P1 finite-element scaffolding shared by every solver in the
package: node coordinates, element connectivity, per-element constant
basis gradients, areas, centroids, the oriented boundary loop, electrode
arc placement, and sparse stiffness / load assembly.

Conventions
-----------
* Element node triples are counterclockwise (positive signed area).
* Boundary edges form a single closed loop traversed counterclockwise,
  so the outward normal of edge ``(a, b)`` is ``(t_y, -t_x)`` with
  ``t = (b - a) / |b - a|``.
* ``size`` is the side length for the square and the radius for the disk.
* All indices are 0-based.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

logger = logging.getLogger(__name__)

SQUARE = "square"
DISK = "disk"


@dataclass(frozen=True)
class Mesh:
    """Immutable triangulated domain with precomputed P1 geometry.

    Attributes
    ----------
    shape : str
        Domain kind, ``"square"`` or ``"disk"``.
    size : float
        Side length (square) or radius (disk) in domain units.
    nodes : ndarray, shape (n, 2)
        Node coordinates.
    elements : ndarray, shape (K, 3)
        Counterclockwise node triples.
    boundary_edges : ndarray, shape (E, 2)
        Directed boundary edges ordered as one counterclockwise loop
        starting at the reference node (lower-left corner for the
        square, the positive x-axis for the disk).
    element_areas : ndarray, shape (K,)
    element_gradients : ndarray, shape (K, 3, 2)
        Constant gradient of each of the three nodal basis functions.
    centroids : ndarray, shape (K, 2)
    h : float
        Nominal element side length (median edge length; equals the
        grid spacing for the structured square).
    """

    shape: str
    size: float
    nodes: np.ndarray
    elements: np.ndarray
    boundary_edges: np.ndarray
    element_areas: np.ndarray
    element_gradients: np.ndarray
    centroids: np.ndarray
    h: float

    def __post_init__(self):
        for arr in (self.nodes, self.elements, self.boundary_edges,
                    self.element_areas, self.element_gradients, self.centroids):
            arr.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def boundary_nodes(self) -> np.ndarray:
        """Boundary node ids in loop order."""
        return self.boundary_edges[:, 0]

    @property
    def interior_node_mask(self) -> np.ndarray:
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.boundary_nodes] = False
        return mask

    @property
    def boundary_edge_lengths(self) -> np.ndarray:
        a = self.nodes[self.boundary_edges[:, 0]]
        b = self.nodes[self.boundary_edges[:, 1]]
        return np.linalg.norm(b - a, axis=1)

    @property
    def perimeter(self) -> float:
        return float(self.boundary_edge_lengths.sum())

    def domain_area(self) -> float:
        """Analytic area of the ideal domain (not the polygonal mesh)."""
        if self.shape == SQUARE:
            return self.size ** 2
        return float(np.pi) * self.size ** 2

    def domain_diameter(self) -> float:
        if self.shape == SQUARE:
            return self.size * float(np.sqrt(2.0))
        return 2.0 * self.size

    def inradius(self) -> float:
        if self.shape == SQUARE:
            return self.size / 2.0
        return self.size

    def boundary_distance(self, points: np.ndarray) -> np.ndarray:
        """Distance from ``points`` to the ideal domain boundary."""
        p = np.atleast_2d(points)
        if self.shape == SQUARE:
            d = np.minimum(np.minimum(p[:, 0], self.size - p[:, 0]),
                           np.minimum(p[:, 1], self.size - p[:, 1]))
        else:
            d = self.size - np.hypot(p[:, 0], p[:, 1])
        return d if points.ndim > 1 else d[0]


@dataclass(frozen=True)
class ElectrodeLayout:
    """Contiguous electrode arcs on the boundary loop.

    ``arcs[i]`` holds the indices into ``mesh.boundary_edges`` covered by
    electrode ``i``; arcs are pairwise disjoint and ordered
    counterclockwise starting at the mesh reference node.
    """

    n_electrodes: int
    coverage: float
    arcs: tuple = field(repr=False)

    def arc_lengths(self, mesh: Mesh) -> np.ndarray:
        lens = mesh.boundary_edge_lengths
        return np.array([lens[idx].sum() for idx in self.arcs])

    def covered_length(self, mesh: Mesh) -> float:
        return float(self.arc_lengths(mesh).sum())


@dataclass(frozen=True)
class InteriorMask:
    """Flags for elements whose centroid stands off the boundary by > d0."""

    d0: float
    element_flags: np.ndarray

    def __post_init__(self):
        self.element_flags.setflags(write=False)

    @property
    def element_ids(self) -> np.ndarray:
        return np.nonzero(self.element_flags)[0]

    @property
    def count(self) -> int:
        return int(self.element_flags.sum())


# ---------------------------------------------------------------------------
# construction


def build_mesh(shape: str, target_k: int, size: float) -> Mesh:
    """Build a triangular mesh of the square or disk.

    Parameters
    ----------
    shape : {"square", "disk"}
    target_k : int
        Requested element count. The square requires ``target_k = 2*m**2``
        and is met exactly; the disk is met exactly by construction
        (concentric rings of near-uniform triangles).
    size : float
        Side length (square) or radius (disk).

    Returns
    -------
    Mesh
    """
    if size <= 0:
        raise ValueError(f"size must be positive, got {size}")
    if target_k < 8:
        raise ValueError(f"target_k must be at least 8, got {target_k}")
    if shape == SQUARE:
        nodes, elements = _square_grid(target_k, size)
    elif shape == DISK:
        nodes, elements = _disk_rings(target_k, size)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    mesh = _finish_mesh(shape, size, nodes, elements)
    logger.info("built %s mesh: K=%d, %d nodes, h=%.4g",
                shape, mesh.n_elements, mesh.n_nodes, mesh.h)
    return mesh


def _square_grid(target_k, size):
    m = int(round(np.sqrt(target_k / 2.0)))
    if 2 * m * m != target_k:
        raise ValueError(
            f"square mesh needs target_k = 2*m**2 for integer m; got {target_k}")
    step = size / m
    ix, iy = np.meshgrid(np.arange(m + 1), np.arange(m + 1), indexing="xy")
    nodes = np.column_stack([ix.ravel() * step, iy.ravel() * step])

    def nid(i, j):
        return j * (m + 1) + i

    elements = []
    for j in range(m):
        for i in range(m):
            a, b = nid(i, j), nid(i + 1, j)
            c, d = nid(i + 1, j + 1), nid(i, j + 1)
            elements.append((a, b, c))   # below the cell diagonal
            elements.append((a, c, d))   # above the cell diagonal
    return nodes, np.array(elements, dtype=np.int64)


def _disk_ring_counts(target_k, radius):
    """Ring node counts whose triangle total hits ``target_k`` exactly.

    With rings 1..M holding ``n_i`` nodes each, the fan plus the zipped
    annuli contain ``2*sum(n) - n_M`` triangles; bumping an inner ring
    changes the count by 2 and the outer ring by 1, so any target is
    reachable from the near-uniform profile.
    """
    h_eq = np.sqrt(4.0 * (np.pi * radius**2 / target_k) / np.sqrt(3.0))
    rings = max(2, int(round(radius / (h_eq * np.sqrt(3.0) / 2.0))))
    counts = [max(3, int(round(2.0 * np.pi * radius * i / (rings * h_eq))))
              for i in range(1, rings + 1)]

    def total(c):
        return 2 * sum(c) - c[-1]

    gap = target_k - total(counts)
    if gap % 2 != 0:
        counts[-1] += 1 if gap > 0 else -1
        gap = target_k - total(counts)
    step = 1 if gap > 0 else -1
    i = rings - 2
    while gap != 0:
        if counts[i] + step >= 3:
            counts[i] += step
            gap -= 2 * step
        i = rings - 2 if i <= 0 else i - 1
    if counts[-1] < 3 or min(counts) < 3:
        raise ValueError(f"target_k={target_k} too small for a disk mesh")
    return counts


def _disk_rings(target_k, radius):
    counts = _disk_ring_counts(target_k, radius)
    rings = len(counts)
    nodes = [(0.0, 0.0)]
    ring_start = []
    for i, n_i in enumerate(counts, start=1):
        ring_start.append(len(nodes))
        r = radius * i / rings
        theta = 2.0 * np.pi * np.arange(n_i) / n_i
        nodes.extend(zip(r * np.cos(theta), r * np.sin(theta)))
    nodes = np.array(nodes)

    elements = []
    first = ring_start[0]
    for j in range(counts[0]):
        elements.append((0, first + j, first + (j + 1) % counts[0]))
    for i in range(1, rings):
        inner, outer = ring_start[i - 1], ring_start[i]
        p, q = counts[i - 1], counts[i]
        a = b = 0
        while a < p or b < q:
            adv_inner = (b == q) or (a < p and (a + 1) / p < (b + 1) / q)
            if adv_inner:
                elements.append((inner + a % p, outer + b % q,
                                 inner + (a + 1) % p))
                a += 1
            else:
                elements.append((inner + a % p, outer + b % q,
                                 outer + (b + 1) % q))
                b += 1
    return nodes, np.array(elements, dtype=np.int64)


def _finish_mesh(shape, size, nodes, elements):
    areas, grads = p1_geometry(nodes, elements)
    if np.any(areas <= 0):
        bad = int(np.argmin(areas))
        raise ValueError(f"element {bad} has non-positive area {areas[bad]}")
    centroids = nodes[elements].mean(axis=1)
    boundary = _boundary_loop(nodes, elements, shape, size)
    h = _median_edge_length(nodes, elements)
    return Mesh(shape=shape, size=float(size), nodes=nodes,
                elements=elements, boundary_edges=boundary,
                element_areas=areas, element_gradients=grads,
                centroids=centroids, h=h)


def p1_geometry(nodes, elements):
    """Signed areas and the three P1 basis gradients per element."""
    p = nodes[elements]                      # (K, 3, 2)
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    areas = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    grads = np.empty((elements.shape[0], 3, 2))
    for a in range(3):
        b, c = (a + 1) % 3, (a + 2) % 3
        grads[:, a, 0] = p[:, b, 1] - p[:, c, 1]
        grads[:, a, 1] = p[:, c, 0] - p[:, b, 0]
    grads /= (2.0 * areas)[:, None, None]
    return areas, grads


def _median_edge_length(nodes, elements):
    edges = np.sort(np.concatenate([elements[:, [0, 1]],
                                    elements[:, [1, 2]],
                                    elements[:, [2, 0]]]), axis=1)
    edges = np.unique(edges, axis=0)
    lengths = np.linalg.norm(nodes[edges[:, 1]] - nodes[edges[:, 0]], axis=1)
    return float(np.median(lengths))


def _boundary_loop(nodes, elements, shape, size):
    directed = set()
    for a, b, c in elements:
        directed.update(((int(a), int(b)), (int(b), int(c)), (int(c), int(a))))
    succ = {}
    for a, b in directed:
        if (b, a) not in directed:
            if a in succ:
                raise ValueError(f"non-manifold boundary at node {a}")
            succ[a] = b
    if not succ:
        raise ValueError("mesh has no boundary")

    if shape == SQUARE:
        start = int(np.argmin(nodes[:, 0] + nodes[:, 1]))
    else:
        boundary_ids = np.fromiter(succ.keys(), dtype=np.int64)
        start = int(boundary_ids[np.argmax(nodes[boundary_ids, 0])])
    loop = [start]
    while True:
        nxt = succ[loop[-1]]
        if nxt == start:
            break
        loop.append(nxt)
        if len(loop) > len(succ):
            raise ValueError("boundary is not a single closed loop")
    if len(loop) != len(succ):
        raise ValueError("boundary has more than one loop")
    return np.array([(loop[i], loop[(i + 1) % len(loop)])
                     for i in range(len(loop))], dtype=np.int64)


# ---------------------------------------------------------------------------
# electrodes and interior mask


def place_electrodes(mesh: Mesh, n_electrodes: int, coverage: float) -> ElectrodeLayout:
    """Place equal, equally spaced electrode arcs on the boundary.

    Arc 0 starts at the mesh reference node; arcs proceed
    counterclockwise. Whole boundary edges are assigned so that arc
    lengths agree within one edge and the union covers
    ``coverage * perimeter`` to within one edge.
    """
    n_edges = mesh.boundary_edges.shape[0]
    if n_electrodes < 4:
        raise ValueError(f"need at least 4 electrodes, got {n_electrodes}")
    if not 0.0 < coverage <= 1.0:
        raise ValueError(f"coverage must lie in (0, 1], got {coverage}")
    if n_edges < 2 * n_electrodes:
        raise ValueError(
            f"boundary has {n_edges} edges; need at least {2 * n_electrodes}")
    total = int(round(coverage * n_edges))
    if total < n_electrodes:
        raise ValueError(
            f"coverage {coverage} leaves fewer than one edge per electrode")

    starts = [int(round(i * n_edges / n_electrodes)) for i in range(n_electrodes)]
    quota = [total * (i + 1) // n_electrodes - total * i // n_electrodes
             for i in range(n_electrodes)]
    arcs = []
    for i in range(n_electrodes):
        gap = (starts[(i + 1) % n_electrodes] - starts[i]) % n_edges or n_edges
        if quota[i] > gap:
            raise ValueError(
                f"coverage {coverage} too close to full for {n_electrodes} "
                f"electrodes on {n_edges} edges")
        arcs.append(np.arange(starts[i], starts[i] + quota[i]) % n_edges)

    layout = ElectrodeLayout(n_electrodes=n_electrodes, coverage=coverage,
                             arcs=tuple(arcs))
    lens = layout.arc_lengths(mesh)
    logger.debug("placed %d arcs: %d of %d edges, lengths %.4g..%.4g",
                 n_electrodes, total, n_edges, lens.min(), lens.max())
    return layout


def interior_mask(mesh: Mesh, d0: float) -> InteriorMask:
    """Flag elements whose centroid is farther than ``d0`` from the boundary."""
    if d0 < 0 or d0 >= mesh.inradius():
        raise ValueError(f"d0 must lie in [0, inradius={mesh.inradius()}), got {d0}")
    flags = mesh.boundary_distance(mesh.centroids) > d0
    if not flags.any():
        raise ValueError(f"no element centroid is farther than {d0} from the boundary")
    return InteriorMask(d0=float(d0), element_flags=flags)


# ---------------------------------------------------------------------------
# P1 assembly


def stiffness_matrix(mesh: Mesh, coefficient=None) -> sp.csr_matrix:
    """Assemble the P1 stiffness matrix over all nodes.

    Parameters
    ----------
    coefficient : None, (K,) array, or (K, 2, 2) array
        Per-element diffusion tensor: identity, isotropic scalar, or a
        full symmetric 2x2 tensor.
    """
    g = mesh.element_gradients
    if coefficient is None:
        local = np.einsum("kad,kbd->kab", g, g)
    else:
        coefficient = np.asarray(coefficient, dtype=float)
        if coefficient.ndim == 1:
            local = coefficient[:, None, None] * np.einsum("kad,kbd->kab", g, g)
        else:
            local = np.einsum("kad,kde,kbe->kab", g, coefficient, g)
    local = local * mesh.element_areas[:, None, None]
    rows = np.repeat(mesh.elements, 3, axis=1).reshape(-1)
    cols = np.tile(mesh.elements, (1, 3)).reshape(-1)
    mat = sp.coo_matrix((local.reshape(-1), (rows, cols)),
                        shape=(mesh.n_nodes, mesh.n_nodes))
    return mat.tocsr()


def load_vector(mesh: Mesh, cell_values) -> np.ndarray:
    """Load vector of a piecewise-constant right-hand side: each element
    contributes ``value * area / 3`` to its three nodes."""
    cell_values = np.asarray(cell_values, dtype=float)
    b = np.zeros(mesh.n_nodes)
    contrib = cell_values * mesh.element_areas / 3.0
    np.add.at(b, mesh.elements[:, 0], contrib)
    np.add.at(b, mesh.elements[:, 1], contrib)
    np.add.at(b, mesh.elements[:, 2], contrib)
    return b


class DirichletSolver:
    """Factorized zero-Dirichlet solve, reusable across right-hand sides.

    Solves ``K u = b`` on interior nodes with ``u = 0`` on the boundary,
    for the stiffness matrix of the given coefficient.
    """

    def __init__(self, mesh: Mesh, coefficient=None, *, matrix=None):
        self.mesh = mesh
        self.interior = np.nonzero(mesh.interior_node_mask)[0]
        if matrix is None:
            matrix = stiffness_matrix(mesh, coefficient)
        sub = matrix[self.interior][:, self.interior].tocsc()
        self._lu = spla.splu(sub)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve for full nodal right-hand side(s); returns full nodal values
        (zeros on boundary). ``rhs`` may be (n,) or (n, m)."""
        squeeze = rhs.ndim == 1
        rhs = rhs.reshape(self.mesh.n_nodes, -1)
        sol = self._lu.solve(np.ascontiguousarray(rhs[self.interior]))
        full = np.zeros((self.mesh.n_nodes, rhs.shape[1]))
        full[self.interior] = sol
        return full[:, 0] if squeeze else full


# ---------------------------------------------------------------------------
# plain-text serialization


def save_mesh(mesh: Mesh, path, layout: ElectrodeLayout | None = None) -> None:
    """Write the mesh (and optionally electrode arcs) as plain text."""
    lines = ["eitpress-mesh 1",
             f"shape {mesh.shape}",
             f"size {float(mesh.size)!r}",
             f"h {float(mesh.h)!r}",
             f"nodes {mesh.n_nodes}"]
    lines += [f"{float(x)!r} {float(y)!r}" for x, y in mesh.nodes]
    lines.append(f"elements {mesh.n_elements}")
    lines += [f"{a} {b} {c}" for a, b, c in mesh.elements]
    lines.append(f"boundary_edges {mesh.boundary_edges.shape[0]}")
    lines += [f"{a} {b}" for a, b in mesh.boundary_edges]
    if layout is not None:
        lines.append(f"electrodes {layout.n_electrodes} {float(layout.coverage)!r}")
        lines += [" ".join(str(e) for e in arc) for arc in layout.arcs]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_mesh(path):
    """Read a mesh written by :func:`save_mesh`.

    Returns ``(mesh, layout)`` with ``layout`` None when absent.
    """
    with open(path) as fh:
        tokens = [line.split() for line in fh if line.strip()]
    if tokens[0][0] != "eitpress-mesh":
        raise ValueError(f"{path} is not an eitpress mesh file")
    shape, size, h = tokens[1][1], float(tokens[2][1]), float(tokens[3][1])
    pos = 4
    n = int(tokens[pos][1]); pos += 1
    nodes = np.array([[float(t[0]), float(t[1])] for t in tokens[pos:pos + n]])
    pos += n
    k = int(tokens[pos][1]); pos += 1
    elements = np.array([[int(t[0]), int(t[1]), int(t[2])]
                         for t in tokens[pos:pos + k]], dtype=np.int64)
    pos += k
    e = int(tokens[pos][1]); pos += 1
    boundary = np.array([[int(t[0]), int(t[1])] for t in tokens[pos:pos + e]],
                        dtype=np.int64)
    pos += e
    layout = None
    if pos < len(tokens) and tokens[pos][0] == "electrodes":
        n_el, coverage = int(tokens[pos][1]), float(tokens[pos][2])
        pos += 1
        arcs = tuple(np.array([int(x) for x in t], dtype=np.int64)
                     for t in tokens[pos:pos + n_el])
        layout = ElectrodeLayout(n_electrodes=n_el, coverage=coverage, arcs=arcs)

    areas, grads = p1_geometry(nodes, elements)
    centroids = nodes[elements].mean(axis=1)
    mesh = Mesh(shape=shape, size=size, nodes=nodes, elements=elements,
                boundary_edges=boundary, element_areas=areas,
                element_gradients=grads, centroids=centroids, h=h)
    return mesh, layout
