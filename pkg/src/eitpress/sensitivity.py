"""Quadratic sensitivity of the voltage differences to pressure products.

For every interior element a unit-source basis solution is computed once
(`-laplace(v_k) = indicator of element k`, zero boundary values). The
dataset perturbation is, to leading order, a quadratic form in the
element pressures whose coefficients couple pairs of basis gradients with
pairs of undeformed injection potentials. Stacking the pair products as
unknowns turns the quadratic model into one linear system; columns whose
element pair is farther apart than a radius ``delta`` contribute little
and are dropped, leaving the reduced system solved by the inversion
module.

All integrands are constant per element under P1, so every entry is an
exact area-weighted sum, not a numerical quadrature.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .meshing import DirichletSolver, InteriorMask, Mesh, load_vector

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BasisBank:
    """Unit-source solutions for every interior element.

    Attributes
    ----------
    element_ids : ndarray (K_int,)
        Global ids of the interior elements, in mask order.
    nodal_values : ndarray (K_int, n_nodes)
        Basis solutions (zero on the boundary).
    gradients : ndarray (K_int, K, 2)
        Per-element constant gradients of each basis solution.
    """

    element_ids: np.ndarray
    nodal_values: np.ndarray
    gradients: np.ndarray

    def __post_init__(self):
        for arr in (self.element_ids, self.nodal_values, self.gradients):
            arr.setflags(write=False)

    @property
    def count(self) -> int:
        return self.element_ids.size


def build_basis(mesh: Mesh, mask: InteriorMask) -> BasisBank:
    """Solve one unit-source problem per interior element.

    All solves share a single factorization of the Dirichlet Laplacian.
    """
    ids = mask.element_ids
    if ids.size == 0:
        raise ValueError("interior mask is empty")
    solver = DirichletSolver(mesh)
    loads = np.zeros((mesh.n_nodes, ids.size))
    for col, k in enumerate(ids):
        loads[mesh.elements[k], col] = mesh.element_areas[k] / 3.0
    nodal = solver.solve(loads).T
    grads = np.einsum("kad,mka->mkd", mesh.element_gradients, nodal[:, mesh.elements])
    logger.info("basis bank: %d solutions on %d nodes", ids.size, mesh.n_nodes)
    return BasisBank(element_ids=ids, nodal_values=nodal, gradients=grads)


def pair_distance(mesh: Mesh, k: int, ell: int) -> float:
    """Distance between the centroids of elements ``k`` and ``ell``."""
    return float(np.linalg.norm(mesh.centroids[k] - mesh.centroids[ell]))


def retained_pairs(mesh: Mesh, mask: InteriorMask, delta: float,
                   merge_pairs: bool = False) -> np.ndarray:
    """Element pairs kept at reduction radius ``delta``, in column order.

    Diagonal pairs (k, k) come first ordered by element id, then
    off-diagonal pairs with centroid distance at most ``delta`` in
    lexicographic order. With ``merge_pairs`` only (k, ell) with
    k < ell is kept, standing for both orders.
    """
    if delta < 0:
        raise ValueError("delta must be non-negative")
    ids = mask.element_ids
    z = mesh.centroids[ids]
    dist = np.linalg.norm(z[:, None, :] - z[None, :, :], axis=2)
    keep = dist <= delta
    np.fill_diagonal(keep, True)
    diag = np.column_stack([ids, ids])
    a, b = np.nonzero(keep)
    off = a != b
    if merge_pairs:
        off &= a < b
    pairs = np.column_stack([ids[a[off]], ids[b[off]]])
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return np.vstack([diag, pairs[order]])


@dataclass(frozen=True)
class SensitivitySystem:
    """Reduced linear model mapping pair products to voltage differences.

    Row ``i * N + j`` holds the coefficient of measurement i under
    injection j; column ``c`` corresponds to the element pair
    ``pair_map[c]``. Entries are symmetrized over both the measurement
    pair and the element pair, and merged columns carry doubled entries.
    """

    entries: np.ndarray
    pair_map: np.ndarray
    delta: float
    merged: bool
    n_patterns: int

    def __post_init__(self):
        self.entries.setflags(write=False)
        self.pair_map.setflags(write=False)

    @property
    def n_rows(self) -> int:
        return self.entries.shape[0]

    @property
    def n_columns(self) -> int:
        return self.entries.shape[1]

    @property
    def diagonal_columns(self) -> np.ndarray:
        """Positions of the (k, k) columns, ordered by element id."""
        return np.nonzero(self.pair_map[:, 0] == self.pair_map[:, 1])[0]


def assemble_sensitivity(mesh: Mesh, basis: BasisBank, u0_gradients: np.ndarray,
                         delta: float, mask: InteriorMask | None = None,
                         merge_pairs: bool = False,
                         chunk_columns: int = 2048) -> SensitivitySystem:
    """Assemble the reduced sensitivity system for radius ``delta``.

    Parameters
    ----------
    u0_gradients : ndarray (N, K, 2)
        Element gradients of the undeformed injection potentials.
    mask : InteriorMask, optional
        Defaults to the mask implied by the basis bank's element ids.
    merge_pairs : bool
        Merge the two orders of each off-diagonal pair into one column
        with doubled entries.
    """
    ids = basis.element_ids
    if mask is None:
        flags = np.zeros(mesh.n_elements, dtype=bool)
        flags[ids] = True
        mask = InteriorMask(d0=0.0, element_flags=flags)
    pairs = retained_pairs(mesh, mask, delta, merge_pairs)
    if pairs.size == 0:
        raise ValueError("no element pairs retained")

    n = u0_gradients.shape[0]
    k_int = ids.size
    # dot[k, i, e] = grad(v_k) . grad(u0_i) on element e
    dot = np.ascontiguousarray(
        np.einsum("ied,ked->kie", u0_gradients, basis.gradients))
    weighted = dot * mesh.element_areas[None, None, :]
    col_of = np.full(mesh.n_elements, -1)
    col_of[ids] = np.arange(k_int)

    # With the full cross table affordable, one BLAS product covers every
    # pair and columns are gathered from it; otherwise pairs are built in
    # batched chunks.
    table = None
    if (k_int * n) ** 2 * 8 <= 1.2e9:
        flat_w = weighted.reshape(k_int * n, -1)
        flat_d = dot.reshape(k_int * n, -1)
        table = (flat_w @ flat_d.T).reshape(k_int, n, k_int, n)

    entries = np.empty((n * n, pairs.shape[0]))
    for lo in range(0, pairs.shape[0], chunk_columns):
        chunk = pairs[lo:lo + chunk_columns]
        kk = col_of[chunk[:, 0]]
        ll = col_of[chunk[:, 1]]
        if table is not None:
            raw = table[ll, :, kk, :]                              # (C, N, N)
        else:
            raw = np.matmul(weighted[ll], dot[kk].transpose(0, 2, 1))
        sym = 0.5 * (raw + raw.transpose(0, 2, 1))
        if merge_pairs:
            sym[chunk[:, 0] != chunk[:, 1]] *= 2.0
        entries[:, lo:lo + chunk.shape[0]] = sym.reshape(chunk.shape[0], -1).T
    logger.info("sensitivity system: %d x %d (delta=%.4g, merged=%s)",
                n * n, pairs.shape[0], delta, merge_pairs)
    return SensitivitySystem(entries=entries, pair_map=pairs, delta=float(delta),
                             merged=merge_pairs, n_patterns=n)


def quadratic_form(system: SensitivitySystem, pressures: np.ndarray) -> np.ndarray:
    """Apply the system to the pair products of a pressure vector.

    Returns the modeled voltage-difference vector for per-element
    pressures ``pressures`` (length K, zero outside the mask).
    """
    k, ell = system.pair_map[:, 0], system.pair_map[:, 1]
    q = pressures[k] * pressures[ell]
    return system.entries @ q


def pair_entry_maxima(mesh: Mesh, basis: BasisBank, u0_gradients: np.ndarray,
                      dtype=np.float32, chunk: int = 64) -> np.ndarray:
    """Largest sensitivity magnitude over all measurement pairs, for every
    element pair; used to study decay with pair distance.

    Computed in reduced precision by default: the full table for K
    interior elements holds (N*K)^2 products.
    """
    n, k_int = u0_gradients.shape[0], basis.count
    dot = np.einsum("ied,ked->ike", u0_gradients, basis.gradients).astype(dtype)
    flat = dot.reshape(n * k_int, -1)
    gram = (flat * mesh.element_areas.astype(dtype)) @ flat.T
    four = gram.reshape(n, k_int, n, k_int)
    out = np.empty((k_int, k_int), dtype=dtype)
    for lo in range(0, k_int, chunk):
        hi = min(lo + chunk, k_int)
        block = 0.5 * (four[:, :, :, lo:hi]
                       + four[:, lo:hi, :, :].transpose(0, 3, 2, 1))
        out[:, lo:hi] = np.abs(block).max(axis=(0, 2))
    return out


def decay_profile(mesh: Mesh, basis: BasisBank, maxima: np.ndarray,
                  n_bins: int = 8):
    """Bin the pairwise maxima by centroid distance.

    Returns (bin_edges, per-bin max); empty bins carry NaN.
    """
    z = mesh.centroids[basis.element_ids]
    dist = np.linalg.norm(z[:, None, :] - z[None, :, :], axis=2).ravel()
    vals = np.asarray(maxima, dtype=float).ravel()
    edges = np.linspace(0.0, dist.max() * (1 + 1e-12), n_bins + 1)
    which = np.clip(np.digitize(dist, edges) - 1, 0, n_bins - 1)
    out = np.full(n_bins, np.nan)
    for b in range(n_bins):
        sel = which == b
        if sel.any():
            out[b] = vals[sel].max()
    return edges, out


# ---------------------------------------------------------------------------
# serialization


def save_sensitivity(system: SensitivitySystem, base_path, payload: str = "binary") -> None:
    """Write meta header, pair map CSV, and the entry payload.

    ``payload="binary"`` stores little-endian float64 in column-major
    order in ``<base>.entries.bin``; ``payload="csv"`` writes one row per
    system row to ``<base>.entries.csv`` (intended for small systems).
    """
    base = Path(base_path)
    meta = {"rows": system.n_rows, "columns": system.n_columns,
            "delta": system.delta, "merged": system.merged,
            "n_patterns": system.n_patterns, "payload": payload}
    base.with_suffix(".meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    with open(base.with_suffix(".pairs.csv"), "w") as fh:
        fh.write("column,k,ell\n")
        for c, (k, ell) in enumerate(system.pair_map):
            fh.write(f"{c},{k},{ell}\n")
    if payload == "binary":
        data = np.asarray(system.entries, dtype="<f8").ravel(order="F")
        data.tofile(base.with_suffix(".entries.bin"))
    elif payload == "csv":
        with open(base.with_suffix(".entries.csv"), "w") as fh:
            for row in system.entries:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
    else:
        raise ValueError(f"unknown payload format {payload!r}")


def load_sensitivity(base_path) -> SensitivitySystem:
    base = Path(base_path)
    meta = json.loads(base.with_suffix(".meta.json").read_text())
    pairs = np.loadtxt(base.with_suffix(".pairs.csv"), delimiter=",",
                       skiprows=1, dtype=np.int64, ndmin=2)[:, 1:]
    shape = (meta["rows"], meta["columns"])
    if meta["payload"] == "binary":
        data = np.fromfile(base.with_suffix(".entries.bin"), dtype="<f8")
        entries = data.reshape(shape, order="F")
    else:
        entries = np.loadtxt(base.with_suffix(".entries.csv"), delimiter=",",
                             ndmin=2)
    return SensitivitySystem(entries=entries, pair_map=pairs,
                             delta=float(meta["delta"]), merged=meta["merged"],
                             n_patterns=meta["n_patterns"])
