"""Pressure recovery from the reduced sensitivity system.

The ridge-regularized normal equations are solved exactly through their
dual form: with far fewer measurement rows than pair columns, the
N^2 x N^2 Gram system replaces the column-sized one at no loss. Pressure
magnitudes come from the square roots of the diagonal-pair components,
negatives truncated to zero. A linearized isotropic difference imager
serves as the conventional-EIT baseline, and a scoring helper compares
reconstructions against known pressure fields.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve, eigh
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .meshing import InteriorMask, Mesh
from .membrane import PressureField
from .forward import VoltageDataset, DIFFERENCE
from .sensitivity import SensitivitySystem

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class QuadraticUnknown:
    """Solution of the reduced system over retained element pairs."""

    values: np.ndarray
    pair_map: np.ndarray
    beta: float
    residual: float
    solve_seconds: float

    def __post_init__(self):
        self.values.setflags(write=False)


@dataclass(frozen=True)
class ReconstructionResult:
    """Per-element reconstruction with solve diagnostics.

    ``values`` holds nonnegative pressure magnitudes for the quadratic
    method; for the conventional baseline (``baseline=True``) it holds the
    signed isotropic conductivity perturbation instead.
    """

    values: np.ndarray
    beta: float
    residual: float
    truncated_negatives: int
    solve_seconds: float
    baseline: bool = False

    def __post_init__(self):
        self.values.setflags(write=False)


def _dataset_vector(system_rows: int, dataset: VoltageDataset) -> np.ndarray:
    if dataset.kind != DIFFERENCE:
        raise ValueError("inversion expects a difference dataset")
    w = dataset.vector
    if w.size != system_rows:
        raise ValueError(f"dataset has {w.size} entries, system has "
                         f"{system_rows} rows")
    return w


def solve_reduced(system: SensitivitySystem, dataset: VoltageDataset,
                  beta: float) -> QuadraticUnknown:
    """Solve ``(S^T S + sqrt(beta) I) q = S^T w`` through the dual system.

    The identity ``q = S^T (S S^T + sqrt(beta) I)^{-1} w`` is an exact
    reformulation whenever ``beta > 0``; only the Gram matrix of the
    measurement rows is ever factorized.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    w = _dataset_vector(system.n_rows, dataset)
    start = time.perf_counter()
    gram = system.entries @ system.entries.T
    shift = np.sqrt(beta)
    gram[np.diag_indices_from(gram)] += shift
    y = cho_solve(cho_factor(gram), w)
    q = system.entries.T @ y
    # S q - w = (G + shift I) y - shift y - w = -shift y
    residual = shift * float(np.linalg.norm(y))
    elapsed = time.perf_counter() - start
    logger.info("reduced solve: %d columns, beta=%.3e, residual=%.3e (%.2fs)",
                system.n_columns, beta, residual, elapsed)
    return QuadraticUnknown(values=q, pair_map=system.pair_map, beta=float(beta),
                            residual=residual, solve_seconds=elapsed)


def _gram_spectrum(system: SensitivitySystem, dataset: VoltageDataset):
    w = _dataset_vector(system.n_rows, dataset)
    lam, vec = eigh(system.entries @ system.entries.T)
    return np.maximum(lam, 0.0), vec.T @ w


def residual_curve(system: SensitivitySystem, dataset: VoltageDataset,
                   betas) -> np.ndarray:
    """Data residual ``|S q(beta) - w|`` for many regularization weights.

    One eigendecomposition of the Gram matrix prices every beta at O(n^2).
    """
    lam, proj = _gram_spectrum(system, dataset)
    return np.array([np.linalg.norm(np.sqrt(b) * proj / (lam + np.sqrt(b)))
                     for b in np.atleast_1d(betas)])


def choose_beta_discrepancy(system: SensitivitySystem, dataset: VoltageDataset,
                            target_residual: float,
                            bracket=(1e-30, 1e8), iterations: int = 200) -> float:
    """Bisect for the weight whose data residual matches ``target_residual``.

    The residual grows monotonically with beta; if the target is
    unreachable the nearer bracket end is returned.
    """
    lam, proj = _gram_spectrum(system, dataset)

    def res(beta):
        s = np.sqrt(beta)
        return np.linalg.norm(s * proj / (lam + s))

    lo, hi = bracket
    if res(lo) >= target_residual:
        return lo
    if res(hi) <= target_residual:
        return hi
    for _ in range(iterations):
        mid = np.sqrt(lo * hi)
        if res(mid) < target_residual:
            lo = mid
        else:
            hi = mid
        if hi / lo < 1.0 + 1e-9:
            break
    return float(np.sqrt(lo * hi))


def extract_pressure(q: QuadraticUnknown, mask: InteriorMask) -> ReconstructionResult:
    """Square-root the diagonal-pair components into pressure magnitudes.

    Negative diagonal values are truncated to zero and counted.
    Off-diagonal components only stabilize the solve; they are ignored
    here. The method is blind to the pressure sign by construction.
    """
    diag_cols = np.nonzero(q.pair_map[:, 0] == q.pair_map[:, 1])[0]
    diag_elements = q.pair_map[diag_cols, 0]
    missing = np.setdiff1d(mask.element_ids, diag_elements)
    if missing.size:
        raise ValueError(f"system lacks diagonal pairs for elements {missing[:5]}...")
    values = np.zeros(mask.element_flags.size)
    diag = q.values[diag_cols]
    values[diag_elements] = np.sqrt(np.maximum(diag, 0.0))
    return ReconstructionResult(values=values, beta=q.beta, residual=q.residual,
                                truncated_negatives=int((diag < 0).sum()),
                                solve_seconds=q.solve_seconds)


def conventional_recon(dataset: VoltageDataset, mesh: Mesh, u0_gradients: np.ndarray,
                       beta: float) -> ReconstructionResult:
    """Linearized isotropic difference imaging (conventional-EIT baseline).

    Per-element sensitivity ``-area * grad(u0_i) . grad(u0_j)`` feeds the
    same ridge-regularized dual solve as the quadratic method; the result
    is a signed conductivity perturbation with no square-root step.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    w = _dataset_vector(u0_gradients.shape[0] ** 2, dataset)
    start = time.perf_counter()
    n = u0_gradients.shape[0]
    jac = -np.einsum("ikd,jkd->ijk", u0_gradients,
                     u0_gradients * mesh.element_areas[None, :, None])
    jac = jac.reshape(n * n, mesh.n_elements)
    gram = jac @ jac.T
    gram[np.diag_indices_from(gram)] += np.sqrt(beta)
    y = cho_solve(cho_factor(gram), w)
    sigma = jac.T @ y
    residual = float(np.linalg.norm(jac @ sigma - w))
    elapsed = time.perf_counter() - start
    return ReconstructionResult(values=sigma, beta=float(beta), residual=residual,
                                truncated_negatives=0, solve_seconds=elapsed,
                                baseline=True)


# ---------------------------------------------------------------------------
# scoring


def _element_adjacency(mesh: Mesh) -> sp.csr_matrix:
    edges = {}
    pairs = []
    for k, (a, b, c) in enumerate(mesh.elements):
        for e in ((a, b), (b, c), (c, a)):
            key = (min(e), max(e))
            if key in edges:
                pairs.append((edges[key], k))
            else:
                edges[key] = k
    if not pairs:
        return sp.csr_matrix((mesh.n_elements, mesh.n_elements))
    pairs = np.array(pairs)
    data = np.ones(len(pairs))
    mat = sp.coo_matrix((data, (pairs[:, 0], pairs[:, 1])),
                        shape=(mesh.n_elements, mesh.n_elements))
    return (mat + mat.T).tocsr()


def score(result: ReconstructionResult, truth: PressureField, mesh: Mesh,
          support_fraction: float = 0.5) -> dict:
    """Compare a reconstruction against a known pressure field.

    Returns support intersection-over-union at the half-maximum
    threshold, the relative magnitude error over the true support, and
    the center-of-mass error of each connected true component (elements
    are attributed to their nearest component).
    """
    pred = np.abs(result.values)
    true_mag = np.abs(truth.values)
    areas = mesh.element_areas
    true_support = true_mag > 0
    pred_support = (pred >= support_fraction * pred.max()) if pred.max() > 0 \
        else np.zeros_like(true_support)

    inter = areas[true_support & pred_support].sum()
    union = areas[true_support | pred_support].sum()
    if union == 0:
        iou = 1.0
    else:
        iou = float(inter / union)

    if true_support.any():
        diff2 = (areas * (pred - true_mag) ** 2)[true_support].sum()
        ref2 = (areas * true_mag ** 2)[true_support].sum()
        mag_err = float(np.sqrt(diff2 / ref2))
    else:
        mag_err = float("nan")

    com_errors = []
    if true_support.any():
        adjacency = _element_adjacency(mesh)[true_support][:, true_support]
        n_comp, labels = connected_components(adjacency, directed=False)
        support_ids = np.nonzero(true_support)[0]
        trees = []
        for comp in range(n_comp):
            members = support_ids[labels == comp]
            trees.append(cKDTree(mesh.centroids[members]))
        nearest = np.array([min(range(n_comp),
                                key=lambda c: trees[c].query(z)[0])
                            for z in mesh.centroids])
        for comp in range(n_comp):
            members = support_ids[labels == comp]
            w_true = areas[members] * true_mag[members]
            com_true = (mesh.centroids[members] * w_true[:, None]).sum(0) / w_true.sum()
            zone = nearest == comp
            w_pred = areas[zone] * pred[zone]
            if w_pred.sum() == 0:
                com_errors.append(float("inf"))
                continue
            com_pred = (mesh.centroids[zone] * w_pred[:, None]).sum(0) / w_pred.sum()
            com_errors.append(float(np.linalg.norm(com_pred - com_true)))
    else:
        n_comp = 0

    return {"iou": iou, "magnitude_rel_error": mag_err,
            "component_com_errors": com_errors, "n_components": int(n_comp)}


# ---------------------------------------------------------------------------
# raster export


def rasterize(mesh: Mesh, values: np.ndarray, resolution: int = 128) -> np.ndarray:
    """Sample a per-element field on a regular grid over the bounding box.

    Points outside the domain get 0. Rows run top to bottom so the array
    prints like an image.
    """
    lo = mesh.nodes.min(axis=0)
    hi = mesh.nodes.max(axis=0)
    xs = lo[0] + (np.arange(resolution) + 0.5) / resolution * (hi[0] - lo[0])
    ys = lo[1] + (np.arange(resolution) + 0.5) / resolution * (hi[1] - lo[1])
    gx, gy = np.meshgrid(xs, ys[::-1])
    points = np.column_stack([gx.ravel(), gy.ravel()])

    tree = cKDTree(mesh.centroids)
    _, cand = tree.query(points, k=min(12, mesh.n_elements))
    cand = np.atleast_2d(cand)
    corners = mesh.nodes[mesh.elements]
    out = np.zeros(points.shape[0])
    for row, p in enumerate(points):
        for k in cand[row]:
            a, b, c = corners[k]
            d = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1])
            l1 = ((b[1] - c[1]) * (p[0] - c[0]) + (c[0] - b[0]) * (p[1] - c[1])) / d
            l2 = ((c[1] - a[1]) * (p[0] - c[0]) + (a[0] - c[0]) * (p[1] - c[1])) / d
            l3 = 1.0 - l1 - l2
            if min(l1, l2, l3) >= -1e-12:
                out[row] = values[k]
                break
    return out.reshape(resolution, resolution)


def write_pgm(mesh: Mesh, values: np.ndarray, path, resolution: int = 128) -> None:
    """Write a grayscale raster of a per-element field (plain-text PGM)."""
    img = rasterize(mesh, values, resolution)
    top = img.max()
    scaled = np.zeros_like(img, dtype=np.int64) if top <= 0 else \
        np.rint(255.0 * np.clip(img, 0.0, None) / top).astype(np.int64)
    with open(path, "w") as fh:
        fh.write(f"P2\n{resolution} {resolution}\n255\n")
        for row in scaled:
            fh.write(" ".join(str(v) for v in row) + "\n")
