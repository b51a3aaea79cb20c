"""Scenario-driven pipeline runs: simulate, reconstruct, report, verify.

A scenario is a JSON file with explicit keys describing the domain, the
electrode belt, the applied pressure patches, and the reconstruction
parameters. ``run_simulate`` produces the voltage artifacts,
``run_reconstruct`` inverts a difference dataset and scores it against
the scenario's own ground truth, ``run_table1`` reports reduced-system
sizes, and ``run_verify`` executes the cross-module invariant checks.

Every run writes a ``manifest.json`` listing its artifacts with SHA-256
digests; manifests contain no timestamps or timings, so identical
scenario + seed give byte-identical manifests. Wall-clock timings go to
an unhashed ``timings.json`` sidecar.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import forward, inversion, membrane, meshing, sensitivity

logger = logging.getLogger(__name__)

DEFAULT_NOISELESS_RESIDUAL_FRACTION = 1e-3

TABLE1_PAPER = {
    "square": {"target_k": 512, "size": 1.0, "zero": 512,
               "five_h": 28018, "full": 262144},
    "disk": {"target_k": 661, "size": 5.0, "zero": 661,
             "five_h": 43814, "full": 436921},
}


@dataclass(frozen=True)
class Scenario:
    """Complete description of one simulation/reconstruction case."""

    name: str
    shape: str
    size: float
    target_k: int
    n_electrodes: int = 16
    coverage: float = 0.5
    d0: float = 0.0
    pressure: tuple = ()
    target_slope: float | None = 0.2
    delta_h: float = 5.0
    beta: float | None = None
    noise: float = 0.0
    seed: int = 0
    current: float = 1.0
    merge_pairs: bool = False

    def to_dict(self) -> dict:
        out = asdict(self)
        out["pressure"] = [dict(p) for p in self.pressure]
        return out


def load_scenario(path) -> Scenario:
    raw = json.loads(Path(path).read_text())
    raw["pressure"] = tuple(raw.get("pressure", ()))
    return Scenario(**raw)


def save_scenario(scenario: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario.to_dict(), sort_keys=True, indent=2))


def _patch_membership(mesh: meshing.Mesh, patch: dict) -> np.ndarray:
    c = mesh.centroids
    if patch["kind"] == "rect":
        return ((c[:, 0] >= patch["x0"]) & (c[:, 0] <= patch["x1"])
                & (c[:, 1] >= patch["y0"]) & (c[:, 1] <= patch["y1"]))
    if patch["kind"] == "disk":
        return np.hypot(c[:, 0] - patch["cx"], c[:, 1] - patch["cy"]) <= patch["radius"]
    raise ValueError(f"unknown patch kind {patch['kind']!r}")


@dataclass(frozen=True)
class ScenarioBundle:
    """Mesh, electrodes, mask, and scaled ground-truth pressure."""

    mesh: meshing.Mesh
    layout: meshing.ElectrodeLayout
    mask: meshing.InteriorMask
    truth: membrane.PressureField
    pressure_scale: float


def build_scenario(scenario: Scenario) -> ScenarioBundle:
    """Instantiate the scenario geometry and its ground-truth pressure.

    When ``target_slope`` is set, one pilot membrane solve calibrates the
    pressure magnitude so the deflection slope peaks near the target
    (the small-slope regime the data model assumes).
    """
    mesh = meshing.build_mesh(scenario.shape, scenario.target_k, scenario.size)
    layout = meshing.place_electrodes(mesh, scenario.n_electrodes, scenario.coverage)
    mask = meshing.interior_mask(mesh, scenario.d0)
    values = np.zeros(mesh.n_elements)
    for patch in scenario.pressure:
        inside = _patch_membership(mesh, patch)
        if not inside.any():
            raise ValueError(f"pressure patch {patch} covers no element")
        if np.any(inside & ~mask.element_flags):
            raise ValueError(f"pressure patch {patch} leaves the interior region")
        values[inside] = patch["magnitude"]
    truth = membrane.PressureField(values, mask)
    scale = 1.0
    if scenario.target_slope is not None and np.any(values != 0.0):
        pilot = membrane.solve_membrane(mesh, truth, slope_limit=np.inf)
        if pilot.max_slope > 0:
            scale = scenario.target_slope / pilot.max_slope
            truth = truth.scaled(scale)
    return ScenarioBundle(mesh=mesh, layout=layout, mask=mask, truth=truth,
                          pressure_scale=scale)


# ---------------------------------------------------------------------------
# manifests


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    digest.update(path.read_bytes())
    return digest.hexdigest()


def _write_manifest(out_dir: Path, command: str, scenario: Scenario,
                    derived: dict, artifacts: list, volatile=()) -> dict:
    entries = [{"name": name, "file": fname, "sha256": _sha256(out_dir / fname)}
               for name, fname in artifacts]
    entries += [{"name": name, "file": fname, "volatile": True}
                for name, fname in volatile]
    manifest = {"command": command, "scenario": scenario.to_dict(),
                "derived": derived, "artifacts": entries}
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2))
    return manifest


# ---------------------------------------------------------------------------
# simulate


def run_simulate(scenario: Scenario, out_dir) -> dict:
    """Forward pipeline: membrane solve, conductivity, N+N injection
    solves, datasets. Writes all artifacts plus a manifest and returns
    the manifest dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    clock = time.perf_counter

    t0 = clock()
    bundle = build_scenario(scenario)
    mesh, layout = bundle.mesh, bundle.layout
    timings["setup"] = clock() - t0

    t0 = clock()
    try:
        deflection = membrane.solve_membrane(mesh, bundle.truth)
    except membrane.ConvergenceError as exc:
        raise membrane.ConvergenceError(f"membrane stage failed: {exc}") from exc
    timings["membrane"] = clock() - t0

    gamma = forward.apparent_conductivity(mesh, deflection)
    t0 = clock()
    try:
        u_loaded = forward.solve_all_injections(mesh, layout, gamma, scenario.current)
        u_rest = forward.homogeneous_potentials(mesh, layout, scenario.current)
    except forward.SolverError as exc:
        raise forward.SolverError(f"injection stage failed: {exc}") from exc
    v_loaded = forward.measure_voltages(mesh, layout, u_loaded, scenario.current)
    v_rest = forward.measure_voltages(mesh, layout, u_rest, scenario.current)
    diff = forward.difference_data(v_loaded, v_rest)
    if scenario.noise > 0:
        diff = forward.add_noise(diff, scenario.noise, scenario.seed)
    timings["forward"] = clock() - t0

    meshing.save_mesh(mesh, out / "mesh.txt", layout)
    membrane.save_pressure_csv(bundle.truth, out / "pressure_true.csv")
    membrane.save_displacement_csv(deflection, out / "displacement.csv")
    slopes = np.linalg.norm(deflection.element_gradients, axis=1)
    eigvals, dets = forward.conductivity_spectrum(gamma)
    with open(out / "gamma_summary.csv", "w") as fh:
        fh.write("element,slope,eig_low,eig_high,det\n")
        for k in range(mesh.n_elements):
            fh.write(f"{k},{float(slopes[k])!r},{float(eigvals[k, 0])!r},"
                     f"{float(eigvals[k, 1])!r},{float(dets[k])!r}\n")
    forward.save_voltages_csv(v_loaded, out / "V_loaded.csv")
    forward.save_voltages_csv(v_rest, out / "V_rest.csv")
    forward.save_voltages_csv(diff, out / "W.csv")

    derived = {"k": mesh.n_elements, "n_nodes": mesh.n_nodes, "h": mesh.h,
               "pressure_scale": bundle.pressure_scale,
               "max_slope": deflection.max_slope,
               "picard_iterations": deflection.picard_iterations,
               "interior_elements": bundle.mask.count}
    artifacts = [("mesh", "mesh.txt"), ("pressure_true", "pressure_true.csv"),
                 ("displacement", "displacement.csv"),
                 ("gamma_summary", "gamma_summary.csv"),
                 ("V_loaded", "V_loaded.csv"), ("V_rest", "V_rest.csv"),
                 ("W", "W.csv")]
    (out / "timings.json").write_text(json.dumps(timings, indent=2))
    manifest = _write_manifest(out, "simulate", scenario, derived, artifacts,
                               volatile=[("timings", "timings.json")])
    logger.info("simulate %s: wrote %d artifacts to %s",
                scenario.name, len(artifacts), out)
    return manifest


# ---------------------------------------------------------------------------
# reconstruct


def _discrepancy_target(scenario: Scenario, diff: forward.VoltageDataset) -> float:
    if scenario.noise > 0:
        return scenario.noise * np.abs(diff.matrix).max() * scenario.n_electrodes
    return DEFAULT_NOISELESS_RESIDUAL_FRACTION * np.linalg.norm(diff.vector)


def run_reconstruct(scenario: Scenario, w_path, out_dir) -> dict:
    """Inverse pipeline: sensitivity assembly, regularized solve, pressure
    extraction, conventional baseline, and scoring against the scenario's
    ground truth."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    clock = time.perf_counter

    t0 = clock()
    bundle = build_scenario(scenario)
    mesh, layout, mask = bundle.mesh, bundle.layout, bundle.mask
    diff = forward.load_voltages_csv(w_path)
    if diff.n_electrodes != scenario.n_electrodes:
        raise ValueError(f"dataset is {diff.n_electrodes}-channel, scenario "
                         f"expects {scenario.n_electrodes}")
    timings["setup"] = clock() - t0

    t0 = clock()
    basis = sensitivity.build_basis(mesh, mask)
    u_rest = forward.homogeneous_potentials(mesh, layout, scenario.current)
    u0_grads = forward.potential_gradients(mesh, u_rest)
    delta = scenario.delta_h * mesh.h
    system = sensitivity.assemble_sensitivity(mesh, basis, u0_grads, delta,
                                              mask=mask,
                                              merge_pairs=scenario.merge_pairs)
    timings["sensitivity"] = clock() - t0

    target = _discrepancy_target(scenario, diff)
    beta = scenario.beta
    if beta is None:
        beta = inversion.choose_beta_discrepancy(system, diff, target)
    t0 = clock()
    unknown = inversion.solve_reduced(system, diff, beta)
    recon = inversion.extract_pressure(unknown, mask)
    baseline = inversion.conventional_recon(diff, mesh, u0_grads, beta)
    timings["inversion"] = clock() - t0
    metrics = inversion.score(recon, bundle.truth, mesh)

    recon_field = membrane.PressureField(
        np.where(mask.element_flags, recon.values, 0.0), mask)
    membrane.save_pressure_csv(recon_field, out / "pressure_recon.csv")
    with open(out / "baseline_sigma.csv", "w") as fh:
        fh.write("element,value\n")
        for k, v in enumerate(baseline.values):
            fh.write(f"{k},{float(v)!r}\n")
    inversion.write_pgm(mesh, recon.values, out / "pressure_recon.pgm")
    inversion.write_pgm(mesh, np.abs(bundle.truth.values), out / "pressure_true.pgm")
    inversion.write_pgm(mesh, np.abs(baseline.values), out / "baseline_sigma.pgm")

    results = {"beta": beta, "delta": delta, "delta_h": scenario.delta_h,
               "merge_pairs": scenario.merge_pairs,
               "system_rows": system.n_rows, "system_columns": system.n_columns,
               "residual": recon.residual,
               "baseline_residual": baseline.residual,
               "truncated_negatives": recon.truncated_negatives,
               "discrepancy_target": target,
               "data_norm": float(np.linalg.norm(diff.vector)),
               "metrics": metrics}
    (out / "results.json").write_text(json.dumps(results, sort_keys=True, indent=2))

    derived = {"k": mesh.n_elements, "h": mesh.h, "delta": delta,
               "beta": beta, "pressure_scale": bundle.pressure_scale}
    artifacts = [("pressure_recon", "pressure_recon.csv"),
                 ("baseline_sigma", "baseline_sigma.csv"),
                 ("pressure_recon_raster", "pressure_recon.pgm"),
                 ("pressure_true_raster", "pressure_true.pgm"),
                 ("baseline_raster", "baseline_sigma.pgm"),
                 ("results", "results.json")]
    timings["inversion_solve"] = recon.solve_seconds
    (out / "timings.json").write_text(json.dumps(timings, indent=2))
    manifest = _write_manifest(out, "reconstruct", scenario, derived, artifacts,
                               volatile=[("timings", "timings.json")])
    logger.info("reconstruct %s: IoU=%.3f beta=%.3e", scenario.name,
                metrics["iou"], beta)
    return manifest


# ---------------------------------------------------------------------------
# table of reduced-system sizes


def run_table1(shape: str) -> dict:
    """Reduced sensitivity-system sizes at the reference mesh resolutions.

    Counts columns for radius 0 (diagonal only), five element sides, and
    the domain diameter, in both unmerged and merged conventions, and
    compares against the published reference counts.
    """
    if shape not in TABLE1_PAPER:
        raise ValueError(f"shape must be one of {sorted(TABLE1_PAPER)}")
    ref = TABLE1_PAPER[shape]
    mesh = meshing.build_mesh(shape, ref["target_k"], ref["size"])
    mask = meshing.interior_mask(mesh, 0.0)
    rows = 16 * 16
    report = {"shape": shape, "k": mesh.n_elements, "h": mesh.h, "rows": rows,
              "entries": []}
    for label, delta, ref_cols in (("0", 0.0, ref["zero"]),
                                   ("5h", 5.0 * mesh.h, ref["five_h"]),
                                   ("diam", mesh.domain_diameter(), ref["full"])):
        unmerged = sensitivity.retained_pairs(mesh, mask, delta).shape[0]
        merged = sensitivity.retained_pairs(mesh, mask, delta,
                                            merge_pairs=True).shape[0]
        report["entries"].append({
            "delta": label, "columns_unmerged": int(unmerged),
            "columns_merged": int(merged), "reference": ref_cols,
            "deviation_unmerged": (unmerged - ref_cols) / ref_cols,
            "deviation_merged": (merged - ref_cols) / ref_cols,
        })
    return report


def format_table1(report: dict) -> str:
    lines = [f"reduced system sizes, {report['shape']} mesh "
             f"(K={report['k']}, h={report['h']:.4g}, rows={report['rows']})",
             f"{'delta':>6} {'unmerged':>10} {'merged':>10} {'reference':>10} "
             f"{'dev(unm)':>9} {'dev(mrg)':>9}"]
    for e in report["entries"]:
        lines.append(f"{e['delta']:>6} {e['columns_unmerged']:>10d} "
                     f"{e['columns_merged']:>10d} {e['reference']:>10d} "
                     f"{e['deviation_unmerged']:>8.1%} {e['deviation_merged']:>8.1%}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# verification suite


@dataclass
class VerifyCheck:
    name: str
    passed: bool
    detail: str


def run_verify(fast: bool = False) -> list:
    """Cross-module invariant checks; returns a list of VerifyCheck.

    ``fast`` skips the two expensive checks (radial refinement pair and
    the full 512-element decay table).
    """
    checks = []

    def record(name, passed, detail):
        checks.append(VerifyCheck(name=name, passed=bool(passed), detail=detail))
        logger.info("verify %-22s %s (%s)", name, "PASS" if passed else "FAIL", detail)

    mesh = meshing.build_mesh("square", 512, 1.0)
    layout = meshing.place_electrodes(mesh, 16, 0.5)
    mask = meshing.interior_mask(mesh, 0.0)

    gap = np.abs(mesh.element_gradients.sum(axis=1)).max()
    record("p1-partition-of-unity", gap < 1e-12, f"max gradient sum {gap:.1e}")

    lens = layout.arc_lengths(mesh)
    edge = mesh.boundary_edge_lengths.max()
    union_err = abs(layout.covered_length(mesh) - 0.5 * mesh.perimeter)
    record("electrode-arcs",
           lens.max() - lens.min() <= edge + 1e-12 and union_err <= edge + 1e-12,
           f"length spread {lens.max() - lens.min():.3g}, union gap {union_err:.3g}")

    values = np.zeros(mesh.n_elements)
    values[[150, 151, 300, 301]] = 1.0
    pressure = membrane.PressureField(values, mask)
    pilot = membrane.solve_membrane(mesh, pressure)
    pressure = pressure.scaled(0.2 / pilot.max_slope)
    deflection = membrane.solve_membrane(mesh, pressure)
    record("picard-convergence", deflection.picard_iterations < 100,
           f"{deflection.picard_iterations} iterations, slope {deflection.max_slope:.3f}")

    gamma = forward.apparent_conductivity(mesh, deflection)
    eigvals, dets = forward.conductivity_spectrum(gamma)
    slopes2 = (deflection.element_gradients ** 2).sum(axis=1)
    spec_err = max(np.abs(eigvals[:, 1] - 1.0).max(),
                   np.abs(eigvals[:, 0] - 1.0 / (1.0 + slopes2)).max(),
                   np.abs(dets - 1.0 / (1.0 + slopes2)).max())
    record("conductivity-spectrum", spec_err <= 1e-12, f"max error {spec_err:.1e}")

    u_loaded = forward.solve_all_injections(mesh, layout, gamma)
    u_rest = forward.homogeneous_potentials(mesh, layout)
    v_loaded = forward.measure_voltages(mesh, layout, u_loaded)
    v_rest = forward.measure_voltages(mesh, layout, u_rest)
    rec_gap = max(v_loaded.reciprocity_gap(), v_rest.reciprocity_gap())
    record("reciprocity", rec_gap <= 1e-8, f"max relative asymmetry {rec_gap:.1e}")

    neg = membrane.solve_membrane(mesh, pressure.scaled(-1.0))
    gamma_neg = forward.apparent_conductivity(mesh, neg)
    v_neg = forward.measure_voltages(
        mesh, layout, forward.solve_all_injections(mesh, layout, gamma_neg))
    sign_gap = np.abs(v_neg.matrix - v_loaded.matrix).max()
    scale = np.abs(v_loaded.matrix).max()
    record("sign-ambiguity", sign_gap <= 1e-10 * scale,
           f"datasets differ by {sign_gap:.1e} (scale {scale:.2f})")

    base = np.linalg.norm(forward.difference_data(v_loaded, v_rest).vector)
    ratios = []
    for eps in (0.5, 0.25):
        w_eps = membrane.solve_membrane(mesh, pressure.scaled(eps))
        g_eps = forward.apparent_conductivity(mesh, w_eps)
        v_eps = forward.measure_voltages(
            mesh, layout, forward.solve_all_injections(mesh, layout, g_eps))
        ratios.append(np.linalg.norm(forward.difference_data(v_eps, v_rest).vector)
                      / base / eps ** 2)
    quad_dev = max(abs(r - 1.0) for r in ratios)
    record("quadratic-scaling", quad_dev <= 0.10,
           f"worst deviation from eps^2 law {quad_dev:.1%}")

    tiny = meshing.build_mesh("square", 8, 1.0)
    tiny_layout = meshing.place_electrodes(tiny, 4, 1.0)
    tiny_mask = meshing.interior_mask(tiny, 0.0)
    tiny_basis = sensitivity.build_basis(tiny, tiny_mask)
    tiny_grads = forward.potential_gradients(
        tiny, forward.homogeneous_potentials(tiny, tiny_layout))
    tiny_system = sensitivity.assemble_sensitivity(
        tiny, tiny_basis, tiny_grads, delta=tiny.domain_diameter())
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        p = rng.normal(size=8)
        model = sensitivity.quadratic_form(tiny_system, p)
        v = tiny_basis.nodal_values.T @ p
        gv = membrane.displacement_gradient(tiny, v)
        brute = np.array([(tiny.element_areas * (gv * tiny_grads[i]).sum(1)
                           * (gv * tiny_grads[j]).sum(1)).sum()
                          for i in range(4) for j in range(4)])
        worst = max(worst, np.abs(model - brute).max() / np.abs(brute).max())
    record("quadratic-linear-form", worst <= 1e-10, f"worst relative gap {worst:.1e}")

    if not fast:
        errors = []
        for target in (540, 2160):
            disk = meshing.build_mesh("disk", target, 5.0)
            w_ref, p_ref = membrane.radial_example(0.15, disk)
            solved = membrane.solve_membrane(disk, p_ref, tol=1e-10, max_iter=60)
            errors.append(np.abs(solved.nodal_values - w_ref.nodal_values).max())
        factor = errors[0] / errors[1]
        record("radial-oracle", factor >= 3.0,
               f"refinement error factor {factor:.2f}")

        basis = sensitivity.build_basis(mesh, mask)
        grads = forward.potential_gradients(mesh, u_rest)
        maxima = sensitivity.pair_entry_maxima(mesh, basis, grads)
        _, profile = sensitivity.decay_profile(mesh, basis, maxima)
        ok = np.all(np.diff(profile[~np.isnan(profile)]) <= 1e-12)
        record("sensitivity-decay", ok,
               "binned maxima " + "/".join(f"{v:.1e}" for v in profile))

    return checks


def format_verify(checks) -> str:
    lines = [f"{'PASS' if c.passed else 'FAIL'}  {c.name:<24} {c.detail}"
             for c in checks]
    n_bad = sum(not c.passed for c in checks)
    lines.append(f"{len(checks) - n_bad}/{len(checks)} checks passed")
    return "\n".join(lines)
