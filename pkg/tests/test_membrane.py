import numpy as np
import pytest

from eitpress import membrane, meshing


def energy_norm(mesh, grads):
    return np.sqrt((mesh.element_areas * (grads ** 2).sum(axis=1)).sum())


class TestPressureField:
    def test_rejects_support_outside_mask(self, square512):
        mask = meshing.interior_mask(square512.mesh, 0.3)
        values = np.zeros(512)
        values[0] = 1.0  # corner element, outside the 0.3 band
        with pytest.raises(ValueError, match="vanish"):
            membrane.PressureField(values, mask)

    def test_rejects_bound_violation(self, square512):
        values = np.zeros(512)
        values[200] = 3.0
        with pytest.raises(ValueError, match="bound"):
            membrane.PressureField(values, square512.mask, bound=2.0)


class TestPoisson:
    def test_zero_rhs(self, square128):
        v = membrane.poisson_solve(square128.mesh, np.zeros(128))
        assert np.abs(v.nodal_values).max() == 0.0

    def test_sign_flip_of_unit_sources(self, square128):
        k = 60
        rhs = np.zeros(128)
        rhs[k] = 1.0
        plus = membrane.poisson_solve(square128.mesh, rhs)
        minus = membrane.poisson_solve(square128.mesh, -rhs)
        assert np.array_equal(plus.nodal_values, -minus.nodal_values)
        # laplace(v) = +indicator pushes the membrane down
        assert plus.nodal_values.min() < 0

    def test_radial_solution_on_unit_disk(self):
        errs = []
        for k in (400, 1600):
            mesh = meshing.build_mesh("disk", k, 1.0)
            v = membrane.poisson_solve(mesh, np.ones(k))
            r = np.hypot(mesh.nodes[:, 0], mesh.nodes[:, 1])
            errs.append(np.abs(v.nodal_values - (r ** 2 - 1) / 4).max())
        assert errs[0] / errs[1] >= 3.0

    def test_rejects_nonfinite(self, square128):
        with pytest.raises(ValueError):
            membrane.poisson_solve(square128.mesh, np.full(128, np.nan))


class TestGradient:
    def test_reproduces_linear_fields(self, square128):
        mesh = square128.mesh
        gx = membrane.displacement_gradient(mesh, mesh.nodes[:, 0].copy())
        gy = membrane.displacement_gradient(mesh, mesh.nodes[:, 1].copy())
        assert np.abs(gx - [1.0, 0.0]).max() < 1e-12
        assert np.abs(gy - [0.0, 1.0]).max() < 1e-12

    def test_radial_poisson_gradient(self):
        mesh = meshing.build_mesh("disk", 1600, 1.0)
        v = membrane.poisson_solve(mesh, np.ones(mesh.n_elements))
        r = np.hypot(mesh.centroids[:, 0], mesh.centroids[:, 1])
        radial = mesh.centroids / np.maximum(r, 1e-12)[:, None]
        expected = 0.5 * r[:, None] * radial
        err = np.abs(v.element_gradients - expected).max()
        assert err < 2 * mesh.h


class TestSolveMembrane:
    def test_zero_pressure_returns_immediately(self, square128):
        p = membrane.PressureField(np.zeros(128), square128.mask)
        w = membrane.solve_membrane(square128.mesh, p)
        assert np.abs(w.nodal_values).max() == 0.0
        assert w.picard_iterations == 0

    def test_clamped_boundary_exact(self, square512, patch_pressure):
        w = membrane.solve_membrane(square512.mesh, patch_pressure)
        assert np.abs(w.nodal_values[square512.mesh.boundary_nodes]).max() == 0.0

    def test_sign_symmetry_bitwise(self, square128):
        values = np.zeros(128)
        values[[40, 41, 56, 57]] = 1.5
        p = membrane.PressureField(values, square128.mask)
        plus = membrane.solve_membrane(square128.mesh, p)
        minus = membrane.solve_membrane(square128.mesh, p.scaled(-1.0))
        assert np.array_equal(plus.nodal_values, -minus.nodal_values)

    def test_nonconvergence_raises(self, square128):
        values = np.zeros(128)
        values[[40, 41, 56, 57]] = 200.0  # far beyond the existence regime
        p = membrane.PressureField(values, square128.mask)
        with pytest.raises(membrane.ConvergenceError):
            membrane.solve_membrane(square128.mesh, p, max_iter=40)

    def test_invalid_tolerance(self, square128):
        p = membrane.PressureField(np.zeros(128), square128.mask)
        with pytest.raises(ValueError):
            membrane.solve_membrane(square128.mesh, p, tol=0.0)

    def test_small_pressure_poisson_limit(self, square128):
        # |w - v|_E / |v|_E should shrink like the square of the load scale
        mesh = square128.mesh
        base = np.zeros(128)
        base[[40, 41, 42, 43, 56, 57, 58, 59]] = 1.0
        base = membrane.PressureField(base, square128.mask)
        pilot = membrane.solve_membrane(mesh, base)
        base = base.scaled(1.0 / pilot.max_slope)  # slope(eps) ~ eps

        def ratio(eps):
            p = base.scaled(eps)
            w = membrane.solve_membrane(mesh, p, tol=1e-12)
            v = membrane.poisson_solve(mesh, p.values)
            gap = w.element_gradients - v.element_gradients
            return energy_norm(mesh, gap) / energy_norm(mesh, v.element_gradients)

        c = ratio(0.2) / 0.2 ** 2
        assert ratio(0.1) <= c * 0.1 ** 2
        assert ratio(0.05) <= c * 0.05 ** 2


class TestRadialExample:
    def test_outer_branch_independent_of_rho(self):
        r = np.linspace(2.0, 5.0, 64)
        a = membrane.radial_displacement(0.1, r)
        b = membrane.radial_displacement(-2.7, r)
        assert np.array_equal(a, b)

    def test_closed_form_is_c1_at_interface(self):
        # evaluate both branches exactly at the support radius
        for rho in (0.1, -0.4, 2.0):
            inner_w = float(membrane.radial_displacement(rho, 2.0 - 1e-12))
            outer_w = float(membrane.radial_displacement(rho, 2.0))
            assert inner_w == pytest.approx(outer_w, abs=1e-10)
            inner_s = float(membrane.radial_slope(rho, 2.0 - 1e-12))
            outer_s = float(membrane.radial_slope(rho, 2.0))
            assert inner_s == pytest.approx(outer_s, abs=1e-10)

    def test_pressure_vanishes_outside_support(self):
        mesh = meshing.build_mesh("disk", 540, 5.0)
        _, p = membrane.radial_example(0.15, mesh)
        node_r = np.hypot(mesh.nodes[:, 0], mesh.nodes[:, 1])
        outside = (node_r[mesh.elements] > 2.0 + 1e-9).all(axis=1)
        assert np.abs(p.values[outside]).max() == 0.0

    def test_flux_and_centroid_routes_agree_inside(self):
        mesh = meshing.build_mesh("disk", 2160, 5.0)
        _, p_flux = membrane.radial_example(0.15, mesh)
        _, p_cent = membrane.radial_example(0.15, mesh, pressure_from="centroid")
        r = np.hypot(mesh.centroids[:, 0], mesh.centroids[:, 1])
        well_inside = r < 1.5
        err = np.abs(p_flux.values - p_cent.values)[well_inside].max()
        assert err < 0.5 * mesh.h

    def test_total_load_matches_flux_through_support_circle(self):
        mesh = meshing.build_mesh("disk", 540, 5.0)
        rho = 0.15
        _, p = membrane.radial_example(rho, mesh)
        slope = membrane.radial_slope(rho, 2.0)
        exact = 2 * np.pi * 2.0 * slope / np.sqrt(1 + slope ** 2)
        total = (p.values * mesh.element_areas).sum()
        assert total == pytest.approx(exact, rel=1e-3)

    def test_self_consistency_at_base_resolution(self):
        mesh = meshing.build_mesh("disk", 540, 5.0)
        w_ref, p = membrane.radial_example(0.15, mesh)
        w = membrane.solve_membrane(mesh, p, tol=1e-10, max_iter=60)
        assert np.abs(w.nodal_values - w_ref.nodal_values).max() < 0.05

    def test_requires_radius_five_disk(self, square512):
        with pytest.raises(ValueError):
            membrane.radial_example(0.1, square512.mesh)


class TestFieldCSV:
    def test_pressure_round_trip(self, tmp_path, square512, patch_pressure):
        path = tmp_path / "p.csv"
        membrane.save_pressure_csv(patch_pressure, path)
        back = membrane.load_values_csv(path)
        assert np.array_equal(back, patch_pressure.values)

    def test_displacement_round_trip(self, tmp_path, square128):
        rhs = np.zeros(128)
        rhs[60] = 1.0
        v = membrane.poisson_solve(square128.mesh, rhs)
        path = tmp_path / "w.csv"
        membrane.save_displacement_csv(v, path)
        assert np.array_equal(membrane.load_values_csv(path), v.nodal_values)
