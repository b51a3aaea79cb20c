import numpy as np
import pytest

from eitpress import meshing


def barycentric_inside(mesh, points):
    corners = mesh.nodes[mesh.elements]
    a, b, c = corners[:, 0], corners[:, 1], corners[:, 2]
    det = ((b[:, 1] - c[:, 1]) * (a[:, 0] - c[:, 0])
           + (c[:, 0] - b[:, 0]) * (a[:, 1] - c[:, 1]))
    l1 = ((b[:, 1] - c[:, 1]) * (points[:, 0] - c[:, 0])
          + (c[:, 0] - b[:, 0]) * (points[:, 1] - c[:, 1])) / det
    l2 = ((c[:, 1] - a[:, 1]) * (points[:, 0] - c[:, 0])
          + (a[:, 0] - c[:, 0]) * (points[:, 1] - c[:, 1])) / det
    return np.minimum(np.minimum(l1, l2), 1 - l1 - l2)


class TestBuildMesh:
    def test_square_512(self, square512):
        mesh = square512.mesh
        assert mesh.n_elements == 512
        assert mesh.n_nodes == 17 * 17
        assert mesh.h == pytest.approx(1 / 16)
        assert mesh.element_areas.sum() == pytest.approx(1.0, rel=1e-12)
        # two right-triangle families split by the cell diagonal
        rel = mesh.centroids * 16 - np.floor(mesh.centroids * 16 - 1e-9)
        lower = rel[:, 0] > rel[:, 1]
        assert lower.sum() == 256 and (~lower).sum() == 256

    def test_square_smallest(self):
        mesh = meshing.build_mesh("square", 8, 1.0)
        assert mesh.n_elements == 8
        assert mesh.h == pytest.approx(0.5)

    def test_square_rejects_bad_counts(self):
        with pytest.raises(ValueError, match="2\\*m\\*\\*2"):
            meshing.build_mesh("square", 500, 1.0)
        with pytest.raises(ValueError):
            meshing.build_mesh("square", 4, 1.0)
        with pytest.raises(ValueError):
            meshing.build_mesh("square", 512, -1.0)
        with pytest.raises(ValueError):
            meshing.build_mesh("hexagon", 512, 1.0)

    def test_disk_661(self):
        mesh = meshing.build_mesh("disk", 661, 5.0)
        assert 628 <= mesh.n_elements <= 694
        assert mesh.n_elements == 661
        assert mesh.element_areas.sum() == pytest.approx(25 * np.pi, rel=0.02)

    def test_disk_exact_counts(self):
        for target in (120, 333, 661, 1024):
            mesh = meshing.build_mesh("disk", target, 2.0)
            assert mesh.n_elements == target

    def test_positive_areas_and_gradient_partition(self, square512):
        for mesh in (square512.mesh, meshing.build_mesh("disk", 200, 1.0)):
            assert np.all(mesh.element_areas > 0)
            assert np.abs(mesh.element_gradients.sum(axis=1)).max() < 1e-12

    def test_centroids_inside_elements(self, square512):
        margin = barycentric_inside(square512.mesh, square512.mesh.centroids)
        assert margin.min() > 0.3  # centroid is at barycentric (1/3, 1/3, 1/3)

    def test_boundary_single_ccw_loop(self):
        for shape, k, size in (("square", 512, 1.0), ("disk", 661, 5.0)):
            mesh = meshing.build_mesh(shape, k, size)
            edges = mesh.boundary_edges
            assert np.array_equal(np.roll(edges[:, 0], -1), edges[:, 1])
            assert np.unique(edges[:, 0]).size == edges.shape[0]
            # outward normals point away from the domain center
            mids = 0.5 * (mesh.nodes[edges[:, 0]] + mesh.nodes[edges[:, 1]])
            tang = mesh.nodes[edges[:, 1]] - mesh.nodes[edges[:, 0]]
            normals = np.column_stack([tang[:, 1], -tang[:, 0]])
            center = mesh.nodes.mean(axis=0)
            assert np.all(((mids - center) * normals).sum(axis=1) > 0)

    def test_reference_start_nodes(self, square512):
        assert np.allclose(square512.mesh.nodes[square512.mesh.boundary_edges[0, 0]],
                           [0.0, 0.0])
        disk = meshing.build_mesh("disk", 661, 5.0)
        assert np.allclose(disk.nodes[disk.boundary_edges[0, 0]], [5.0, 0.0])

    def test_refinement_quarters_areas(self):
        coarse = meshing.build_mesh("square", 512, 1.0)
        fine = meshing.build_mesh("square", 2048, 1.0)
        assert fine.h == pytest.approx(coarse.h / 2)
        assert fine.element_areas.mean() == pytest.approx(
            coarse.element_areas.mean() / 4)


class TestStiffness:
    def test_identity_tensor_symmetric_psd_constant_kernel(self, tiny8):
        matrix = meshing.stiffness_matrix(tiny8.mesh).toarray()
        assert np.abs(matrix - matrix.T).max() == 0.0
        eigvals = np.linalg.eigvalsh(matrix)
        assert eigvals.min() > -1e-12
        assert (np.abs(eigvals) < 1e-12).sum() == 1
        assert np.abs(matrix @ np.ones(tiny8.mesh.n_nodes)).max() < 1e-12

    def test_tensor_matches_scalar(self, tiny8):
        coeff = np.linspace(0.5, 2.0, 8)
        tensors = coeff[:, None, None] * np.eye(2)
        a = meshing.stiffness_matrix(tiny8.mesh, coeff).toarray()
        b = meshing.stiffness_matrix(tiny8.mesh, tensors).toarray()
        assert np.allclose(a, b, atol=1e-14)

    def test_load_vector_total(self, tiny8):
        values = np.arange(8.0)
        b = meshing.load_vector(tiny8.mesh, values)
        assert b.sum() == pytest.approx((values * tiny8.mesh.element_areas).sum())


class TestElectrodes:
    def test_square_16_half_coverage(self, square512):
        layout = square512.layout
        assert len(layout.arcs) == 16
        assert all(len(a) == 2 for a in layout.arcs)
        lens = layout.arc_lengths(square512.mesh)
        assert lens.max() - lens.min() < 1e-12
        # equal gaps: starts every 4 edges
        starts = [a[0] for a in layout.arcs]
        assert np.all(np.diff(starts) == 4)

    def test_full_coverage_tiles_boundary(self, tiny8):
        layout = meshing.place_electrodes(tiny8.mesh, 4, 1.0)
        covered = np.concatenate(layout.arcs)
        assert np.array_equal(np.sort(covered),
                              np.arange(tiny8.mesh.boundary_edges.shape[0]))

    def test_disk_arc_lengths_within_one_edge(self):
        mesh = meshing.build_mesh("disk", 661, 5.0)
        layout = meshing.place_electrodes(mesh, 16, 0.5)
        lens = layout.arc_lengths(mesh)
        edge = mesh.boundary_edge_lengths.max()
        assert lens.max() - lens.min() <= edge + 1e-12

    def test_union_matches_coverage(self):
        for shape, k, size, cov in (("square", 512, 1.0, 0.5),
                                    ("disk", 661, 5.0, 0.5),
                                    ("square", 512, 1.0, 0.25)):
            mesh = meshing.build_mesh(shape, k, size)
            layout = meshing.place_electrodes(mesh, 16, cov)
            gap = abs(layout.covered_length(mesh) - cov * mesh.perimeter)
            assert gap <= mesh.boundary_edge_lengths.max() + 1e-12

    def test_too_few_edges_rejected(self, tiny8):
        with pytest.raises(ValueError, match="boundary has"):
            meshing.place_electrodes(tiny8.mesh, 16, 0.5)

    def test_bad_parameters_rejected(self, square512):
        with pytest.raises(ValueError):
            meshing.place_electrodes(square512.mesh, 3, 0.5)
        with pytest.raises(ValueError):
            meshing.place_electrodes(square512.mesh, 16, 0.0)


class TestInteriorMask:
    def test_zero_standoff_flags_all(self, square512):
        assert meshing.interior_mask(square512.mesh, 0.0).element_flags.all()

    def test_central_band(self, square512):
        mask = meshing.interior_mask(square512.mesh, 0.45)
        dist = square512.mesh.boundary_distance(square512.mesh.centroids)
        assert np.array_equal(mask.element_flags, dist > 0.45)
        assert 0 < mask.count < 32

    def test_disk_inner_area(self):
        mesh = meshing.build_mesh("disk", 2644, 5.0)
        mask = meshing.interior_mask(mesh, 3.0)
        inner = mesh.element_areas[mask.element_flags].sum()
        assert inner == pytest.approx(4 * np.pi, rel=0.10)

    def test_empty_mask_rejected(self, square512):
        with pytest.raises(ValueError):
            meshing.interior_mask(square512.mesh, 0.49)
        with pytest.raises(ValueError):
            meshing.interior_mask(square512.mesh, 0.5)


class TestMeshIO:
    def test_round_trip(self, tmp_path, square512):
        path = tmp_path / "mesh.txt"
        meshing.save_mesh(square512.mesh, path, square512.layout)
        back, layout = meshing.load_mesh(path)
        assert np.array_equal(back.nodes, square512.mesh.nodes)
        assert np.array_equal(back.elements, square512.mesh.elements)
        assert np.array_equal(back.boundary_edges, square512.mesh.boundary_edges)
        assert back.h == square512.mesh.h
        assert back.size == square512.mesh.size
        assert layout.n_electrodes == 16
        for a, b in zip(layout.arcs, square512.layout.arcs):
            assert np.array_equal(a, b)

    def test_without_electrodes(self, tmp_path):
        mesh = meshing.build_mesh("disk", 200, 1.0)
        meshing.save_mesh(mesh, tmp_path / "m.txt")
        back, layout = meshing.load_mesh(tmp_path / "m.txt")
        assert layout is None
        assert np.array_equal(back.nodes, mesh.nodes)
        assert np.array_equal(back.element_areas, mesh.element_areas)
