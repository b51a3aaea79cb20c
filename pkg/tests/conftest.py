import numpy as np
import pytest

from eitpress import forward, membrane, meshing, sensitivity

THREE_PATCHES = (
    {"kind": "rect", "x0": 0.125, "y0": 0.5625, "x1": 0.375, "y1": 0.8125,
     "magnitude": 1.0},
    {"kind": "rect", "x0": 0.5625, "y0": 0.625, "x1": 0.875, "y1": 0.8125,
     "magnitude": 1.0},
    {"kind": "rect", "x0": 0.375, "y0": 0.125, "x1": 0.6875, "y1": 0.375,
     "magnitude": 1.0},
)


class Setup:
    """Bundle of mesh-level objects shared across tests."""

    def __init__(self, shape, target_k, size, n_electrodes, coverage):
        self.mesh = meshing.build_mesh(shape, target_k, size)
        self.layout = meshing.place_electrodes(self.mesh, n_electrodes, coverage)
        self.mask = meshing.interior_mask(self.mesh, 0.0)


@pytest.fixture(scope="session")
def square512():
    return Setup("square", 512, 1.0, 16, 0.5)


@pytest.fixture(scope="session")
def square128():
    return Setup("square", 128, 1.0, 8, 0.5)


@pytest.fixture(scope="session")
def tiny8():
    return Setup("square", 8, 1.0, 4, 1.0)


@pytest.fixture(scope="session")
def tiny8_system(tiny8):
    basis = sensitivity.build_basis(tiny8.mesh, tiny8.mask)
    u0 = forward.homogeneous_potentials(tiny8.mesh, tiny8.layout)
    grads = forward.potential_gradients(tiny8.mesh, u0)
    system = sensitivity.assemble_sensitivity(
        tiny8.mesh, basis, grads, delta=tiny8.mesh.domain_diameter())
    return basis, grads, system


@pytest.fixture(scope="session")
def patch_pressure(square512):
    """Three grid-aligned patches scaled to peak slope 0.2."""
    values = np.zeros(square512.mesh.n_elements)
    c = square512.mesh.centroids
    for p in THREE_PATCHES:
        inside = ((c[:, 0] >= p["x0"]) & (c[:, 0] <= p["x1"])
                  & (c[:, 1] >= p["y0"]) & (c[:, 1] <= p["y1"]))
        values[inside] = p["magnitude"]
    field = membrane.PressureField(values, square512.mask)
    pilot = membrane.solve_membrane(square512.mesh, field)
    return field.scaled(0.2 / pilot.max_slope)


@pytest.fixture(scope="session")
def forward_data(square512, patch_pressure):
    """Deflection, conductivity, potentials and datasets for the patch case."""
    mesh, layout = square512.mesh, square512.layout
    deflection = membrane.solve_membrane(mesh, patch_pressure)
    gamma = forward.apparent_conductivity(mesh, deflection)
    u_loaded = forward.solve_all_injections(mesh, layout, gamma)
    u_rest = forward.homogeneous_potentials(mesh, layout)
    v_loaded = forward.measure_voltages(mesh, layout, u_loaded)
    v_rest = forward.measure_voltages(mesh, layout, u_rest)
    return {"deflection": deflection, "gamma": gamma,
            "u_loaded": u_loaded, "u_rest": u_rest,
            "v_loaded": v_loaded, "v_rest": v_rest,
            "diff": forward.difference_data(v_loaded, v_rest)}
