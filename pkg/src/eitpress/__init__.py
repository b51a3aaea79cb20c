"""Membrane pressure sensing with electrical impedance tomography.

Simulates the deflection of a clamped conductive membrane under
pressure, synthesizes adjacent-drive boundary current-voltage data
through the induced anisotropic conductivity, and recovers the pressure
magnitude distribution from voltage differences via a reduced
quadratic-sensitivity linear system.
"""

from .meshing import (Mesh, ElectrodeLayout, InteriorMask, build_mesh,
                      place_electrodes, interior_mask, stiffness_matrix,
                      load_vector, save_mesh, load_mesh)
from .membrane import (PressureField, DisplacementField, ConvergenceError,
                       solve_membrane, poisson_solve, displacement_gradient,
                       radial_example, radial_displacement,
                       radial_pressure_profile, save_pressure_csv,
                       save_displacement_csv, load_values_csv)
from .forward import (ConductivityField, InjectionProtocol, VoltageDataset,
                      SolverError, apparent_conductivity, conductivity_spectrum,
                      check_conductivity, solve_injection, solve_all_injections,
                      homogeneous_potentials, potential_gradients,
                      measure_voltages, difference_data, add_noise,
                      save_voltages_csv, load_voltages_csv)
from .sensitivity import (BasisBank, SensitivitySystem, build_basis,
                          assemble_sensitivity, retained_pairs, pair_distance,
                          quadratic_form, pair_entry_maxima, decay_profile,
                          save_sensitivity, load_sensitivity)
from .inversion import (QuadraticUnknown, ReconstructionResult, solve_reduced,
                        residual_curve, choose_beta_discrepancy,
                        extract_pressure, conventional_recon, score,
                        rasterize, write_pgm)
from .harness import (Scenario, load_scenario, save_scenario, build_scenario,
                      run_simulate, run_reconstruct, run_table1, run_verify)

__version__ = "0.1.0"
