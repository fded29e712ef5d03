"""Phase-field reconstruction of insulating cavities in a 2-D conductor.

One pair of boundary current/voltage measurements, a diffuse-interface
representation of the cavity, and a family of misfit functionals whose
minimizers converge to the true cavity as the noise level goes to zero.
"""

from .geometry import (SIDES, GeometryError, DomainSpec, Grid, CavityShape,
                       build_grid, full_boundary, rasterize_cavity,
                       check_standoff)
from .elliptic import (K_REF, WeightField, NeumannData, BoundaryTrace,
                       SolveInfo, SolverError, assemble, unit_stiffness,
                       load_vector, solve_weighted_neumann, solve_on_cells,
                       boundary_trace, energy_seminorm, caccioppoli_ratio)
from .forward import (CauchyData, GroundTruth, solve_direct_cavity, add_noise,
                      analytic_strip_solution, strip_current)
from .phasefield import (PotentialSet, PhaseField, EtaSchedule, BandReport,
                         weight_from_phase, interface_energy,
                         discrete_perimeter, project_admissible,
                         check_band_constraint)
from .functionals import (FunctionalParams, FunctionalBreakdown, State,
                          solve_state, misfit_value, cavity_objective,
                          reduced_crack_objective, crack_objective,
                          phase_edge_energy)
from .gradients import (GradientField, SensitivityState, AdjointState,
                        sensitivity_solve, adjoint_solve,
                        cavity_directional_derivative,
                        reduced_crack_directional_derivative,
                        crack_directional_derivative,
                        cavity_gradient, reduced_crack_gradient)
from .optimize import (OptimizerConfig, RunTrace, projected_step,
                       minimize_cavity_objective,
                       minimize_reduced_crack_objective,
                       minimize_crack_objective_alternating)
from .experiment import (ExperimentConfig, ExperimentBundle,
                         ReconstructionResult, SweepResult, StageError,
                         make_current, restrict_edge_values,
                         prepare_experiment, functional_params_for,
                         threshold_set, hausdorff_distance,
                         symmetric_difference_area, smoothed_indicator,
                         state_consistency, misfit_floor, misfit_decay_study,
                         run_reconstruction, epsilon_sweep,
                         run_gradient_check, recompute_metrics)
from . import fieldio

__version__ = "0.1.0"
