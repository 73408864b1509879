"""Galerkin-truncated nonlinear Schrodinger dynamics on the torus.

Deterministic and damped-forced flows, stationary measure sampling,
slow-growth certificates and distributional diagnostics.
"""

__version__ = "0.1.0"

from .config import ConfigError, ExperimentConfig, SimConfig, load_config, parse_config
from .dynamics import (BlowUpError, PicardDivergenceError, Trajectory, exact_plane_wave,
                       galerkin_convergence_study, gauge_transform, growth_tracker,
                       integrate_deterministic, linfty_integral, local_existence_time,
                       picard_local_solve)
from .fluctdiss import (FluctuationDissipation, chi_R, dissipation_E, dissipation_M,
                        ito_energy_balance, ito_mass_balance, sde_step)
from .measures import (EmpiricalMeasure, SigmaCertificate, coupling_study, cumulative_measure,
                       invariance_test, inviscid_sweep, krylov_bogoliubov_sample, restrict,
                       scaled_measure_run, sigma_membership, stationary_report)
from .density import (ObservableDistribution, distribution_of, quadratic_variation,
                      resolvent_phi, small_ball_probe, stationarity_generator_check)
from .noise import GrowthPair, NoiseSpec, RngStream, noise_increment, ou_exact_step, random_field
from .spectral import (ModeBasis, SpectralField, build_basis, critical_exponent, energy, inner,
                       linear_propagator, lp_norm, mass, nonlinearity, project, sobolev_norm)
