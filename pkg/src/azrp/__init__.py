"""Attractive zero-range process in a site-disordered environment.

Simulation (exact Harris-coupled kinetic Monte Carlo), invariant measures,
macroscopic flux, Riemann and Godunov solvers, and desk-scale experiments.
"""
from .env import (DisorderLaw, EnvError, Environment, build_defect_env, build_env, build_iid_env,
                  find_typical_site, homogeneous_env)
from .flux import (FluxError, FluxFunction, build_flux, check_weak_convexity, concave_envelope,
                   critical_speed, dilute_flux, homogeneous_flux)
from .kinetics import (CurrentTracker, HarrisStream, JumpKernel, KineticsError, couple_run,
                       interface_status, run)
from .measures import (INF, Configuration, FugacityCurve, MeasureError, RateFunction,
                       density_to_fugacity, mean_density_curve, sample_product_measure, theta_pmf)
from .pde import PDEError, Profile, godunov_solve, riemann_optimum, riemann_solution

__all__ = [
    "INF", "Configuration", "CurrentTracker", "DisorderLaw", "EnvError", "Environment", "FluxError",
    "FluxFunction", "FugacityCurve", "HarrisStream", "JumpKernel", "KineticsError", "MeasureError",
    "PDEError", "Profile", "RateFunction", "build_defect_env", "build_env", "build_flux",
    "build_iid_env", "check_weak_convexity", "concave_envelope", "couple_run", "critical_speed",
    "density_to_fugacity", "dilute_flux", "find_typical_site", "godunov_solve", "homogeneous_env",
    "homogeneous_flux", "interface_status", "mean_density_curve", "riemann_optimum",
    "riemann_solution", "run", "sample_product_measure", "theta_pmf",
]
