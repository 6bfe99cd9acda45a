"""Simulation and analysis of the electrostatic calibration of a sphere-plate force sensor."""
from .electrostatics import (
    ForceModel,
    Geometry,
    Potentials,
    SeriesConvergenceError,
    alpha_theoretical,
    exact_capacitance,
    exact_capacitance_gradient,
    exact_force,
    pfa_force,
)
from .rig import ContactError, RigConfig, execute_campaign, execute_hold, execute_run
from .analysis import (
    FitError,
    Mask,
    MaskError,
    campaign_statistics,
    estimate_relative_error,
    expected_pfa_residuals,
    fit_linear_inverse,
    fit_log_voltage,
    fit_power_law,
)

__version__ = "0.1.0"
