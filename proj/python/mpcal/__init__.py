"""Microplane parameter identification: simulation, design and calibration."""

from ._core import (
    ConfigError,
    ConvergenceError,
    Curve,
    DataError,
    Error,
    IoError,
    Model,
    curve_error,
    default_bounds,
    lhs,
    midpoint,
    optimize,
    param_names,
    pearson,
    run_cli,
    simulate,
    solve_coupled,
    stress,
)

__all__ = [
    "ConfigError",
    "ConvergenceError",
    "Curve",
    "DataError",
    "Error",
    "IoError",
    "Model",
    "curve_error",
    "default_bounds",
    "lhs",
    "midpoint",
    "optimize",
    "param_names",
    "pearson",
    "run_cli",
    "simulate",
    "solve_coupled",
    "stress",
]
