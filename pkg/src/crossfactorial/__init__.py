"""Crossed therapist-by-intervention factorial designs.

Factor lattices and Hasse diagrams, randomisation of patients to therapist
and intervention, stratum ANOVA, REML mixed models, a formula front end and
a Monte Carlo study of assignment methods.
"""
from .anova import AnovaTable, TestResult, anova, ems_table, estimate_components_anova, satterthwaite_df
from .design import AllocationTable, DesignSpec, assign_by_method, randomise, read_csv, systematic_design
from .estimators import REMLMixedModel, StratumANOVA
from .exceptions import (
    BindingError,
    ConfigurationError,
    CrossFactorialError,
    NumericalError,
    ParseError,
    StructuralError,
    UsageError,
)
from .factors import Factor, FactorLattice, build_lattice, emit_hasse_dot, infimum, supremum
from .formula import expand, parse, render, to_model
from .reml import ModelFit, ModelSpec, fit_reml, fixed_effect_test, lr_test_random
from .simulation import SimConfig, SimSummary, compare_methods, run_study

__version__ = "0.1.0"

__all__ = [
    "AllocationTable", "AnovaTable", "BindingError", "ConfigurationError", "CrossFactorialError",
    "DesignSpec", "Factor", "FactorLattice", "ModelFit", "ModelSpec", "NumericalError", "ParseError",
    "REMLMixedModel", "SimConfig", "SimSummary", "StratumANOVA", "StructuralError", "TestResult",
    "UsageError", "anova", "assign_by_method", "build_lattice", "compare_methods", "emit_hasse_dot",
    "ems_table", "estimate_components_anova", "expand", "fit_reml", "fixed_effect_test", "infimum",
    "lr_test_random", "parse", "randomise", "read_csv", "render", "run_study", "satterthwaite_df",
    "supremum", "systematic_design", "to_model",
]
