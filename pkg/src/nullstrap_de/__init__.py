"""Differential expression with FDR control calibrated on synthetic null data."""

__version__ = "0.1.0"

from .baselines import Method, MethodResult, bh_discoveries, run_baseline, wilcoxon_rank_sum
from .core import (
    CountMatrix,
    DesignInfo,
    SizeFactors,
    ValidationError,
    estimate_size_factors,
    normalize_counts,
    validate_inputs,
)
from .filter import (
    FdpCurve,
    NullstrapResult,
    adjust_q,
    declare_discoveries,
    fdp_curve,
    nullstrap_filter,
    select_threshold,
)
from .nbglm import (
    FitStatus,
    GeneFit,
    StatisticPair,
    StatMode,
    estimate_dispersion,
    fit_all_genes,
    fit_nb_glm,
    wald_p_value,
    wald_statistic,
)
from .pipeline import NullstrapRun, run_nullstrap
from .simulate import SimulationConfig, generate_dataset, permutation_null_check, run_grid
from .synthetic import build_null_spec, generate_null_matrix, sample_nb

__all__ = [name for name in dir() if not name.startswith("_")]
