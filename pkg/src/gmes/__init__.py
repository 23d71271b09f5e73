"""Multi-agent Bayesian optimization toolkit.

Core pieces: a Matérn-3/2 Gaussian-process backend (:mod:`gmes.gp`), batch
query selection by closed-form variance reduction with a pairwise log-barrier
(:mod:`gmes.acquisition`), reference batch strategies (:mod:`gmes.baselines`),
a benchmark testbed with regret traces (:mod:`gmes.testbed`), a source-seeking
robot simulator (:mod:`gmes.sourcesim`), and a sweep CLI (:mod:`gmes.cli`).

Hot numeric kernels are Numba-compiled by default; set ``GMES_NUMBA=0`` to
force the pure-NumPy fallback.
"""

from ._kernels import backend_name
from .acquisition import (AcquisitionReport, GmesConfig, QueryBatch, find_x_ucb,
                          gamma, gamma_gradient, gmes_select_batch, log_barrier,
                          project_box, surrogate_mi, ucb_value)
from .baselines import BaselineConfig, bucb_select, thompson_select, ucb_pe_select
from .gp import (Dataset, DomainBox, GpPosterior, KernelSpec, fit_posterior,
                 kernel_eval)
from .testbed import (ExperimentConfig, ObservationModel, RegretTrace,
                      TestFunction, eval_function, make_test_function, observe,
                      run_experiment)

__version__ = "0.1.0"

__all__ = [
    "AcquisitionReport", "BaselineConfig", "Dataset", "DomainBox",
    "ExperimentConfig", "GmesConfig", "GpPosterior", "KernelSpec",
    "ObservationModel", "QueryBatch", "RegretTrace", "TestFunction",
    "backend_name", "bucb_select", "eval_function", "find_x_ucb", "fit_posterior",
    "gamma", "gamma_gradient", "gmes_select_batch", "kernel_eval", "log_barrier",
    "make_test_function", "observe", "project_box", "run_experiment",
    "surrogate_mi", "thompson_select", "ucb_pe_select", "ucb_value",
    "__version__",
]
