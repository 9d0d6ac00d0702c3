"""Learning closed-form formulas for preconditioner parameters.

The pipeline generates PDE linear systems (:mod:`~symprecond.problems`),
finds per-instance optimal SOR/SSOR/AMG parameters by search
(:mod:`~symprecond.datagen`), learns a symbolic expression mapping
problem features to the parameter with a risk-seeking policy gradient
(:mod:`~symprecond.train`), and benchmarks the learned formula inside
Krylov solves (:mod:`~symprecond.deploy`).
"""
__version__ = "0.1.0"

from .sparse import CsrMatrix, csr_from_dense, csr_from_triplets, spmv, to_dense
from .problems import Family, ProblemInstance, build_instance, generate_problems
from .precond import PrecondConfig, PrecondKind, make_preconditioner
from .krylov import Method, SolveReport, SolverConfig, estimate_condition, solve
from .expr import Expression, Library, eval_expr, parse, reward, serialize
from .datagen import Objective, ParamDataset, SearchConfig, build_dataset
from .train import TrainConfig, train
from .deploy import ParamPolicy, bench_compare, predict_param

__all__ = [
    "CsrMatrix", "csr_from_dense", "csr_from_triplets", "spmv", "to_dense",
    "Family", "ProblemInstance", "build_instance", "generate_problems",
    "PrecondConfig", "PrecondKind", "make_preconditioner",
    "Method", "SolveReport", "SolverConfig", "estimate_condition", "solve",
    "Expression", "Library", "eval_expr", "parse", "reward", "serialize",
    "Objective", "ParamDataset", "SearchConfig", "build_dataset",
    "TrainConfig", "train",
    "ParamPolicy", "bench_compare", "predict_param",
]
