"""Training-plan tuner for pipelined large-model training."""

from ._accel import HAVE_NUMBA, backend_name
from .interference import InterferenceParams, fit_params, pred_intf
from .intertuner import TrainingPlan, enumerate_submeshes, solve_inter, tune
from .intratuner import ParetoFrontier, SearchOptions, tune_intra
from .pipesim import PipelinePlan, closed_form_makespan, objective, simulate
from .stagecost import IterationContext, StageConfig, stage_cost
from .workload import ClusterSpec, ModelSpec, OpTimeTable

__version__ = "0.1.0"

__all__ = [
    "HAVE_NUMBA",
    "backend_name",
    "InterferenceParams",
    "fit_params",
    "pred_intf",
    "TrainingPlan",
    "enumerate_submeshes",
    "solve_inter",
    "tune",
    "ParetoFrontier",
    "SearchOptions",
    "tune_intra",
    "PipelinePlan",
    "closed_form_makespan",
    "objective",
    "simulate",
    "IterationContext",
    "StageConfig",
    "stage_cost",
    "ClusterSpec",
    "ModelSpec",
    "OpTimeTable",
]
