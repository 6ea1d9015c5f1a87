"""Fault-tolerant K-means: checksum-protected GEMM assignment with online
single-error correction, deterministic fault injection, and tile autotuning."""

__version__ = "0.1.0"

from .abft import (
    DetectionEvent,
    DetectionReport,
    Threshold,
    checked_assign,
    checked_gemm,
    correct,
    dmr_reduce,
    encode_cols,
    encode_rows,
    locate,
)
from .errors import FaultEscalationError, FormatError
from .estimator import FTKMeans
from .faults import (
    FaultEntry,
    FaultHook,
    FaultSchedule,
    FaultSpec,
    ScheduledFaultHook,
    flip_bit,
    plan_faults,
)
from .gemm import AssignResult, fused_assign, gemm_tiled, true_sq_dists
from .kmeans import KMeansConfig, KMeansResult, init_centroids, lloyd, update_step
from .matrix import gaussian_mixture, mat_load, mat_random, mat_store, row_sq_norms
from .tiles import TileConfig, default_config, make_config, parse_tile
from .tuner import TuneTable, benchmark, default_grid, enumerate_configs, feasible, select

__all__ = [
    "AssignResult",
    "DetectionEvent",
    "DetectionReport",
    "FTKMeans",
    "FaultEntry",
    "FaultEscalationError",
    "FaultHook",
    "FaultSchedule",
    "FaultSpec",
    "FormatError",
    "KMeansConfig",
    "KMeansResult",
    "ScheduledFaultHook",
    "Threshold",
    "TileConfig",
    "TuneTable",
    "benchmark",
    "checked_assign",
    "checked_gemm",
    "correct",
    "default_config",
    "default_grid",
    "dmr_reduce",
    "encode_cols",
    "encode_rows",
    "enumerate_configs",
    "feasible",
    "flip_bit",
    "fused_assign",
    "gaussian_mixture",
    "gemm_tiled",
    "init_centroids",
    "lloyd",
    "locate",
    "make_config",
    "mat_load",
    "mat_random",
    "mat_store",
    "parse_tile",
    "plan_faults",
    "row_sq_norms",
    "select",
    "true_sq_dists",
    "update_step",
]
