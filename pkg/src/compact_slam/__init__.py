"""Incremental compact pose-graph SLAM.

Lie-group SE(2)/SE(3) state representation, sparse block-matrix
Gauss-Newton with resumed Cholesky factorization, incremental marginal
covariance recovery, and an information-driven trajectory compaction
driver with calibration, simulation, graph I/O, evaluation and CLI
front ends.
"""

from .block_matrix import (BlockDimensionError, BlockLayout,
                           BlockSparseMatrix, IndefiniteSystemError,
                           block_amd_ordering, cholesky_full,
                           cholesky_resumed)
from .compact import (CalibrationError, CompactConfig, CompactEngine,
                      ReplayOracle, StepReport, calibrate_thresholds,
                      default_config, distance_probabilities, mutual_info)
from .covariance import (CovarianceCache, CovarianceFallback,
                         marginal_block_column, recursive_element,
                         schur_marginalize)
from .evaluation import (ErrorReport, Trajectory, compute_errors,
                         conservativeness_report, kabsch_align, reconstruct)
from .graph_io import (GraphDataError, GraphFile, GraphParseError,
                       graph_to_solver, parse_graph, write_graph)
from .se_math import (compose, exp_map, inverse_compose, log_map,
                      concatenate_measurement, relative_displacement,
                      reverse_measurement)
from .simulator import SimResult, SimSpec, simulate
from .solver import (IncrementalSolver, LOOP, ODOMETRY, PRIOR,
                     RejectedEdgeError)

__version__ = "0.1.0"

__all__ = [
    "BlockDimensionError", "BlockLayout", "BlockSparseMatrix",
    "IndefiniteSystemError", "block_amd_ordering", "cholesky_full",
    "cholesky_resumed", "CalibrationError", "CompactConfig",
    "CompactEngine", "ReplayOracle", "StepReport", "calibrate_thresholds",
    "default_config", "distance_probabilities", "mutual_info",
    "CovarianceCache", "CovarianceFallback", "marginal_block_column",
    "recursive_element", "schur_marginalize", "ErrorReport", "Trajectory",
    "compute_errors", "conservativeness_report", "kabsch_align",
    "reconstruct", "GraphDataError", "GraphFile", "GraphParseError",
    "graph_to_solver", "parse_graph", "write_graph", "compose", "exp_map",
    "inverse_compose", "log_map", "concatenate_measurement",
    "relative_displacement", "reverse_measurement", "SimResult", "SimSpec",
    "simulate", "IncrementalSolver", "LOOP", "ODOMETRY", "PRIOR",
    "RejectedEdgeError", "__version__",
]
