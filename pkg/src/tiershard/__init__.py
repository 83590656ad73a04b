"""Statistical sharding of embedding tables over DRAM, TT-compressed BRAM and SSD tiers."""
from .config import PipelineConfig, load_config
from .cores import CoreGeometry, estimate_mlp_latency, estimate_tt_latency
from .planner import (PlannerInstance, PlannerSolution, ShardPlanner, check_plan, evaluate,
                      solve_exact, solve_heuristic)
from .remap import RemapTable, build_remap
from .simulator import simulate_batch, simulate_trace
from .stats import AccessProfiler, HardwareProfile, TableStats, compute_cdf, compute_pf
from .trace import AccessTrace, EmbTableSpec, SyntheticTraceConfig, generate_trace, load_trace, subsample
from .tt import TTCores, TTEmbeddingCompressor, TTShape, decompose, reconstruct_batch, reconstruct_row

__version__ = "0.1.0"
