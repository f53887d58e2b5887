"""Trace-driven simulator for MoE expert offloading.

Pipeline: synthesize or load a routing trace, compress its visual tokens
with the affinity-aware policy, train or pick an expert-demand predictor,
then run the two-stream cache/transfer simulation and compare scenarios.
"""
from .cache import ExpertCache, LookupStatus, RequestStatus, ResidencyClass
from .compress import CompressionConfig, CompressionPlan, compress
from .errors import (
    ContractError,
    ParseError,
    PlanningError,
    SimulationError,
    TraceError,
    TrainingError,
    ValidationError,
)
from .metrics import AffinityReport, affinity_report, interlayer_similarity, topk_coverage, working_set
from .pipeline import (
    ExecutionPlan,
    MemoryBudget,
    PredictorSpec,
    SimConfig,
    SimReport,
    build_plan,
    plan_prefix,
    run_ablation,
    simulate,
    simulate_hybrid,
    simulate_reactive,
)
from .predictor import (
    HistoryPredictor,
    MLPModel,
    MLPPredictor,
    OraclePredictor,
    RandomPredictor,
    TrainConfig,
    build_dataset,
    build_features,
    build_targets,
    hot_recall,
    predict_topb,
    train,
)
from .trace import (
    ExpertRef,
    Modality,
    RoutingTrace,
    Token,
    TraceGenConfig,
    generate_trace,
    load_trace,
    save_trace,
    validate_trace,
)

__version__ = "0.1.0"
