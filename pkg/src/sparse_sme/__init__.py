"""Multi-task sparse mixture-of-experts regression at desk scale.

Dual-branch fusion of precomputed image/text features with learnable region
and POI embeddings, a three-tier expert pool routed per task through
threshold-sparsified softmax gates, and task-specific fusion heads, trained
end to end by a hand-derived gradient engine.
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    Dataset,
    RegionRecord,
    SplitAssignment,
    TargetTransform,
    fit_target_transform,
    gen_synthetic,
    poi_featurize,
    read_dataset,
    split_dataset,
    write_dataset,
)
from .errors import (
    ConfigError,
    DataError,
    FormatError,
    NumericError,
    ShapeError,
    SparseSmeError,
    UnknownRegionError,
    UnknownTaskError,
)
from .estimator import SparseMoERegressor, check_feature_matrix, check_targets
from .metrics import TaskMetrics, aggregate, evaluate_tasks, mae, r2, rmse
from .model import (
    Branch,
    Expert,
    ExpertKind,
    GateVector,
    Model,
    ModelConfig,
    backward,
    build_model,
    count_parameters,
    eligible_count,
    eligible_experts,
    expert_forward,
    expert_pool_kinds,
    forward_batch,
    fuse_inputs,
    pool_size,
    predict,
    predict_batch,
    route,
    single_task_config,
    sme_forward,
)
from .numcore import ParamTape, Rng, grad_check, grad_check_report
from .train import (
    EPSILON_SWEEP_DEFAULT,
    REFERENCE_ALLOCATIONS,
    REGION_DIM_SWEEP_DEFAULT,
    AblationRow,
    AdamState,
    LossWeights,
    MultiSeedResult,
    RunHistory,
    SweepPoint,
    TrainConfig,
    TrainResult,
    adam_step,
    check_allocation_budget,
    evaluate,
    mean_active_counts,
    multi_task_loss,
    run_ablation,
    run_multi_seed,
    run_one,
    run_single_task,
    run_sweep,
    train,
)

__version__ = "0.1.0"
