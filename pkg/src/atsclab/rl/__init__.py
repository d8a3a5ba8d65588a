from .agents import (
    A2CHyper,
    A2CPolicyAgent,
    AgentKind,
    EpsilonSchedule,
    FixedTimeController,
    GreedyController,
    IQLAgent,
    NaNPolicyError,
    RandomController,
    ReplayBuffer,
    Transition,
    greedy_action,
    iql_target,
    phase_green_lanes,
    sample_categorical,
)
from .returns import BatchOrderError, a2c_losses, entropy, estimate_returns
from .rewards import (
    FeatureConfig,
    FeaturePipeline,
    discount_neighbor_state,
    normalize_clip_reward,
    normalize_clip_state,
    spatial_discount_all,
    spatial_discount_reward,
)
from .training import (
    TRAINING_CSV_HEADER,
    LayerSizes,
    Trainer,
    TrainingDiverged,
    build_layer_specs,
)
