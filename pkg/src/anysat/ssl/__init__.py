"""Self-supervised pretraining: masking, losses, student/teacher passes and the loop."""

from .jepa import StudentOutput, TileLoss, ema_update, masked_tokens, student_forward, teacher_forward, tile_loss
from .losses import LossInputError, contrastive_loss, contrastive_pair_masks, jepa_loss
from .masking import (
    MaskConfig,
    MaskPlan,
    MaskPlanError,
    expected_drop_rate,
    random_dropped,
    rectangle_drop,
    sample_dropped,
    sample_mask_plan,
)
from .pretrain import (
    LossBreakdown,
    NonFiniteLossError,
    PretrainConfig,
    PretrainState,
    init_state,
    pretrain,
    restore_state,
    state_arrays,
    train_step,
)
