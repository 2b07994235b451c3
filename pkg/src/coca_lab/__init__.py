"""Collinear constrained attention (CoCA) and a RoPE baseline in a small causal transformer."""

__version__ = "0.1.0"

from .attention import (
    AttentionCache,
    AttentionParams,
    attention_forward,
    causal_mask_softmax,
    coca_scores_fused,
    coca_scores_naive,
    fold_relu_t,
    rope_scores_baseline,
)
from .errors import (
    CocaLabError,
    ConfigError,
    DimensionError,
    InputError,
    NumericError,
    RangeError,
    StateError,
)
from .model import CocaLM, ModelConfig, gradient_check, init_model, next_token_loss
from .rotary import RotaryTable, apply_rotation, build_rotary_table, ntk_rescale
from .training import TrainConfig, adamw_step, lr_at, train_loop
