"""Cosine attention in quadratic, chunked-scan and recurrent form, with
manual gradients and a small benchmark harness."""

from .causal import causal_backward, causal_cos_attention, causal_linear_forward, causal_mask, causal_oracle
from .config import AttentionConfig
from .core_ops import (
    apply_padding_mask,
    bidirectional_cos_attention,
    cosine_similarity,
    effective_length,
    l2_normalize_rows,
    softmax_attention,
    stabilization_divisor,
    stabilize_values,
)
from .layer import AttentionLayer, LayerGradients, layer_backward, layer_forward, layer_init, normalize_backward, train_toy
from .recurrent import RecurrentState, state_init, state_readout, state_update, stream_sequence

__version__ = "0.1.0"
