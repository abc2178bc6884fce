"""Differential gated self-attention on a small numpy autodiff engine."""

from .attention import (AttentionMaps, AttentionParams, HeadLayout, diff_attn_forward,
                        lambda_init_schedule, mdgsa_forward, vanilla_mha_forward)
from .autograd import Tensor, backward, gradcheck, no_grad
from .models import Batch, LayerStack, ModelConfig, build_model, count_params, model_forward

__version__ = "0.1.0"
