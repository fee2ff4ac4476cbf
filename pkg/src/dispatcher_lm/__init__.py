"""dispatcher-lm: a desk-scale language-modelling toolkit built around a
gated shift-and-sum mixing layer, with a masked self-attention baseline and
a benchmark harness for causality, complexity, and training-parity checks.
"""

from .dispatcher import (CausalShiftMask, DispatcherParams, RowDropoutMask,
                         build_causal_mask, dispatch_mix, dispatcher_forward,
                         num_rows, sample_row_mask)
from .model import (LmModel, ModelConfig, generate, lm_forward, lm_loss,
                    load_checkpoint, perplexity, save_checkpoint)
from .msa import MsaParams, msa_forward
from .tensor import MACS, MEMORY, Tensor, backward, no_grad
from .train import TokenBatch, TrainConfig, adam_step, clip_grad_norm, train

__all__ = [
    "CausalShiftMask", "DispatcherParams", "RowDropoutMask", "build_causal_mask",
    "dispatch_mix", "dispatcher_forward", "num_rows", "sample_row_mask",
    "LmModel", "ModelConfig", "generate", "lm_forward", "lm_loss",
    "load_checkpoint", "perplexity", "save_checkpoint",
    "MsaParams", "msa_forward",
    "MACS", "MEMORY", "Tensor", "backward", "no_grad",
    "TokenBatch", "TrainConfig", "adam_step", "clip_grad_norm", "train",
]

__version__ = "0.1.0"
