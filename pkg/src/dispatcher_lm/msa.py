"""Masked self-attention baseline, the quadratic reference layer.

Standard scaled dot-product attention with an additive -inf mask on
strictly-upper-triangular score entries. Score and weighted-sum matmuls
are counted under the "attention" MAC label so the harness can compare
the N^2*d term against the dispatcher's N*log2(N)*d mixing term.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor


class MsaParams:
    """Query/key/value/output projections for one attention layer."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator,
                 init_std: float = 0.02):
        if d_model % n_heads != 0:
            raise ContractError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.wq = Tensor(rng.normal(0.0, init_std, (d_model, d_model)), requires_grad=True)
        self.bq = Tensor(np.zeros(d_model), requires_grad=True)
        self.wk = Tensor(rng.normal(0.0, init_std, (d_model, d_model)), requires_grad=True)
        self.bk = Tensor(np.zeros(d_model), requires_grad=True)
        self.wv = Tensor(rng.normal(0.0, init_std, (d_model, d_model)), requires_grad=True)
        self.bv = Tensor(np.zeros(d_model), requires_grad=True)
        self.wo = Tensor(rng.normal(0.0, init_std, (d_model, d_model)), requires_grad=True)
        self.bo = Tensor(np.zeros(d_model), requires_grad=True)

    def named(self):
        yield "wq", self.wq
        yield "bq", self.bq
        yield "wk", self.wk
        yield "bk", self.bk
        yield "wv", self.wv
        yield "bv", self.bv
        yield "wo", self.wo
        yield "bo", self.bo


@lru_cache(maxsize=4)
def _causal_bias(n: int) -> Tensor:
    """Additive mask [N, N]: 0 at or below the diagonal, -inf above."""
    bias = np.zeros((n, n))
    bias[np.triu_indices(n, k=1)] = -np.inf
    return Tensor(bias)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    # [.., N, d] -> [.., H, N, d/H]
    n, d = x.shape[-2], x.shape[-1]
    x = T.reshape(x, x.shape[:-1] + (n_heads, d // n_heads))
    return T.transpose(x, -3, -2)


def msa_forward(x: Tensor, params: MsaParams, return_weights: bool = False):
    """Causal multi-head attention over x [.., N, d].

    With return_weights=True also returns the post-softmax attention
    weights as a plain ndarray (for inspection; gradients are unaffected).
    """
    n = x.shape[-2]
    dh = params.d_model // params.n_heads

    q = T.add(T.matmul(x, params.wq), params.bq)
    k = T.add(T.matmul(x, params.wk), params.bk)
    v = T.add(T.matmul(x, params.wv), params.bv)

    q = T.mul_const(_split_heads(q, params.n_heads), 1.0 / np.sqrt(dh))
    k = _split_heads(k, params.n_heads)
    v = _split_heads(v, params.n_heads)

    scores = T.matmul(q, T.transpose(k, -1, -2), mac_label="attention")   # [.., H, N, N]
    weights = T.masked_softmax(scores, _causal_bias(n))
    ctx = T.matmul(weights, v, mac_label="attention")                     # [.., H, N, d/H]

    ctx = T.transpose(ctx, -3, -2)
    ctx = T.reshape(ctx, ctx.shape[:-2] + (params.d_model,))
    out = T.add(T.matmul(ctx, params.wo), params.bo)
    if return_weights:
        return out, weights.data.copy()
    return out
