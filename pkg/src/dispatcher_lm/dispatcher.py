"""The dispatcher mixing layer: gated shift-and-sum message passing.

The layer computes per-token sigmoid gates, then repeatedly adds a
right-rotated copy of the value stream, doubling the rotation each round:

    c = sigmoid(linear1(x)) * mask          # [.., N, R, H] gates
    v = linear2(x)
    for r in 0..R-1:   v += c[.., r, :] (x) roll_right(v, 2**r)
    out = linear3(v)

Rotation is circular; the constant mask zeroes every gate whose rotation
source wrapped past position 0, which is what keeps the layer causal.
Each head's scalar gate multiplies one contiguous d/H channel slice.
Rows run in ascending shift order so that any gap i-j is reachable through
its binary decomposition. With sequence length N, the loop runs
R = ceil(log2(N)) rounds (zero for N = 1): rows while 2**r < N.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import CapacityError, ContractError, DimensionError
from .tensor import Tensor


def num_rows(n: int) -> int:
    """Number of shift-and-sum rounds for sequence length n.

    Rows r = 0, 1, ... run while 2**r < n, i.e. ceil(log2(n)) rounds and
    none at all for a single token.
    """
    if n < 1:
        raise ContractError(f"num_rows: sequence length must be >= 1, got {n}")
    return int(n - 1).bit_length()


@dataclass
class CausalShiftMask:
    """Constant binary mask [R, N]: mask[r][p] = 1 iff p >= 2**r.

    Zeros sit exactly where roll_right(v, 2**r) would deliver a value that
    wrapped around the sequence end.
    """

    n: int
    mask: np.ndarray

    @property
    def rows(self) -> int:
        return self.mask.shape[0]


def build_causal_mask(n: int, rows: int) -> CausalShiftMask:
    if rows != num_rows(n):
        raise ContractError(f"build_causal_mask: rows={rows} but num_rows({n})={num_rows(n)}")
    positions = np.arange(n)
    shifts = 2 ** np.arange(rows)
    mask = (positions[None, :] >= shifts[:, None]).astype(np.float64)
    return CausalShiftMask(n=n, mask=mask)


@lru_cache(maxsize=8)
def _cached_mask(n: int) -> CausalShiftMask:
    return build_causal_mask(n, num_rows(n))


@dataclass
class RowDropoutMask:
    """Per-round keep flags; evaluation always keeps every row."""

    keep: np.ndarray

    @classmethod
    def all_ones(cls, rows: int) -> "RowDropoutMask":
        return cls(keep=np.ones(rows, dtype=np.int64))


def sample_row_mask(rows: int, dropout_p: float, rng: np.random.Generator) -> RowDropoutMask:
    """Drop each shift-and-sum round independently with probability dropout_p.

    Sampled once per training step and shared across the batch. Kept rows
    are not rescaled; skipping is the whole mechanism.
    """
    if not 0.0 <= dropout_p <= 1.0:
        raise ContractError(f"sample_row_mask: dropout_p must be in [0, 1], got {dropout_p}")
    keep = (rng.random(rows) >= dropout_p).astype(np.int64)
    return RowDropoutMask(keep=keep)


class DispatcherParams:
    """The three dense maps of one dispatcher layer.

    linear1: d -> R_max * H gate logits per token (R_max covers max_seq;
    shorter sequences use only the first num_rows(N) rows). linear2 and
    linear3 are the d -> d value and output projections.
    """

    def __init__(self, d_model: int, n_heads: int, max_seq: int, rng: np.random.Generator,
                 init_std: float = 0.02):
        if d_model % n_heads != 0:
            raise ContractError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.r_max = num_rows(max_seq)
        gate_dim = self.r_max * n_heads
        self.w1 = Tensor(rng.normal(0.0, init_std, (d_model, gate_dim)), requires_grad=True)
        self.b1 = Tensor(np.zeros(gate_dim), requires_grad=True)
        self.w2 = Tensor(rng.normal(0.0, init_std, (d_model, d_model)), requires_grad=True)
        self.b2 = Tensor(np.zeros(d_model), requires_grad=True)
        self.w3 = Tensor(rng.normal(0.0, init_std, (d_model, d_model)), requires_grad=True)
        self.b3 = Tensor(np.zeros(d_model), requires_grad=True)

    def named(self):
        yield "w1", self.w1
        yield "b1", self.b1
        yield "w2", self.w2
        yield "b2", self.b2
        yield "w3", self.w3
        yield "b3", self.b3


def dispatch_mix(v: Tensor, c: Tensor, mask: CausalShiftMask,
                 keep: RowDropoutMask | None = None) -> Tensor:
    """Run the shift-and-sum rounds: v <- v + c[.., r, :] (x) roll_right(v, 2**r).

    ``v`` is [.., N, d]; ``c`` is [.., N, R, H], already sigmoid-activated
    and mask-multiplied. Head h's gate scales channels [h*d/H, (h+1)*d/H).
    Rows with keep[r] == 0 are skipped entirely. Mixing work is counted as
    N*d multiply-adds per kept row per batch item under the "dispatch_mix"
    MAC label.
    """
    n, d = v.shape[-2], v.shape[-1]
    rows, heads = c.shape[-2], c.shape[-1]
    if c.shape[:-3] != v.shape[:-2] or c.shape[-3] != n:
        raise DimensionError(f"dispatch_mix: gates {c.shape} do not match values {v.shape}")
    if d % heads != 0:
        raise DimensionError(f"dispatch_mix: d={d} not divisible by heads={heads}")
    if mask.n != n or mask.rows != rows:
        raise DimensionError(
            f"dispatch_mix: mask is [{mask.rows}, {mask.n}] but gates imply [{rows}, {n}]")
    if keep is None:
        keep = RowDropoutMask.all_ones(rows)
    if keep.keep.shape != (rows,):
        raise DimensionError(f"dispatch_mix: keep mask {keep.keep.shape} != ({rows},)")

    batch = int(np.prod(v.shape[:-2], dtype=np.int64))
    v4 = T.reshape(v, v.shape[:-1] + (heads, d // heads))
    for r in range(rows):
        if not keep.keep[r]:
            continue
        gate = T.take_index(c, r, axis=-2)                      # [.., N, H]
        gate = T.reshape(gate, gate.shape + (1,))               # broadcast over d/H
        rolled = T.roll_right(v4, 1 << r, axis=-3)
        v4 = T.add(v4, T.mul(gate, rolled))
        T.MACS.add("dispatch_mix", batch * n * d)
    return T.reshape(v4, v.shape)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


def dispatcher_forward(x: Tensor, params: DispatcherParams, *, training: bool = False,
                       dropout_p: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """Full dispatcher layer over x [.., N, d].

    Output position p depends on input positions 0..p only. During
    training, shift-and-sum rounds are skipped per sample_row_mask.
    """
    n = x.shape[-2]
    max_seq_cap = 1 << params.r_max
    if n > max_seq_cap:
        raise CapacityError(f"dispatcher_forward: N={n} exceeds layer capacity {max_seq_cap}")
    rows = num_rows(n)
    mask = _cached_mask(n)

    c = T.sigmoid(_linear(x, params.w1, params.b1))             # [.., N, R_max*H]
    c = T.reshape(c, c.shape[:-1] + (params.r_max, params.n_heads))
    if rows < params.r_max:
        c = T.narrow(c, axis=-2, start=0, length=rows)
    # mask transposed to [N, R, 1]: broadcasts over batch dims and heads
    c = T.mul_const(c, np.ascontiguousarray(mask.mask.T)[:, :, None])

    keep = None
    if training and dropout_p > 0.0:
        if rng is None:
            raise ContractError("dispatcher_forward: training row dropout needs an rng")
        keep = sample_row_mask(rows, dropout_p, rng)

    v = _linear(x, params.w2, params.b2)
    v = dispatch_mix(v, c, mask, keep)
    return _linear(v, params.w3, params.b3)
