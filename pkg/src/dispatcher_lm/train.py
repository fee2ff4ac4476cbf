"""Deterministic training loop: stream batching, Adam, clipping, logging.

The corpus is split into batch_size contiguous streams and windows advance
without overlap, wrapping at the end. Given a fixed seed the whole run is
bit-reproducible: batch order, dropout draws, and parameter updates all
derive from explicit generators. Per-step losses append to a CSV log as
``step,loss,lr,seconds``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ContractError, DataError, NumericError
from .model import LmModel, lm_loss, save_checkpoint
from .tensor import Tensor


@dataclass
class TrainConfig:
    batch_size: int
    seq_len: int
    steps: int
    learning_rate: float = 1e-3
    warmup_steps: int = 200
    clip_norm: float = 1.0
    seed: int = 0
    eval_every: int = 0            # 0 disables intermediate checkpoints
    checkpoint_path: str | None = None

    def __post_init__(self):
        for name in ("batch_size", "seq_len", "steps"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.warmup_steps <= self.steps:
            raise ContractError(
                f"warmup_steps must lie in [0, steps], got {self.warmup_steps} vs {self.steps}")
        if self.clip_norm <= 0:
            raise ContractError(f"clip_norm must be positive, got {self.clip_norm}")


@dataclass
class TokenBatch:
    """Next-token training pair: targets are inputs shifted left by one."""

    inputs: np.ndarray
    targets: np.ndarray


class StreamBatcher:
    """Contiguous-stream batching with non-overlapping windows."""

    def __init__(self, ids: np.ndarray, batch_size: int, seq_len: int):
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        per_stream = ids.size // batch_size
        self.n_windows = (per_stream - 1) // seq_len
        if self.n_windows < 1:
            raise DataError(
                f"corpus too short: {ids.size} tokens cannot fill one "
                f"[{batch_size} x {seq_len}] batch window")
        self.streams = ids[:batch_size * per_stream].reshape(batch_size, per_stream)
        self.seq_len = seq_len

    def batch(self, step: int) -> TokenBatch:
        w = (step % self.n_windows) * self.seq_len
        chunk = self.streams[:, w:w + self.seq_len + 1]
        return TokenBatch(inputs=chunk[:, :-1], targets=chunk[:, 1:])


class AdamState:
    """First/second moment buffers, keyed like the model's parameter dict."""

    def __init__(self, params: dict[str, Tensor]):
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}
        self.t = 0


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; parameters without grads are skipped."""
    b1, b2 = betas
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


def clip_grad_norm(params: dict[str, Tensor], clip_norm: float) -> float:
    """Scale all gradients so the global norm is at most clip_norm.

    Returns the pre-clip norm. Non-finite gradients abort with the
    offending parameter's name.
    """
    total = 0.0
    for name, p in params.items():
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
        total += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(total))
    if norm > clip_norm:
        scale = clip_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def warmup_lr(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup from zero; step counts from 0, so step 0 is lr 0."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return base_lr
    return base_lr * step / warmup_steps


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    checkpoint_path: str | None = None
    seconds: float = 0.0


def train(model: LmModel, train_ids: np.ndarray, cfg: TrainConfig, *,
          loss_log_path: str | Path | None = None) -> TrainReport:
    """Run cfg.steps optimization steps; fully reproducible given the seed."""
    batcher = StreamBatcher(train_ids, cfg.batch_size, cfg.seq_len)
    params = model.params()
    state = AdamState(params)
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport()

    log_fh = open(loss_log_path, "a", encoding="utf-8") if loss_log_path else None
    if log_fh and log_fh.tell() == 0:
        log_fh.write("step,loss,lr,seconds\n")

    started = time.perf_counter()
    try:
        for step in range(cfg.steps):
            step_start = time.perf_counter()
            batch = batcher.batch(step)
            model.zero_grad()
            loss = lm_loss(model, batch.inputs, batch.targets, training=True, rng=rng)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise NumericError(f"non-finite training loss at step {step}")
            T.backward(loss)
            report.grad_norms.append(clip_grad_norm(params, cfg.clip_norm))
            lr = warmup_lr(step, cfg.learning_rate, cfg.warmup_steps)
            adam_step(params, state, lr)
            report.losses.append(loss_value)
            if log_fh:
                log_fh.write(f"{step},{loss_value:.17g},{lr:.17g},"
                             f"{time.perf_counter() - step_start:.6f}\n")
            if (cfg.checkpoint_path and cfg.eval_every
                    and (step + 1) % cfg.eval_every == 0 and step + 1 < cfg.steps):
                save_checkpoint(model, cfg.checkpoint_path)
    finally:
        if log_fh:
            log_fh.close()

    if cfg.checkpoint_path:
        save_checkpoint(model, cfg.checkpoint_path)
        report.checkpoint_path = cfg.checkpoint_path
    report.seconds = time.perf_counter() - started
    return report
