"""Scaling benchmark: step wall time, counted MACs, peak live tensor bytes.

Timing runs are pinned to a single BLAS thread so fitted exponents stay
clean. ``bench_step_time`` times full train steps (forward + backward +
clip + Adam) of a small fixed-config model across sequence lengths and
reads the mixing-specific MAC counters; ``memory_report`` instruments one
mixing layer's forward + backward, which is the object of the memory-
complexity claim, without the surrounding model plumbing. Results go to
CSV as ``layer_kind,N,repeats,mean_s,stddev_s,peak_bytes,macs``.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .dispatcher import DispatcherParams, dispatcher_forward
from .errors import ContractError
from .model import LmModel, ModelConfig, lm_loss
from .msa import MsaParams, msa_forward
from .tensor import Tensor
from .train import AdamState, adam_step, clip_grad_norm

BENCH_VOCAB = 256
MAC_LABELS = {"dispatcher": "dispatch_mix", "msa": "attention"}
CSV_FIELDS = ("layer_kind", "N", "repeats", "mean_s", "stddev_s", "peak_bytes", "macs")


@dataclass
class BenchRecord:
    layer_kind: str
    n: int
    repeats: int
    mean_step_seconds: float
    stddev_seconds: float
    median_step_seconds: float
    peak_tensor_bytes: int
    counted_macs: int
    failed: bool = False


def bench_config(layer_kind: str, n: int, d_model: int = 128, n_layers: int = 2) -> ModelConfig:
    return ModelConfig(layer_kind=layer_kind, d_model=d_model, d_inner=d_model,
                       n_layers=n_layers, n_heads=1, max_seq=n, vocab_size=BENCH_VOCAB, seed=7)


def _train_step(model: LmModel, batch: np.ndarray, state: AdamState,
                params: dict, rng: np.random.Generator, row_dropout_p: float) -> None:
    model.zero_grad()
    loss = lm_loss(model, batch[:, :-1], batch[:, 1:], training=True, rng=rng,
                   row_dropout_p=row_dropout_p)
    T.backward(loss)
    clip_grad_norm(params, 1.0)
    adam_step(params, state, 1e-4)


def bench_step_time(layer_kind: str, n_list: list[int], *, repeats: int = 5,
                    batch_size: int = 4, d_model: int = 128, n_layers: int = 2,
                    warmup: int = 2, row_dropout_p: float = 0.0,
                    seed: int = 7) -> list[BenchRecord]:
    """Measure mean/stddev/median step seconds per N for one layer kind.

    Counted MACs are the layer's characteristic term (gated shift-and-sum
    adds, or attention score/value products) for a single forward pass.
    An allocation failure marks the record failed and the sweep continues.
    """
    records = []
    with threadpool_limits(limits=1):
        for n in n_list:
            rng = np.random.default_rng(seed)
            try:
                model = LmModel(bench_config(layer_kind, n, d_model, n_layers))
                params = model.params()
                state = AdamState(params)
                batch = rng.integers(0, BENCH_VOCAB, size=(batch_size, n + 1))
                for _ in range(warmup):
                    _train_step(model, batch, state, params, rng, row_dropout_p)

                T.MACS.reset()
                T.MEMORY.reset_peak()
                times = []
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    _train_step(model, batch, state, params, rng, row_dropout_p)
                    times.append(time.perf_counter() - t0)
                macs = T.MACS.get(MAC_LABELS[layer_kind]) // repeats
                peak = T.MEMORY.peak_bytes
            except MemoryError:
                records.append(BenchRecord(layer_kind, n, 0, float("nan"), float("nan"),
                                           float("nan"), 0, 0, failed=True))
                continue
            records.append(BenchRecord(
                layer_kind, n, repeats,
                mean_step_seconds=statistics.fmean(times),
                stddev_seconds=statistics.stdev(times) if len(times) > 1 else 0.0,
                median_step_seconds=statistics.median(times),
                peak_tensor_bytes=peak,
                counted_macs=macs))
    return records


def memory_report(layer_kind: str, n_list: list[int], *, batch_size: int = 4,
                  d_model: int = 128, seed: int = 7) -> dict[int, int]:
    """Peak live tensor bytes of one mixing layer's forward + backward per N."""
    peaks: dict[int, int] = {}
    with threadpool_limits(limits=1):
        for n in n_list:
            rng = np.random.default_rng(seed)
            if layer_kind == "dispatcher":
                layer = DispatcherParams(d_model, 1, max_seq=n, rng=rng)
            else:
                layer = MsaParams(d_model, 1, rng=rng)
            x = Tensor(rng.normal(0, 1.0, (batch_size, n, d_model)), requires_grad=True)
            T.MEMORY.reset_peak()
            if layer_kind == "dispatcher":
                out = dispatcher_forward(x, layer)
            else:
                out = msa_forward(x, layer)
            T.backward(T.sum_all(out))
            peaks[n] = T.MEMORY.peak_bytes
            del out, x, layer
    return peaks


def fit_scaling_exponent(n_values, y_values) -> float:
    """Least-squares slope of log(y) against log(N)."""
    ns = np.asarray(sorted(set(int(n) for n in n_values)), dtype=np.float64)
    if len(ns) < 4:
        raise ContractError(f"fit_scaling_exponent: need >= 4 distinct N, got {len(ns)}")
    if ns.max() / ns.min() < 16:
        raise ContractError(
            f"fit_scaling_exponent: N range must span >= 16x, got {ns.max():.0f}/{ns.min():.0f}")
    ys = np.asarray(list(y_values), dtype=np.float64)
    if ys.shape != (len(ns),):
        raise ContractError("fit_scaling_exponent: one y value per distinct N required")
    slope, _ = np.polyfit(np.log(ns), np.log(ys), 1)
    return float(slope)


def linear_fit_relative_residual(n_values, y_values) -> float:
    """||y - (a + b N)|| / ||y|| for the least-squares linear fit."""
    ns = np.asarray(list(n_values), dtype=np.float64)
    ys = np.asarray(list(y_values), dtype=np.float64)
    coeffs = np.polyfit(ns, ys, 1)
    resid = ys - np.polyval(coeffs, ns)
    return float(np.linalg.norm(resid) / np.linalg.norm(ys))


def dropout_speedup(n: int = 2048, *, dropout_p: float = 0.5, repeats: int = 10,
                    batch_size: int = 4, d_model: int = 128, n_layers: int = 2,
                    seed: int = 7) -> tuple[float, float]:
    """Mean dispatcher step seconds without and with row dropout.

    Row dropout is varied in isolation (residual dropout stays off) so the
    comparison measures only the skipped shift-and-sum rounds.
    """
    base = bench_step_time("dispatcher", [n], repeats=repeats, batch_size=batch_size,
                           d_model=d_model, n_layers=n_layers, row_dropout_p=0.0, seed=seed)
    dropped = bench_step_time("dispatcher", [n], repeats=repeats, batch_size=batch_size,
                              d_model=d_model, n_layers=n_layers, row_dropout_p=dropout_p,
                              seed=seed)
    return base[0].mean_step_seconds, dropped[0].mean_step_seconds


def write_csv(records: list[BenchRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for r in records:
            if r.failed:
                continue
            writer.writerow([r.layer_kind, r.n, r.repeats,
                             f"{r.mean_step_seconds:.9f}", f"{r.stddev_seconds:.9f}",
                             r.peak_tensor_bytes, r.counted_macs])


def expected_mix_macs(n: int, d_model: int, n_layers: int, batch_size: int) -> int:
    """Closed form for dispatcher mixing work: R(N) * N * d per layer per item."""
    from .dispatcher import num_rows
    return num_rows(n) * n * d_model * n_layers * batch_size


def expected_attention_macs(n: int, d_model: int, n_layers: int, batch_size: int) -> int:
    """Closed form for attention score + value products: 2 * N^2 * d."""
    return 2 * n * n * d_model * n_layers * batch_size
