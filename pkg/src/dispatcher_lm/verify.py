"""Property-check routines shared by the test suite and the CLI `check` command.

Each check pairs the implementation with an independent route: a dense
lower-triangular matrix oracle for the mixing loop, bitwise perturbation
probes for causality, and central finite differences for gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dispatcher import (DispatcherParams, build_causal_mask, dispatch_mix,
                         dispatcher_forward, num_rows)
from .model import LmModel, ModelConfig, lm_forward, lm_loss
from .tensor import Tensor


def dense_mix_oracle(v: np.ndarray, gates: np.ndarray, keep: np.ndarray | None = None) -> np.ndarray:
    """Reference for dispatch_mix built from explicit shift matrices.

    ``v`` is [N, d], ``gates`` is [N, R, H] (already masked). Per head, the
    transfer matrix is the ascending-row product of (I + diag(g_r) S_{2^r})
    with S the circular right-shift matrix; it is applied densely to the
    head's channel slice.
    """
    n, d = v.shape
    rows, heads = gates.shape[1], gates.shape[2]
    dh = d // heads
    if keep is None:
        keep = np.ones(rows, dtype=np.int64)
    out = np.empty_like(v)
    eye = np.eye(n)
    for h in range(heads):
        transfer = eye.copy()
        for r in range(rows):
            if not keep[r]:
                continue
            shift_mat = np.roll(eye, 1 << r, axis=0)   # S[p, (p - s) mod n] = 1
            transfer = (eye + np.diag(gates[:, r, h]) @ shift_mat) @ transfer
        out[:, h * dh:(h + 1) * dh] = transfer @ v[:, h * dh:(h + 1) * dh]
    return out


def masked_gates(raw: np.ndarray, n: int) -> np.ndarray:
    """Apply the causal shift mask to raw [N, R, H] gate values."""
    mask = build_causal_mask(n, num_rows(n)).mask   # [R, N]
    return raw * mask.T[:, :, None]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def model_causality_probe(model: LmModel, n: int, trials: int,
                          rng: np.random.Generator) -> tuple[bool, str]:
    """Edit one token; logits strictly before it must be bitwise unchanged."""
    vocab = model.config.vocab_size
    for _ in range(trials):
        ids = rng.integers(0, vocab, size=(1, n))
        j = int(rng.integers(0, n))
        edited = ids.copy()
        edited[0, j] = (edited[0, j] + 1 + int(rng.integers(0, vocab - 1))) % vocab
        with T.no_grad():
            base = lm_forward(model, ids).data
            alt = lm_forward(model, edited).data
        if j > 0 and not np.array_equal(base[:, :j], alt[:, :j]):
            delta = np.max(np.abs(base[:, :j] - alt[:, :j]))
            return False, f"N={n}: edit at {j} leaked backward (max delta {delta:.3e})"
    return True, f"N={n}: {trials} edits, zero backward leakage"


def layer_reachability(n: int, d: int = 16, seed: int = 0) -> tuple[bool, str]:
    """With gates saturated at ~1, d sum(out[i]) / d in[j] is nonzero iff j <= i."""
    rng = np.random.default_rng(seed)
    params = DispatcherParams(d, 1, max_seq=n, rng=rng)
    params.b1.data[...] = 30.0   # sigmoid(30): gates within 1e-13 of 1
    for i in [0, n // 2, n - 1]:
        x = Tensor(rng.normal(0, 1.0, (n, d)), requires_grad=True)
        out = dispatcher_forward(x, params)
        row = T.take_index(out, i, axis=0)
        T.backward(T.sum_all(row))
        norms = np.linalg.norm(x.grad, axis=-1)
        if not np.all(norms[:i + 1] > 1e-12):
            return False, f"N={n}, i={i}: some j <= i unreachable"
        if i + 1 < n and not np.all(norms[i + 1:] == 0.0):
            return False, f"N={n}, i={i}: gradient leaks to j > i"
    return True, f"N={n}: receptive field is exactly 0..i"


def finite_difference_check(model: LmModel, inputs: np.ndarray, targets: np.ndarray,
                            h: float = 1e-5, tol: float = 1e-4,
                            max_elems_per_param: int | None = None,
                            rng: np.random.Generator | None = None) -> tuple[float, list[str]]:
    """Compare analytic gradients to central differences, parameter by parameter.

    Returns the worst relative error and any failures. With
    ``max_elems_per_param`` set, a random subset of each parameter is
    probed instead of every element.
    """
    def loss_value() -> float:
        with T.no_grad():
            return lm_loss(model, inputs, targets).item()

    model.zero_grad()
    loss = lm_loss(model, inputs, targets)
    T.backward(loss)

    worst = 0.0
    failures: list[str] = []
    for name, p in model.named_params():
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1) if p.grad is not None else np.zeros_like(flat)
        if max_elems_per_param is not None and flat.size > max_elems_per_param:
            idx = rng.choice(flat.size, size=max_elems_per_param, replace=False)
        else:
            idx = range(flat.size)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_value()
            flat[i] = orig - h
            down = loss_value()
            flat[i] = orig
            fd = (up - down) / (2 * h)
            rel = abs(grad[i] - fd) / max(abs(grad[i]), abs(fd), 1e-6)
            if rel > worst:
                worst = rel
            if rel > tol:
                failures.append(f"{name}[{i}]: analytic {grad[i]:.8e} vs fd {fd:.8e} (rel {rel:.2e})")
    return worst, failures


def mix_oracle_check(n_values=(2, 3, 4, 5, 8, 16, 33, 64), heads: int = 2,
                     d: int = 8, seed: int = 0, rtol: float = 1e-9) -> tuple[bool, str]:
    """dispatch_mix against the dense transfer-matrix oracle."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n in n_values:
        rows = num_rows(n)
        v = rng.normal(0, 1.0, (n, d))
        raw = rng.random((n, rows, heads))
        gates = masked_gates(raw, n)
        expect = dense_mix_oracle(v, gates)
        with T.no_grad():
            got = dispatch_mix(Tensor(v), Tensor(gates), build_causal_mask(n, rows)).data
        rel = np.max(np.abs(got - expect)) / max(np.max(np.abs(expect)), 1e-30)
        worst = max(worst, rel)
        if rel > rtol:
            return False, f"N={n}: relative error {rel:.3e} exceeds {rtol:.0e}"
    return True, f"max relative error {worst:.3e} over N in {tuple(n_values)}"


def run_check_suite(seed: int = 0) -> list[CheckResult]:
    """The `check` command's suite: causality, oracle equivalence, gradients."""
    results: list[CheckResult] = []
    rng = np.random.default_rng(seed)

    for kind in ("dispatcher", "msa"):
        cfg = ModelConfig(layer_kind=kind, d_model=16, d_inner=16, n_layers=2,
                          n_heads=2, max_seq=128, vocab_size=31, seed=seed)
        model = LmModel(cfg)
        ok_all, details = True, []
        for n in (1, 2, 5, 16, 33, 128):
            ok, detail = model_causality_probe(model, n, trials=5, rng=rng)
            ok_all &= ok
            if not ok:
                details.append(detail)
        results.append(CheckResult(f"causality[{kind}]", ok_all,
                                   "; ".join(details) or "zero backward leakage"))

    ok, detail = mix_oracle_check(seed=seed)
    results.append(CheckResult("mix-dense-oracle", ok, detail))

    ok, detail = layer_reachability(n=33, seed=seed)
    results.append(CheckResult("reachability", ok, detail))

    cfg = ModelConfig(layer_kind="dispatcher", d_model=8, d_inner=8, n_layers=2,
                      n_heads=2, max_seq=8, vocab_size=11, seed=seed)
    model = LmModel(cfg)
    inputs = rng.integers(0, 11, size=(2, 8))
    targets = rng.integers(0, 11, size=(2, 8))
    worst, failures = finite_difference_check(model, inputs, targets,
                                              max_elems_per_param=24, rng=rng)
    results.append(CheckResult("gradient-fd", not failures,
                               failures[0] if failures else f"max relative error {worst:.2e}"))
    return results
