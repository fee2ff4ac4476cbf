"""Causal language model over either mixing layer.

Pre-norm residual blocks: x + Drop(Mix(LN(x))), then x + Drop(FFN(LN(x))).
Token and learned positional embeddings feed the stack; the output head is
weight-tied to the token embedding table. Checkpoints are a binary format:
magic "DSP1", a little-endian uint32 manifest length, a JSON manifest
(config, named parameter shapes, byte offsets), then raw little-endian
float64 blobs in manifest order - loading one back is bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .dispatcher import DispatcherParams, dispatcher_forward, num_rows
from .errors import CapacityError, ContractError, DataError
from .msa import MsaParams, msa_forward
from .tensor import Tensor

CHECKPOINT_MAGIC = b"DSP1"
LAYER_KINDS = ("dispatcher", "msa")


@dataclass
class ModelConfig:
    layer_kind: str
    d_model: int
    d_inner: int
    n_layers: int
    n_heads: int
    max_seq: int
    vocab_size: int
    dropout_p: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.layer_kind not in LAYER_KINDS:
            raise ContractError(f"layer_kind must be one of {LAYER_KINDS}, got {self.layer_kind!r}")
        for field in ("d_model", "d_inner", "n_layers", "n_heads", "max_seq", "vocab_size"):
            if getattr(self, field) < 1:
                raise ContractError(f"{field} must be positive, got {getattr(self, field)}")
        if self.d_model % self.n_heads != 0:
            raise ContractError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ContractError(f"dropout_p must be in [0, 1], got {self.dropout_p}")


class _Block:
    """One pre-norm residual block: mixing layer + feed-forward."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.d_model
        if cfg.layer_kind == "dispatcher":
            self.mix = DispatcherParams(d, cfg.n_heads, cfg.max_seq, rng)
        else:
            self.mix = MsaParams(d, cfg.n_heads, rng)
        self.ln1_g = Tensor(np.ones(d), requires_grad=True)
        self.ln1_b = Tensor(np.zeros(d), requires_grad=True)
        self.ln2_g = Tensor(np.ones(d), requires_grad=True)
        self.ln2_b = Tensor(np.zeros(d), requires_grad=True)
        self.ffn_w1 = Tensor(rng.normal(0.0, 0.02, (d, cfg.d_inner)), requires_grad=True)
        self.ffn_b1 = Tensor(np.zeros(cfg.d_inner), requires_grad=True)
        self.ffn_w2 = Tensor(rng.normal(0.0, 0.02, (cfg.d_inner, d)), requires_grad=True)
        self.ffn_b2 = Tensor(np.zeros(d), requires_grad=True)

    def named(self, prefix: str):
        yield f"{prefix}.ln1.g", self.ln1_g
        yield f"{prefix}.ln1.b", self.ln1_b
        for name, p in self.mix.named():
            yield f"{prefix}.mix.{name}", p
        yield f"{prefix}.ln2.g", self.ln2_g
        yield f"{prefix}.ln2.b", self.ln2_b
        yield f"{prefix}.ffn.w1", self.ffn_w1
        yield f"{prefix}.ffn.b1", self.ffn_b1
        yield f"{prefix}.ffn.w2", self.ffn_w2
        yield f"{prefix}.ffn.b2", self.ffn_b2


class LmModel:
    """Parameters plus forward pass; the output head shares tok_emb."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        d = config.d_model
        self.tok_emb = Tensor(rng.normal(0.0, 0.02, (config.vocab_size, d)), requires_grad=True)
        self.pos_emb = Tensor(rng.normal(0.0, 0.02, (config.max_seq, d)), requires_grad=True)
        self.blocks = [_Block(config, rng) for _ in range(config.n_layers)]
        self.final_ln_g = Tensor(np.ones(d), requires_grad=True)
        self.final_ln_b = Tensor(np.zeros(d), requires_grad=True)
        self.n_params = sum(p.size for _, p in self.named_params())

    def named_params(self):
        yield "tok_emb", self.tok_emb
        yield "pos_emb", self.pos_emb
        for i, block in enumerate(self.blocks):
            yield from block.named(f"layers.{i}")
        yield "final_ln.g", self.final_ln_g
        yield "final_ln.b", self.final_ln_b

    def params(self) -> dict[str, Tensor]:
        return dict(self.named_params())

    def zero_grad(self):
        for _, p in self.named_params():
            p.grad = None


def _residual_dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    # inverted dropout: scale kept activations so eval needs no correction
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return T.mul_const(x, mask)


def lm_forward(model: LmModel, ids: np.ndarray, *, training: bool = False,
               rng: np.random.Generator | None = None,
               row_dropout_p: float | None = None) -> Tensor:
    """Logits [.., N, vocab] for token ids [.., N]; causal in the position axis.

    ``row_dropout_p`` overrides the dispatcher row-dropout probability
    (defaults to config.dropout_p); residual dropout always uses
    config.dropout_p. Both apply only when ``training``.
    """
    cfg = model.config
    ids = np.asarray(ids, dtype=np.int64)
    n = ids.shape[-1]
    if n > cfg.max_seq:
        raise CapacityError(f"lm_forward: sequence length {n} exceeds max_seq {cfg.max_seq}")
    drop_p = cfg.dropout_p if training else 0.0
    row_p = row_dropout_p if row_dropout_p is not None else cfg.dropout_p
    if training and (drop_p > 0.0 or row_p > 0.0) and rng is None:
        raise ContractError("lm_forward: training with dropout needs an rng")

    x = T.add(T.embedding(model.tok_emb, ids),
              T.embedding(model.pos_emb, np.arange(n)))
    for block in model.blocks:
        h = T.layer_norm(x, block.ln1_g, block.ln1_b)
        if cfg.layer_kind == "dispatcher":
            h = dispatcher_forward(h, block.mix, training=training, dropout_p=row_p, rng=rng)
        else:
            h = msa_forward(h, block.mix)
        if training and drop_p > 0.0:
            h = _residual_dropout(h, drop_p, rng)
        x = T.add(x, h)

        h = T.layer_norm(x, block.ln2_g, block.ln2_b)
        h = T.add(T.matmul(h, block.ffn_w1), block.ffn_b1)
        h = T.gelu(h)
        h = T.add(T.matmul(h, block.ffn_w2), block.ffn_b2)
        if training and drop_p > 0.0:
            h = _residual_dropout(h, drop_p, rng)
        x = T.add(x, h)

    x = T.layer_norm(x, model.final_ln_g, model.final_ln_b)
    return T.matmul(x, T.transpose(model.tok_emb))


def lm_loss(model: LmModel, inputs: np.ndarray, targets: np.ndarray, *,
            training: bool = False, rng: np.random.Generator | None = None,
            row_dropout_p: float | None = None) -> Tensor:
    logits = lm_forward(model, inputs, training=training, rng=rng, row_dropout_p=row_dropout_p)
    return T.cross_entropy(logits, targets)


def perplexity(model: LmModel, ids: np.ndarray) -> float:
    """exp(mean token NLL) over non-overlapping windows of max_seq.

    The stream is consumed in windows of max_seq predictions; a shorter
    final window is still scored. Deterministic: evaluation builds no tape
    and applies no dropout.
    """
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size < 2:
        raise DataError(f"perplexity: need at least 2 tokens, got {ids.size}")
    n = model.config.max_seq
    total_nll = 0.0
    total_count = 0
    with T.no_grad():
        for start in range(0, ids.size - 1, n):
            window = ids[start:start + n + 1]
            if window.size < 2:
                break
            logits = lm_forward(model, window[:-1][None, :])
            flat = logits.data.reshape(-1, model.config.vocab_size)
            tgt = window[1:]
            m = flat.max(axis=-1, keepdims=True)
            z = flat - m
            lse = np.log(np.exp(z).sum(axis=-1))
            total_nll += float(np.sum(lse - z[np.arange(tgt.size), tgt]))
            total_count += tgt.size
    return float(np.exp(total_nll / total_count))


def generate(model: LmModel, prompt: np.ndarray, steps: int, temperature: float,
             rng: np.random.Generator | None = None) -> np.ndarray:
    """Sample ``steps`` continuation tokens; temperature 0 decodes greedily."""
    prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
    if prompt.size < 1:
        raise ContractError("generate: prompt must be non-empty")
    if steps < 0:
        raise ContractError(f"generate: steps must be >= 0, got {steps}")
    if prompt.size + steps > model.config.max_seq:
        raise CapacityError(
            f"generate: prompt ({prompt.size}) + steps ({steps}) exceeds max_seq {model.config.max_seq}")
    if temperature < 0:
        raise ContractError(f"generate: temperature must be >= 0, got {temperature}")
    if temperature > 0 and rng is None:
        raise ContractError("generate: sampling with temperature > 0 needs an rng")

    out = list(prompt)
    with T.no_grad():
        for _ in range(steps):
            logits = lm_forward(model, np.asarray(out, dtype=np.int64)[None, :])
            last = logits.data[0, -1]
            if temperature == 0.0:
                nxt = int(np.argmax(last))
            else:
                z = last / temperature
                z -= z.max()
                p = np.exp(z)
                p /= p.sum()
                nxt = int(rng.choice(p.size, p=p))
            out.append(nxt)
    return np.asarray(out, dtype=np.int64)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def save_checkpoint(model: LmModel, path: str) -> None:
    entries = []
    offset = 0
    blobs = []
    for name, p in model.named_params():
        blob = p.data.astype("<f8").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"config": asdict(model.config), "params": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str) -> LmModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"checkpoint {path}: bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    (manifest_len,) = struct.unpack("<I", raw[4:8])
    try:
        manifest = json.loads(raw[8:8 + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"checkpoint {path}: corrupt manifest") from exc
    config = ModelConfig(**manifest["config"])
    model = LmModel(config)
    params = model.params()
    base = 8 + manifest_len
    for entry in manifest["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in params:
            raise DataError(f"checkpoint {path}: unknown parameter {name!r}")
        p = params[name]
        if p.shape != shape:
            raise DataError(f"checkpoint {path}: parameter {name!r} has shape {shape}, model expects {p.shape}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = base + entry["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start)
        p.data[...] = arr.reshape(shape)
    return model
