"""Miniature BERT-style encoder with per-site fake quantization.

Quantized sites: the attention and feed-forward weight matrices of every
layer plus the word-embedding table (weight sites), and the inputs of every
linear layer and both operands of both attention matmuls (activation
sites). Segment/position embeddings, biases, layer norms, softmax, and the
classifier head are never quantized.

The same state runs in three modes: ``teacher`` (full precision, dropout
off), ``student`` (quantization and dropout active), and ``calibrate``
(full precision, captures activation-site inputs).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .quant import QuantSpec, ScaleFactor
from .tensor import (
    Tensor,
    concat,
    dropout,
    embedding,
    gelu,
    layer_norm,
    matmul,
    narrow,
    reshape,
    softmax,
    swapaxes,
)

__all__ = [
    "ModelConfig",
    "ModelState",
    "ForwardTrace",
    "UncalibratedSiteError",
    "VALID_BITS",
    "weight_site_names",
    "activation_site_names",
    "weight_site_bits",
    "init_model_state",
    "clone_state",
    "embed",
    "attention_head",
    "mha",
    "ffn",
    "transformer_layer",
    "forward_model",
    "save_checkpoint",
    "load_checkpoint",
]

VALID_BITS = (2, 4, 6, 8, 32)

CHECKPOINT_VERSION = 1


class UncalibratedSiteError(RuntimeError):
    """A quantization site is missing its scale factor in student mode."""


@dataclass
class ModelConfig:
    """Architecture hyperparameters plus the W-E-A bit assignment."""

    num_layers: int = 2
    hidden_size: int = 32
    num_heads: int = 2
    ffn_size: int = 64
    vocab: int = 64
    max_seq: int = 16
    num_classes: int = 2
    bits_w: int = 32
    bits_e: int = 32
    bits_a: int = 32
    # Attention logits divide by sqrt(hidden_size); set True to divide by
    # sqrt(head_dim) instead.
    attn_scale_by_head_dim: bool = False

    def __post_init__(self):
        if self.hidden_size % self.num_heads != 0:
            raise ValueError(
                f"hidden size {self.hidden_size} not divisible by {self.num_heads} heads"
            )
        for name in ("bits_w", "bits_e", "bits_a"):
            bits = getattr(self, name)
            if bits not in VALID_BITS:
                raise ValueError(f"{name} must be one of {VALID_BITS}, got {bits}")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def attn_scale(self) -> float:
        dim = self.head_dim if self.attn_scale_by_head_dim else self.hidden_size
        return 1.0 / math.sqrt(dim)

    def bits_string(self) -> str:
        return f"{self.bits_w}-{self.bits_e}-{self.bits_a}"


LAYER_WEIGHT_SITES = ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.w1", "ffn.w2")
LAYER_ACTIVATION_SITES = (
    "attn.q_in",
    "attn.k_in",
    "attn.v_in",
    "attn.score_q",
    "attn.score_k",
    "attn.ctx_p",
    "attn.ctx_v",
    "attn.out_in",
    "ffn.in1",
    "ffn.in2",
)


def weight_site_names(config: ModelConfig) -> list[str]:
    names = ["embed.word"]
    for layer in range(config.num_layers):
        names.extend(f"layer.{layer}.{site}" for site in LAYER_WEIGHT_SITES)
    return names


def activation_site_names(config: ModelConfig) -> list[str]:
    names = []
    for layer in range(config.num_layers):
        names.extend(f"layer.{layer}.{site}" for site in LAYER_ACTIVATION_SITES)
    return names


def weight_site_bits(config: ModelConfig, name: str) -> int:
    return config.bits_e if name == "embed.word" else config.bits_w


@dataclass
class ModelState:
    """All trainable parameters plus the attached scale factors."""

    config: ModelConfig
    params: dict[str, Tensor]
    weight_scales: dict[str, ScaleFactor] = field(default_factory=dict)
    act_scales: dict[str, ScaleFactor] = field(default_factory=dict)

    def param(self, name: str) -> Tensor:
        return self.params[name]

    def all_scales(self) -> list[ScaleFactor]:
        return list(self.weight_scales.values()) + list(self.act_scales.values())

    def assert_site_census(self) -> None:
        """Check the scale-factor population matches the enabled bit classes."""
        cfg = self.config
        expected_w = set()
        if cfg.bits_e < 32:
            expected_w.add("embed.word")
        if cfg.bits_w < 32:
            expected_w.update(n for n in weight_site_names(cfg) if n != "embed.word")
        if set(self.weight_scales) != expected_w:
            raise AssertionError(
                f"weight scale census mismatch: have {sorted(self.weight_scales)}, "
                f"expected {sorted(expected_w)}"
            )
        expected_a = set(activation_site_names(cfg)) if cfg.bits_a < 32 else set()
        if set(self.act_scales) != expected_a:
            raise AssertionError(
                f"activation scale census mismatch: {len(self.act_scales)} sites, "
                f"expected {len(expected_a)}"
            )
        exempt = {"embed.segment", "embed.position", "classifier.weight", "classifier.bias"}
        for name in self.weight_scales:
            if name in exempt or ".ln" in name or name.endswith((".b1", ".b2")):
                raise AssertionError(f"scale factor attached to exempt parameter {name}")


def _param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, dff = config.hidden_size, config.ffn_size
    shapes = {
        "embed.word": (config.vocab, d),
        "embed.segment": (2, d),
        "embed.position": (config.max_seq, d),
    }
    for layer in range(config.num_layers):
        p = f"layer.{layer}"
        shapes[f"{p}.attn.wq"] = (d, d)
        shapes[f"{p}.attn.wk"] = (d, d)
        shapes[f"{p}.attn.wv"] = (d, d)
        shapes[f"{p}.attn.wo"] = (d, d)
        shapes[f"{p}.ffn.w1"] = (d, dff)
        shapes[f"{p}.ffn.b1"] = (dff,)
        shapes[f"{p}.ffn.w2"] = (dff, d)
        shapes[f"{p}.ffn.b2"] = (d,)
        shapes[f"{p}.ln1.gain"] = (d,)
        shapes[f"{p}.ln1.bias"] = (d,)
        shapes[f"{p}.ln2.gain"] = (d,)
        shapes[f"{p}.ln2.bias"] = (d,)
    shapes["classifier.weight"] = (d, config.num_classes)
    shapes["classifier.bias"] = (config.num_classes,)
    return shapes


def init_model_state(config: ModelConfig, rng: np.random.Generator) -> ModelState:
    """Fresh parameters: N(0, 0.02) matrices, unit layer-norm gains, zero biases."""
    params: dict[str, Tensor] = {}
    for name, shape in _param_shapes(config).items():
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif name.endswith((".bias", ".b1", ".b2")) and not name.startswith("embed"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return ModelState(config=config, params=params)


def clone_state(state: ModelState, config: ModelConfig | None = None) -> ModelState:
    """Deep-copy the parameters into a fresh state (scales are not copied)."""
    cfg = config if config is not None else state.config
    params = {name: Tensor(np.array(t.data, copy=True), requires_grad=True)
              for name, t in state.params.items()}
    return ModelState(config=cfg, params=params)


@dataclass
class ForwardTrace:
    """Embedding output, per-layer outputs, attention scores, and logits."""

    hidden: list  # H_1 .. H_{L+1}; H_1 is the embedding output
    scores: list  # one (batch, heads, n, n) pre-softmax score tensor per layer
    logits: Tensor


# ---------------------------------------------------------------------------
# quantization plumbing
# ---------------------------------------------------------------------------

def _quant_weight(state: ModelState, name: str, mode: str) -> Tensor:
    tensor = state.params[name]
    bits = weight_site_bits(state.config, name)
    if mode != "student" or bits == 32:
        return tensor
    scale = state.weight_scales.get(name)
    if scale is None:
        raise UncalibratedSiteError(f"weight site {name!r} has no scale factor")
    return _fake_quantize(tensor, scale, QuantSpec(bits, signed=True))


def _quant_act(state: ModelState, site: str, tensor: Tensor, mode: str, capture) -> Tensor:
    if mode == "calibrate":
        capture.setdefault(site, []).append(np.array(tensor.data, copy=True))
        return tensor
    if mode != "student" or state.config.bits_a == 32:
        return tensor
    scale = state.act_scales.get(site)
    if scale is None:
        raise UncalibratedSiteError(f"activation site {site!r} has no scale factor")
    return _fake_quantize(tensor, scale, QuantSpec(state.config.bits_a, signed=True))


def _fake_quantize(tensor, scale, spec):
    # Indirection point so tests can observe or stub quantizer nodes.
    from .quant import fake_quantize

    return fake_quantize(tensor, scale, spec)


def _check_mode(mode: str) -> None:
    if mode not in ("teacher", "student", "calibrate"):
        raise ValueError(f"unknown forward mode {mode!r}")


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------

def embed(state: ModelState, tokens, segments=None, *, mode="student", capture=None) -> Tensor:
    """Sum of word, segment, and position lookups; only the word table quantizes."""
    _check_mode(mode)
    cfg = state.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be (batch, seq), got shape {tokens.shape}")
    batch, n = tokens.shape
    if n > cfg.max_seq:
        raise ValueError(f"sequence length {n} exceeds max_seq {cfg.max_seq}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise ValueError(f"token id out of range [0, {cfg.vocab})")
    if segments is None:
        segments = np.zeros_like(tokens)
    segments = np.asarray(segments, dtype=np.int64)

    word_table = _quant_weight(state, "embed.word", mode)
    words = embedding(word_table, tokens)
    segs = embedding(state.params["embed.segment"], segments)
    positions = embedding(state.params["embed.position"], np.arange(n))
    return words + segs + positions


def attention_head(state: ModelState, layer: int, head: int, h_in: Tensor, *,
                   mode="student", dropout_rate=0.0, rng=None):
    """One attention head; returns (head output, pre-softmax scaled scores)."""
    _check_mode(mode)
    cfg = state.config
    dh = cfg.head_dim
    p = f"layer.{layer}"
    capture = None

    q_in = _quant_act(state, f"{p}.attn.q_in", h_in, mode, capture)
    k_in = _quant_act(state, f"{p}.attn.k_in", h_in, mode, capture)
    v_in = _quant_act(state, f"{p}.attn.v_in", h_in, mode, capture)
    wq = narrow(_quant_weight(state, f"{p}.attn.wq", mode), 1, head * dh, dh)
    wk = narrow(_quant_weight(state, f"{p}.attn.wk", mode), 1, head * dh, dh)
    wv = narrow(_quant_weight(state, f"{p}.attn.wv", mode), 1, head * dh, dh)

    q = _quant_act(state, f"{p}.attn.score_q", matmul(q_in, wq), mode, capture)
    k = _quant_act(state, f"{p}.attn.score_k", matmul(k_in, wk), mode, capture)
    v = _quant_act(state, f"{p}.attn.ctx_v", matmul(v_in, wv), mode, capture)

    scores = matmul(q, swapaxes(k, -1, -2)) * cfg.attn_scale
    probs = softmax(scores, axis=-1)
    probs = dropout(probs, dropout_rate, rng)
    probs = _quant_act(state, f"{p}.attn.ctx_p", probs, mode, capture)
    return matmul(probs, v), scores


def mha(state: ModelState, layer: int, h_in: Tensor, *, mode="student",
        dropout_rate=0.0, rng=None, capture=None):
    """Multi-head attention block; returns (output, stacked head scores)."""
    _check_mode(mode)
    cfg = state.config
    dh = cfg.head_dim
    p = f"layer.{layer}"
    batch, n, _ = h_in.shape

    q_in = _quant_act(state, f"{p}.attn.q_in", h_in, mode, capture)
    k_in = _quant_act(state, f"{p}.attn.k_in", h_in, mode, capture)
    v_in = _quant_act(state, f"{p}.attn.v_in", h_in, mode, capture)
    wq = _quant_weight(state, f"{p}.attn.wq", mode)
    wk = _quant_weight(state, f"{p}.attn.wk", mode)
    wv = _quant_weight(state, f"{p}.attn.wv", mode)

    q = _quant_act(state, f"{p}.attn.score_q", matmul(q_in, wq), mode, capture)
    k = _quant_act(state, f"{p}.attn.score_k", matmul(k_in, wk), mode, capture)
    v = _quant_act(state, f"{p}.attn.ctx_v", matmul(v_in, wv), mode, capture)

    head_outputs = []
    head_scores = []
    for head in range(cfg.num_heads):
        qh = narrow(q, 2, head * dh, dh)
        kh = narrow(k, 2, head * dh, dh)
        vh = narrow(v, 2, head * dh, dh)
        scores = matmul(qh, swapaxes(kh, -1, -2)) * cfg.attn_scale
        head_scores.append(reshape(scores, (batch, 1, n, n)))
        probs = softmax(scores, axis=-1)
        probs = dropout(probs, dropout_rate, rng)
        probs = _quant_act(state, f"{p}.attn.ctx_p", probs, mode, capture)
        head_outputs.append(matmul(probs, vh))

    ctx = concat(head_outputs, axis=-1)
    stacked_scores = concat(head_scores, axis=1)

    out_in = _quant_act(state, f"{p}.attn.out_in", ctx, mode, capture)
    wo = _quant_weight(state, f"{p}.attn.wo", mode)
    out = dropout(matmul(out_in, wo), dropout_rate, rng)
    return out, stacked_scores


def ffn(state: ModelState, layer: int, x: Tensor, *, mode="student",
        dropout_rate=0.0, rng=None, capture=None) -> Tensor:
    """Two-layer feed-forward block with GeLU; biases stay unquantized."""
    _check_mode(mode)
    p = f"layer.{layer}"
    in1 = _quant_act(state, f"{p}.ffn.in1", x, mode, capture)
    w1 = _quant_weight(state, f"{p}.ffn.w1", mode)
    hidden = gelu(matmul(in1, w1) + state.params[f"{p}.ffn.b1"])
    in2 = _quant_act(state, f"{p}.ffn.in2", hidden, mode, capture)
    w2 = _quant_weight(state, f"{p}.ffn.w2", mode)
    out = matmul(in2, w2) + state.params[f"{p}.ffn.b2"]
    return dropout(out, dropout_rate, rng)


def transformer_layer(state: ModelState, layer: int, h_in: Tensor, *, mode="student",
                      dropout_rate=0.0, rng=None, capture=None):
    """Residual attention + residual feed-forward, each followed by layer norm."""
    p = f"layer.{layer}"
    attn_out, scores = mha(state, layer, h_in, mode=mode, dropout_rate=dropout_rate,
                           rng=rng, capture=capture)
    x = layer_norm(h_in + attn_out, state.params[f"{p}.ln1.gain"], state.params[f"{p}.ln1.bias"])
    ffn_out = ffn(state, layer, x, mode=mode, dropout_rate=dropout_rate, rng=rng,
                  capture=capture)
    h_out = layer_norm(x + ffn_out, state.params[f"{p}.ln2.gain"], state.params[f"{p}.ln2.bias"])
    return h_out, scores


def forward_model(state: ModelState, tokens, segments=None, *, mode="student",
                  dropout_rate=0.0, rng=None, capture=None) -> ForwardTrace:
    """Full forward pass; returns the trace used for distillation and the loss."""
    _check_mode(mode)
    if mode != "student":
        dropout_rate = 0.0
    if mode == "calibrate" and capture is None:
        raise ValueError("calibrate mode needs a capture dict")

    h = embed(state, tokens, segments, mode=mode, capture=capture)
    hidden = [h]
    scores = []
    for layer in range(state.config.num_layers):
        h, layer_scores = transformer_layer(
            state, layer, h, mode=mode, dropout_rate=dropout_rate, rng=rng, capture=capture
        )
        hidden.append(h)
        scores.append(layer_scores)

    pooled = hidden[-1].mean(axis=1)
    logits = matmul(pooled, state.params["classifier.weight"]) + state.params["classifier.bias"]
    return ForwardTrace(hidden=hidden, scores=scores, logits=logits)


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------

def save_checkpoint(state: ModelState, path) -> None:
    """Write a self-describing JSON checkpoint (row-major values per name)."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(state.config),
        "params": {
            name: {"shape": list(t.shape), "values": t.data.ravel().tolist()}
            for name, t in state.params.items()
        },
        "weight_scales": {name: sf.value for name, sf in state.weight_scales.items()},
        "act_scales": {name: sf.value for name, sf in state.act_scales.items()},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc))


def load_checkpoint(path) -> ModelState:
    doc = json.loads(Path(path).read_text())
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    config = ModelConfig(**doc["config"])
    params = {
        name: Tensor(np.asarray(entry["values"]).reshape(entry["shape"]), requires_grad=True)
        for name, entry in doc["params"].items()
    }
    state = ModelState(config=config, params=params)
    for name, value in doc.get("weight_scales", {}).items():
        state.weight_scales[name] = ScaleFactor.create(name, "weight", value)
    for name, value in doc.get("act_scales", {}).items():
        state.act_scales[name] = ScaleFactor.create(name, "activation", value)
    return state
