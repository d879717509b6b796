"""Bi-directional Transformer for Chord recognition.

input projection -> positional encoding -> N bi-directional self-attention
layers -> logit head. Each layer runs a forward-masked and a backward-masked
block side by side, concatenates their outputs and projects back to the
model dimension.
"""

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Mapping, Optional

import numpy as np

from .errors import ConfigurationError, ShapeError
from .tensor import (
    Rng,
    Tensor,
    concat_last,
    conv1d_same,
    dropout,
    layer_norm,
    linear,
    matmul,
    no_grad,
    relu,
    reshape,
    softmax_rows,
    swapaxes,
    transpose_last,
)

FORWARD = "forward"
BACKWARD = "backward"
DIRECTIONS = (FORWARD, BACKWARD)
DIRECTION_CODES = {FORWARD: "f", BACKWARD: "b"}
_SCOPES = {FORWARD: "fwd", BACKWARD: "bwd"}
_CONV_PADDING = {FORWARD: "causal", BACKWARD: "anticausal"}
_NORMS = ("attn_norm_in", "attn_norm_out", "conv_norm_in", "conv_norm_out")

# Keeps initial logits near-uniform so the starting loss sits at ln|V|.
HEAD_INIT_GAIN = 0.1


@dataclass(frozen=True)
class BtcConfig:
    """Model hyperparameters; defaults are the best validation setting."""

    n_layers: int = 8
    n_heads: int = 4
    model_dim: int = 128
    conv_repeats: int = 2
    kernel_size: int = 3
    dropout: float = 0.2
    input_bins: int = 144
    vocab_size: int = 25
    seq_len: int = 108

    def validate(self) -> None:
        if self.n_layers < 1 or self.n_heads < 1 or self.model_dim < 2:
            raise ConfigurationError("layers, heads and model dimension must be positive")
        if self.model_dim % self.n_heads:
            raise ConfigurationError(
                f"model dimension {self.model_dim} is not divisible by {self.n_heads} heads"
            )
        if self.model_dim % 2:
            raise ConfigurationError(f"model dimension must be even for positional encoding, got {self.model_dim}")
        if self.kernel_size % 2 == 0:
            raise ConfigurationError(f"convolution kernel width must be odd, got {self.kernel_size}")
        if self.conv_repeats < 0:
            raise ConfigurationError(f"conv repeats must be non-negative, got {self.conv_repeats}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout probability must be in [0, 1), got {self.dropout}")
        if self.input_bins < 1 or self.vocab_size < 1 or self.seq_len < 1:
            raise ConfigurationError("input bins, vocabulary size and sequence length must be positive")

    def to_dict(self) -> Dict[str, str]:
        return {key: str(value) for key, value in asdict(self).items()}

    @classmethod
    def from_dict(cls, values: Mapping[str, str]) -> "BtcConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in values:
                kwargs[f.name] = float(values[f.name]) if f.type in (float, "float") else int(values[f.name])
        config = cls(**kwargs)
        config.validate()
        return config


def parameter_count(config: BtcConfig) -> int:
    """Closed-form number of trainable scalars for ``config``."""
    d, k, V = config.model_dim, config.kernel_size, config.vocab_size
    per_direction = 4 * (d * d + d) + 4 * 2 * d + config.conv_repeats * (d * d * k + d)
    per_layer = 2 * per_direction + (2 * d * d + d)
    return config.input_bins * d + d + config.n_layers * per_layer + d * V + V


def _xavier(rng: Rng, shape, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    limit = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def init_params(config: BtcConfig, rng: Rng) -> Dict[str, np.ndarray]:
    """Xavier-uniform weights, zero biases, unit layer-norm gains."""
    d, k = config.model_dim, config.kernel_size
    params: Dict[str, np.ndarray] = {}

    def dense(name, fan_in, fan_out, gain=1.0):
        params[f"{name}.weight"] = _xavier(rng, (fan_in, fan_out), fan_in, fan_out, gain)
        params[f"{name}.bias"] = np.zeros(fan_out, dtype=np.float32)

    dense("input_proj", config.input_bins, d)
    for i in range(config.n_layers):
        for direction in DIRECTIONS:
            prefix = f"layers.{i}.{_SCOPES[direction]}"
            for proj in ("q", "k", "v", "o"):
                dense(f"{prefix}.attn.{proj}", d, d)
            for norm in _NORMS:
                params[f"{prefix}.{norm}.gain"] = np.ones(d, dtype=np.float32)
                params[f"{prefix}.{norm}.bias"] = np.zeros(d, dtype=np.float32)
            for r in range(config.conv_repeats):
                params[f"{prefix}.conv.{r}.kernel"] = _xavier(rng, (d, d, k), d * k, d * k)
                params[f"{prefix}.conv.{r}.bias"] = np.zeros(d, dtype=np.float32)
        dense(f"layers.{i}.combine", 2 * d, d)
    dense("head", d, config.vocab_size, gain=HEAD_INIT_GAIN)
    return params


class BtcModel:
    """Parameter set plus hyperparameters of one BTC network."""

    def __init__(self, config: BtcConfig, params: Mapping[str, np.ndarray]):
        config.validate()
        self.config = config
        self.params: Dict[str, Tensor] = {
            name: Tensor(np.asarray(value, dtype=np.float32), requires_grad=True) for name, value in params.items()
        }

    @classmethod
    def create(cls, config: BtcConfig, seed: int = 0) -> "BtcModel":
        config.validate()
        return cls(config, init_params(config, np.random.default_rng(seed)))

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def scope(self, prefix: str) -> Dict[str, Tensor]:
        """Parameters under ``prefix.`` keyed by the remaining suffix."""
        cut = len(prefix) + 1
        return {name[cut:]: t for name, t in self.params.items() if name.startswith(prefix + ".")}

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_snapshot(self, state: Mapping[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            t.data[...] = state[name]


@dataclass
class AttentionMapSet:
    """Softmax weights per layer and direction, each of shape (heads, T, T)."""

    maps: List[Dict[str, np.ndarray]] = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.maps)

    @property
    def n_heads(self) -> int:
        return self.maps[0][FORWARD].shape[0] if self.maps else 0

    def get(self, layer: int, direction: str, head: int) -> np.ndarray:
        return self.maps[layer][direction][head]

    def combined(self, layer: int, head: int) -> np.ndarray:
        return combine_directional_maps(self.get(layer, FORWARD, head), self.get(layer, BACKWARD, head))


def combine_directional_maps(forward_map: np.ndarray, backward_map: np.ndarray) -> np.ndarray:
    """One picture per head: forward map below the diagonal, backward above."""
    diagonal = (np.diag(forward_map) + np.diag(backward_map)) / 2.0
    return np.tril(forward_map, -1) + np.triu(backward_map, 1) + np.diag(diagonal)


def positional_encoding(T: int, d: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal (T, d) encoding: sin on even columns, cos on odd."""
    if d % 2:
        raise ConfigurationError(f"positional encoding needs an even dimension, got {d}")
    position = np.arange(T, dtype=np.float64)[:, None]
    rates = 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.zeros((T, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(position / rates)
    pe[:, 1::2] = np.cos(position / rates)
    return pe.astype(dtype)


def directional_mask(T: int, direction: str, dtype=np.float32) -> np.ndarray:
    """Additive mask: 0 where attention is allowed, -inf elsewhere.

    forward lets frame i see frames j <= i, backward frames j >= i.
    """
    if direction == FORWARD:
        allowed = np.tril(np.ones((T, T), dtype=bool))
    elif direction == BACKWARD:
        allowed = np.triu(np.ones((T, T), dtype=bool))
    else:
        raise ConfigurationError(f"unknown attention direction '{direction}'")
    return np.where(allowed, 0.0, -np.inf).astype(dtype)


def attention(
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    mask: Optional[np.ndarray] = None,
    dropout_p: float = 0.0,
    rng: Optional[Rng] = None,
    training: bool = False,
):
    """Scaled dot-product attention; returns (output, softmax weights)."""
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"attention shapes disagree: Q {Q.shape}, K {K.shape}, V {V.shape}")
    scores = matmul(Q, transpose_last(K)) * (1.0 / math.sqrt(Q.shape[-1]))
    if mask is not None:
        scores = scores + mask
    weights = softmax_rows(scores)
    return matmul(dropout(weights, dropout_p, rng, training), V), weights


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, T, d = x.shape
    return swapaxes(reshape(x, tuple(lead) + (T, n_heads, d // n_heads)), -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, T, d_h = x.shape
    return reshape(swapaxes(x, -2, -3), tuple(lead) + (T, h * d_h))


def multi_head(
    I: Tensor,
    params: Mapping[str, Tensor],
    mask: Optional[np.ndarray],
    n_heads: int,
    dropout_p: float = 0.0,
    rng: Optional[Rng] = None,
    training: bool = False,
):
    """Concat(head_1..head_h) W_O with head_j = attention((IW_Q)_j, (IW_K)_j, (IW_V)_j).

    Returns the projected output and the (..., heads, T, T) weights.
    """
    d = I.shape[-1]
    if d % n_heads:
        raise ConfigurationError(f"model dimension {d} is not divisible by {n_heads} heads")
    q = _split_heads(linear(I, params["q.weight"], params["q.bias"]), n_heads)
    k = _split_heads(linear(I, params["k.weight"], params["k.bias"]), n_heads)
    v = _split_heads(linear(I, params["v.weight"], params["v.bias"]), n_heads)
    heads, weights = attention(q, k, v, mask, dropout_p, rng, training)
    return linear(_merge_heads(heads), params["o.weight"], params["o.bias"]), weights


def conv_block(
    X: Tensor,
    params: Mapping[str, Tensor],
    n_repeats: int,
    k: int,
    padding: str = "same",
    dropout_p: float = 0.0,
    rng: Optional[Rng] = None,
    training: bool = False,
) -> Tensor:
    """``n_repeats`` x (conv1d -> ReLU -> dropout), channels and length unchanged."""
    out = X
    for r in range(n_repeats):
        out = conv1d_same(out, params[f"{r}.kernel"], params[f"{r}.bias"], k, padding=padding)
        out = dropout(relu(out), dropout_p, rng, training)
    return out


def _norm(x: Tensor, params: Mapping[str, Tensor], name: str) -> Tensor:
    return layer_norm(x, params[f"{name}.gain"], params[f"{name}.bias"])


def directional_block(
    X: Tensor,
    model: BtcModel,
    layer: int,
    direction: str,
    training: bool = False,
    rng: Optional[Rng] = None,
    capture: Optional[list] = None,
) -> Tensor:
    """One masked self-attention block followed by its convolutional block.

    Post-norm residuals around both sub-blocks; each sub-block also
    normalises its own input. The convolutions pad on the side the mask
    keeps, so output frame t only sees input frames allowed by ``direction``.
    """
    cfg = model.config
    p = model.scope(f"layers.{layer}.{_SCOPES[direction]}")
    mask = directional_mask(X.shape[-2], direction, X.data.dtype)

    attended, weights = multi_head(
        _norm(X, p, "attn_norm_in"),
        {name[5:]: t for name, t in p.items() if name.startswith("attn.")},
        mask,
        cfg.n_heads,
        cfg.dropout,
        rng,
        training,
    )
    if capture is not None:
        capture.append((layer, direction, weights.data.copy()))
    A = _norm(X + dropout(attended, cfg.dropout, rng, training), p, "attn_norm_out")

    convolved = conv_block(
        _norm(A, p, "conv_norm_in"),
        {name[5:]: t for name, t in p.items() if name.startswith("conv.")},
        cfg.conv_repeats,
        cfg.kernel_size,
        padding=_CONV_PADDING[direction],
        dropout_p=cfg.dropout,
        rng=rng,
        training=training,
    )
    return _norm(A + dropout(convolved, cfg.dropout, rng, training), p, "conv_norm_out")


def bidirectional_layer(
    X: Tensor,
    model: BtcModel,
    layer: int,
    training: bool = False,
    rng: Optional[Rng] = None,
    capture: Optional[list] = None,
) -> Tensor:
    """Forward and backward blocks side by side, concatenated and projected back to d."""
    forward_out = directional_block(X, model, layer, FORWARD, training, rng, capture)
    backward_out = directional_block(X, model, layer, BACKWARD, training, rng, capture)
    p = model.scope(f"layers.{layer}.combine")
    return linear(concat_last(forward_out, backward_out), p["weight"], p["bias"])


def _as_input(features, model: BtcModel) -> Tensor:
    x = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=np.float32))
    if x.ndim < 2 or x.shape[-1] != model.config.input_bins:
        raise ShapeError(f"features {x.shape} do not match the model's {model.config.input_bins} input bins")
    return x


def forward(
    features,
    model: BtcModel,
    training: bool = False,
    rng: Optional[Rng] = None,
    capture: Optional[list] = None,
) -> Tensor:
    """Logits of shape (..., T, |V|) for (..., T, bins) features."""
    x = _as_input(features, model)
    cfg = model.config
    h = linear(x, model["input_proj.weight"], model["input_proj.bias"])
    h = h + positional_encoding(h.shape[-2], cfg.model_dim, h.data.dtype)
    h = dropout(h, cfg.dropout, rng, training)
    for layer in range(cfg.n_layers):
        h = bidirectional_layer(h, model, layer, training, rng, capture)
    return linear(h, model["head.weight"], model["head.bias"])


def predict(features, model: BtcModel) -> np.ndarray:
    """Per-frame argmax of the eval-mode logits; ties go to the lowest index."""
    with no_grad():
        logits = forward(features, model, training=False)
    return np.argmax(logits.data, axis=-1)


def attention_maps(features, model: BtcModel) -> AttentionMapSet:
    """Capture every layer/direction/head softmax map for one (T, bins) input."""
    x = _as_input(features, model)
    if x.ndim != 2:
        raise ShapeError(f"attention maps are taken for a single segment, got {x.shape}")
    captured: list = []
    with no_grad():
        forward(x, model, training=False, capture=captured)
    maps: List[Dict[str, np.ndarray]] = [{} for _ in range(model.config.n_layers)]
    for layer, direction, weights in captured:
        maps[layer][direction] = weights
    return AttentionMapSet(maps)
