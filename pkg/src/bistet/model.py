"""Bidirectional scene-text transformer with one shared decoder.

Pipeline: strided conv stack -> one d_model vector per image column ->
encoder -> decoder whose inputs are token + position + direction embeddings
-> linear output head. Parameters are a flat ``{name: Tensor}`` dict.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from .autodiff import ShapeError, Tensor, add, conv2d, gather, matmul, relu, reshape, transpose
from .data import CodecError, Vocabulary
from .nn import (
    AttentionParams,
    ConfigError,
    FeedForwardParams,
    causal_mask,
    feed_forward,
    layer_norm,
    multi_head_attention,
    positional_encoding,
)

Parameters = Dict[str, Tensor]


class LengthError(ValueError):
    pass


class Direction(enum.Enum):
    LTR = "ltr"
    RTL = "rtl"

    @property
    def param_name(self) -> str:
        return f"embed.direction.{self.value}"


@dataclass
class ModelConfig:
    n_layers: int = 2
    heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    image_height: int = 16
    image_width: int = 96
    max_decode_len: int = 12
    include_punctuation: bool = False
    charset: Optional[str] = None  # overrides the default character set (small test models)
    backbone_channels: Tuple[int, ...] = (16, 32, 64, 64)
    backbone_strides: Tuple[Tuple[int, int], ...] = ((2, 2), (2, 2), (2, 1), (2, 1))
    bidirectional: bool = True
    encoder_positional_encoding: bool = True
    dropout: float = 0.0  # reserved; not applied
    pixel_mean: float = 0.0
    pixel_std: float = 1.0

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        self.backbone_strides = tuple(tuple(int(v) for v in s) for s in self.backbone_strides)
        self.validate()

    def validate(self) -> None:
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.d_model % 2:
            raise ConfigError("d_model must be even for the sinusoidal encoding")
        if self.max_decode_len < 1:
            raise ConfigError("max_decode_len must be >= 1")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        if len(self.backbone_channels) != len(self.backbone_strides):
            raise ConfigError("backbone_channels and backbone_strides differ in length")
        if self.pixel_std <= 0:
            raise ConfigError("pixel_std must be positive")
        h, w = self.image_height, self.image_width
        for sh, sw in self.backbone_strides:
            h, w = (h - 1) // sh + 1, (w - 1) // sw + 1
        stride_w = int(np.prod([s[1] for s in self.backbone_strides]))
        if h != 1 or self.image_width % stride_w or w != self.image_width // stride_w:
            raise ConfigError(
                f"backbone maps {self.image_height}x{self.image_width} to {h}x{w}; "
                f"need height 1 and width image_width/{stride_w}"
            )

    @property
    def feature_width(self) -> int:
        return self.image_width // int(np.prod([s[1] for s in self.backbone_strides]))

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.include_punctuation, self.charset)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def directions(self) -> Tuple[Direction, ...]:
        return (Direction.LTR, Direction.RTL) if self.bidirectional else (Direction.LTR,)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        d["backbone_strides"] = [list(s) for s in self.backbone_strides]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- parameters


def _attn_shapes(prefix: str, d: int) -> list:
    return [(f"{prefix}.{k}", (d, d), "weight") for k in ("wq", "wk", "wv", "wo")]


def _ln_shapes(prefix: str, d: int) -> list:
    return [(f"{prefix}.scale", (d,), "ones"), (f"{prefix}.shift", (d,), "zeros")]


def _ff_shapes(prefix: str, d: int, d_ff: int) -> list:
    return [
        (f"{prefix}.w1", (d, d_ff), "weight"),
        (f"{prefix}.b1", (d_ff,), "zeros"),
        (f"{prefix}.w2", (d_ff, d), "weight"),
        (f"{prefix}.b2", (d,), "zeros"),
    ]


def parameter_shapes(config: ModelConfig) -> List[Tuple[str, tuple, str]]:
    """Ordered ``(name, shape, init kind)`` for every trainable tensor."""
    d, c = config.d_model, config
    out = []
    cin = 1
    for i, cout in enumerate(c.backbone_channels):
        out.append((f"backbone.conv{i}.weight", (cout, cin, 3, 3), "weight"))
        out.append((f"backbone.conv{i}.bias", (cout,), "zeros"))
        cin = cout
    out.append(("backbone.proj.weight", (cin, d), "weight"))
    out.append(("backbone.proj.bias", (d,), "zeros"))
    for i in range(c.n_layers):
        p = f"encoder.layer{i}"
        out += _attn_shapes(f"{p}.attn", d) + _ln_shapes(f"{p}.ln1", d)
        out += _ff_shapes(f"{p}.ff", d, c.d_ff) + _ln_shapes(f"{p}.ln2", d)
    for i in range(c.n_layers):
        p = f"decoder.layer{i}"
        out += _attn_shapes(f"{p}.self_attn", d) + _ln_shapes(f"{p}.ln1", d)
        out += _attn_shapes(f"{p}.cross_attn", d) + _ln_shapes(f"{p}.ln2", d)
        out += _ff_shapes(f"{p}.ff", d, c.d_ff) + _ln_shapes(f"{p}.ln3", d)
    out.append(("embed.tokens", (c.vocab_size, d), "weight"))
    for direction in c.directions:
        out.append((direction.param_name, (d,), "weight"))
    out.append(("head.weight", (d, c.vocab_size), "weight"))
    out.append(("head.bias", (c.vocab_size,), "zeros"))
    return out


def xavier_bound(shape: tuple) -> float:
    """sqrt(6 / (fan_in + fan_out)); conv kernels count receptive field, vectors are 1 x d."""
    if len(shape) == 4:
        rf = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * rf, shape[0] * rf
    elif len(shape) == 2:
        fan_in, fan_out = shape
    else:
        fan_in, fan_out = 1, shape[0]
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_parameters(config: ModelConfig, seed: int) -> Parameters:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, kind in parameter_shapes(config):
        if kind == "weight":
            b = xavier_bound(shape)
            data = rng.uniform(-b, b, size=shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def count_parameters(config: ModelConfig) -> Dict[str, int]:
    """Trainable scalar counts per component, computed in closed form."""
    d, f, n, V = config.d_model, config.d_ff, config.n_layers, config.vocab_size
    backbone, cin = 0, 1
    for cout in config.backbone_channels:
        backbone += cout * cin * 9 + cout
        cin = cout
    backbone += cin * d + d
    attn = 4 * d * d
    ln = 2 * d
    ff = d * f + f + f * d + d
    encoder = n * (attn + ln + ff + ln)
    decoder = n * (2 * attn + 3 * ln + ff)
    embeddings = V * d + len(config.directions) * d
    head = d * V + V
    counts = {
        "backbone": backbone,
        "encoder": encoder,
        "decoder": decoder,
        "embeddings": embeddings,
        "head": head,
    }
    counts["total"] = sum(counts.values())
    return counts


def _attn(params: Parameters, prefix: str, heads: int) -> AttentionParams:
    return AttentionParams(
        params[f"{prefix}.wq"], params[f"{prefix}.wk"], params[f"{prefix}.wv"], params[f"{prefix}.wo"], heads
    )


def _ff(params: Parameters, prefix: str) -> FeedForwardParams:
    return FeedForwardParams(params[f"{prefix}.w1"], params[f"{prefix}.b1"], params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _ln(x, params: Parameters, prefix: str) -> Tensor:
    return layer_norm(x, params[f"{prefix}.scale"], params[f"{prefix}.shift"])


# ---------------------------------------------------------------- forward


def normalize_pixels(pixels: np.ndarray, config: ModelConfig) -> np.ndarray:
    return (np.asarray(pixels, dtype=np.float64) - config.pixel_mean) / config.pixel_std


def extract_visual_features(images, params: Parameters, config: ModelConfig) -> Tensor:
    """Conv stack -> ``[batch, W', d_model]`` column sequence in image order.

    ``images`` is ``[batch, H, W]`` (or a single ``[H, W]``) of normalized pixels.
    """
    x = np.asarray(images, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.shape[1:] != (config.image_height, config.image_width):
        raise ShapeError(
            f"image size {x.shape[1:]} does not match config {(config.image_height, config.image_width)}"
        )
    h = Tensor(x[:, None, :, :])
    for i, stride in enumerate(config.backbone_strides):
        h = relu(conv2d(h, params[f"backbone.conv{i}.weight"], params[f"backbone.conv{i}.bias"], stride, (1, 1)))
    b, c, _, w = h.shape
    cols = transpose(reshape(h, (b, c, w)), (0, 2, 1))
    feats = add(matmul(cols, params["backbone.proj.weight"]), params["backbone.proj.bias"])
    if single:
        feats = reshape(feats, feats.shape[1:])
    return feats


def encode(features, params: Parameters, config: ModelConfig) -> Tensor:
    """Positional encoding once, then n post-norm self-attention layers."""
    x = features
    if config.encoder_positional_encoding:
        x = add(x, positional_encoding(x.shape[-2], config.d_model))
    for i in range(config.n_layers):
        p = f"encoder.layer{i}"
        a, _ = multi_head_attention(x, x, _attn(params, f"{p}.attn", config.heads))
        x = _ln(add(x, a), params, f"{p}.ln1")
        x = _ln(add(x, feed_forward(x, _ff(params, f"{p}.ff"))), params, f"{p}.ln2")
    return x


def _direction(direction) -> Direction:
    return direction if isinstance(direction, Direction) else Direction(direction)


def embed_decoder_inputs(tokens, direction, params: Parameters, config: ModelConfig) -> Tensor:
    """token embedding + PE(position) + direction embedding at every position."""
    ids = np.asarray(tokens, dtype=np.int64)
    V = config.vocab_size
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        bad = ids[(ids < 0) | (ids >= V)][0]
        raise CodecError(f"unknown token id {int(bad)} (vocabulary size {V})")
    length = ids.shape[-1]
    if length > config.max_decode_len + 1:
        raise LengthError(f"decoder input length {length} exceeds max_decode_len+1={config.max_decode_len + 1}")
    direction = _direction(direction)
    if direction.param_name not in params:
        raise ConfigError(f"model has no {direction.value} direction embedding")
    x = gather(params["embed.tokens"], ids)
    x = add(x, positional_encoding(length, config.d_model))
    return add(x, params[direction.param_name])


@dataclass
class DecoderAttention:
    """Per-layer attention weights, ``[batch, heads, L_q, L_k]``."""

    layer: int
    kind: str  # "decoder-self" or "decoder-cross"
    weights: np.ndarray


def decode(tokens, memory, direction, params: Parameters, config: ModelConfig):
    """Teacher-forced decoder pass.

    Returns ``(logits [batch, L, V], attention)`` where ``attention`` is a
    list of :class:`DecoderAttention`, self then cross for each layer.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None]
        memory = reshape(memory, (1,) + memory.shape)
    y = embed_decoder_inputs(ids, direction, params, config)
    mask = causal_mask(ids.shape[1])
    attention = []
    for i in range(config.n_layers):
        p = f"decoder.layer{i}"
        s, sw = multi_head_attention(y, y, _attn(params, f"{p}.self_attn", config.heads), mask)
        y = _ln(add(y, s), params, f"{p}.ln1")
        c, cw = multi_head_attention(y, memory, _attn(params, f"{p}.cross_attn", config.heads))
        y = _ln(add(y, c), params, f"{p}.ln2")
        y = _ln(add(y, feed_forward(y, _ff(params, f"{p}.ff"))), params, f"{p}.ln3")
        attention.append(DecoderAttention(i, "decoder-self", sw.data))
        attention.append(DecoderAttention(i, "decoder-cross", cw.data))
    logits = add(matmul(y, params["head.weight"]), params["head.bias"])
    if single:
        logits = reshape(logits, logits.shape[1:])
        for a in attention:
            a.weights = a.weights[0]
    return logits, attention


def forward(images, tokens, direction, params: Parameters, config: ModelConfig):
    memory = encode(extract_visual_features(images, params, config), params, config)
    return decode(tokens, memory, direction, params, config)
