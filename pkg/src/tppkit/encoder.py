"""Shared encoding layer for asynchronous event sequences.

One layer = masked multi-head dot-product attention over causally visible
events, followed by a position-wise feed-forward block whose hidden features
optionally pass through a conv + ReLU + max-pool stage, with post-norm
residual connections.  The timestamp of each event is injected through a
sinusoidal temporal encoding that plays the role of a positional encoding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import MASK_NEG, Tensor


class ConfigError(ValueError):
    """Invalid model configuration."""


@dataclass
class ModelConfig:
    """Architecture hyperparameters (defaults are desk-scale).

    ``layer_sharing`` is "shared" (one encoding layer applied recursively,
    the default) or "stacked" (``max_iters`` distinct layers, the classic
    non-recurrent arrangement used for parameter-count comparisons).
    Adaptive halting requires the shared arrangement.
    """

    dim: int = 16                 # model width D (even; temporal encoding pairs)
    ffn_dim: int = 32             # feed-forward hidden width
    key_dim: int = 8              # per-head query/key width
    value_dim: int = 8            # per-head value width
    heads: int = 2
    rnn_dim: int = 16             # recurrent smoothing width; 0 disables it
    max_iters: int = 2            # iteration cap for both recurrence modes
    act_enabled: bool = True      # adaptive halting vs. fixed iteration count
    act_threshold: float = 0.99
    use_cnn_ffn: bool = True
    layer_sharing: str = "shared"
    dropout: float = 0.1
    softplus_beta: float = 1.0
    conv_kernel: int = 3
    conv_stride: int = 2
    conv_padding: int = 0
    pool_size: int = 2
    pool_stride: int = 2
    alpha_trainable: bool = False  # intensity slope coefficients
    normalize_times: bool = False  # rescale each sequence to end at t=1

    def reduced_feature_len(self) -> int:
        """Feature length entering the final FFN projection."""
        if not self.use_cnn_ffn:
            return self.ffn_dim
        after_conv = (self.ffn_dim + 2 * self.conv_padding - self.conv_kernel) // self.conv_stride + 1
        if after_conv < 1:
            raise ConfigError("conv reduces the feature axis to nothing")
        after_pool = (after_conv - self.pool_size) // self.pool_stride + 1
        return after_pool

    def validate(self) -> "ModelConfig":
        positives = ["dim", "ffn_dim", "key_dim", "value_dim", "heads",
                     "max_iters", "conv_kernel", "conv_stride",
                     "pool_size", "pool_stride"]
        for name in positives:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.dim % 2 != 0:
            raise ConfigError("dim must be even (temporal encoding pairs)")
        if self.rnn_dim < 0 or self.conv_padding < 0:
            raise ConfigError("rnn_dim and conv_padding must be >= 0")
        if not 0.0 < self.act_threshold <= 1.0:
            raise ConfigError("act_threshold must be in (0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.softplus_beta <= 0:
            raise ConfigError("softplus_beta must be positive")
        if self.layer_sharing not in ("shared", "stacked"):
            raise ConfigError("layer_sharing must be 'shared' or 'stacked'")
        if self.act_enabled and self.layer_sharing == "stacked":
            raise ConfigError("adaptive halting requires layer_sharing='shared'")
        if self.use_cnn_ffn and self.reduced_feature_len() < 1:
            raise ConfigError("conv/pool settings leave no features")
        return self

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()


def temporal_encoding(times: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal encoding of absolute timestamps, entry j of d (1-based):
    cos(t / 10000^((j-1)/d)) for odd j, sin(t / 10000^(j/d)) for even j.

    Returns a constant float64 array of shape ``times.shape + (dim,)``.
    """
    if dim % 2 != 0:
        raise ConfigError("temporal encoding needs an even dim")
    j = np.arange(dim)
    expo = np.where(j % 2 == 0, j, j + 1) / dim
    divisor = np.power(10000.0, expo)
    angles = np.asarray(times, dtype=np.float64)[..., None] / divisor
    out = np.empty(angles.shape, dtype=np.float64)
    out[..., 0::2] = np.cos(angles[..., 0::2])
    out[..., 1::2] = np.sin(angles[..., 1::2])
    return out


def attention_mask(pad_mask: np.ndarray) -> np.ndarray:
    """Additive (B, I, I) mask: 0 where key j <= query i and j is a real
    event, MASK_NEG elsewhere.  Keeps future and padded keys invisible."""
    b, i_max = pad_mask.shape
    causal = np.tril(np.ones((i_max, i_max), dtype=bool))
    visible = causal[None, :, :] & pad_mask[:, None, :]
    return np.where(visible, 0.0, MASK_NEG)


@dataclass
class LayerTensors:
    """References into the model's named-tensor table for one layer."""

    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    w_multi: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    conv_w: Tensor | None
    fc2_w: Tensor
    fc2_b: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor


def xavier(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in, fan_out = (shape[0], shape[-1]) if len(shape) > 1 else (shape[0], 1)
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def init_layer(rng: np.random.Generator, cfg: ModelConfig,
               prefix: str, tensors: dict[str, Tensor]) -> None:
    """Create one encoding layer's parameters under ``prefix`` in the table."""
    d, dk, dv = cfg.dim, cfg.key_dim, cfg.value_dim
    for h in range(cfg.heads):
        tensors[f"{prefix}.attn.h{h}.W_Q"] = Tensor(xavier(rng, (d, dk)), True)
        tensors[f"{prefix}.attn.h{h}.W_K"] = Tensor(xavier(rng, (d, dk)), True)
        tensors[f"{prefix}.attn.h{h}.W_V"] = Tensor(xavier(rng, (d, dv)), True)
    tensors[f"{prefix}.attn.W_multi"] = Tensor(xavier(rng, (cfg.heads * dv, d)), True)
    tensors[f"{prefix}.ffn.FC1.W"] = Tensor(xavier(rng, (d, cfg.ffn_dim)), True)
    tensors[f"{prefix}.ffn.FC1.b"] = Tensor(np.zeros(cfg.ffn_dim), True)
    if cfg.use_cnn_ffn:
        tensors[f"{prefix}.ffn.conv.w"] = Tensor(xavier(rng, (cfg.conv_kernel,)), True)
    tensors[f"{prefix}.ffn.FC2.W"] = Tensor(xavier(rng, (cfg.reduced_feature_len(), d)), True)
    tensors[f"{prefix}.ffn.FC2.b"] = Tensor(np.zeros(d), True)
    for ln in ("ln1", "ln2"):
        tensors[f"{prefix}.{ln}.g"] = Tensor(np.ones(d), True)
        tensors[f"{prefix}.{ln}.b"] = Tensor(np.zeros(d), True)


def layer_view(tensors: dict[str, Tensor], cfg: ModelConfig, prefix: str) -> LayerTensors:
    return LayerTensors(
        wq=[tensors[f"{prefix}.attn.h{h}.W_Q"] for h in range(cfg.heads)],
        wk=[tensors[f"{prefix}.attn.h{h}.W_K"] for h in range(cfg.heads)],
        wv=[tensors[f"{prefix}.attn.h{h}.W_V"] for h in range(cfg.heads)],
        w_multi=tensors[f"{prefix}.attn.W_multi"],
        fc1_w=tensors[f"{prefix}.ffn.FC1.W"],
        fc1_b=tensors[f"{prefix}.ffn.FC1.b"],
        conv_w=tensors.get(f"{prefix}.ffn.conv.w"),
        fc2_w=tensors[f"{prefix}.ffn.FC2.W"],
        fc2_b=tensors[f"{prefix}.ffn.FC2.b"],
        ln1_g=tensors[f"{prefix}.ln1.g"],
        ln1_b=tensors[f"{prefix}.ln1.b"],
        ln2_g=tensors[f"{prefix}.ln2.g"],
        ln2_b=tensors[f"{prefix}.ln2.b"],
    )


def masked_attention(layer: LayerTensors, s: Tensor, attn_mask: np.ndarray,
                     cfg: ModelConfig, drops=None) -> Tensor:
    """Multi-head dot-product attention; position i sees positions <= i."""
    scale = 1.0 / math.sqrt(cfg.key_dim)
    heads = []
    for wq, wk, wv in zip(layer.wq, layer.wk, layer.wv):
        q = s @ wq
        k = s @ wk
        v = s @ wv
        scores = (q @ ad.swapaxes(k, -1, -2)) * scale
        probs = ad.row_softmax(scores, attn_mask)
        if drops is not None:
            probs = ad.dropout(probs, cfg.dropout, drops.next_rng(), True)
        heads.append(probs @ v)
    merged = heads[0] if len(heads) == 1 else ad.concat(heads, axis=-1)
    return merged @ layer.w_multi


def conv_ffn(layer: LayerTensors, x: Tensor, cfg: ModelConfig) -> Tensor:
    """Position-wise feed-forward; the conv/pool stage slides along the
    feature axis so sequence length and causality are untouched."""
    h = x @ layer.fc1_w + layer.fc1_b
    if cfg.use_cnn_ffn:
        h = ad.conv1d_feature(h, layer.conv_w, cfg.conv_stride, cfg.conv_padding)
        h = ad.relu(h)
        h = ad.maxpool1d_feature(h, cfg.pool_size, cfg.pool_stride)
    else:
        h = ad.relu(h)
    return h @ layer.fc2_w + layer.fc2_b


def encoding_layer(layer: LayerTensors, s: Tensor, attn_mask: np.ndarray,
                   pad_f: np.ndarray, cfg: ModelConfig, drops=None) -> Tensor:
    """Attention and feed-forward sublayers with post-norm residuals.

    ``pad_f`` is the float pad mask (B, I, 1); padded rows are forced back
    to zero after each sublayer.  ``drops`` (a DropoutStreams) enables
    training-mode dropout on attention weights and the feed-forward output.
    """
    a = masked_attention(layer, s, attn_mask, cfg, drops)
    s1 = ad.layer_norm(a + s, layer.ln1_g, layer.ln1_b) * pad_f
    f = conv_ffn(layer, s1, cfg)
    if drops is not None:
        f = ad.dropout(f, cfg.dropout, drops.next_rng(), True)
    return ad.layer_norm(f + s1, layer.ln2_g, layer.ln2_b) * pad_f
