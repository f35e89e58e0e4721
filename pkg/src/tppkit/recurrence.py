"""Recursive application of the shared encoding layer.

Two drivers are provided: a fixed iteration count (optionally with distinct
stacked layers), and adaptive halting, where each sequence position
accumulates a halting probability across iterations and the returned state is
the update-weighted blend of the per-iteration layer outputs.  A small gated
recurrent postprocessor can smooth the result before it is handed to the
intensity and prediction heads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch
from .encoder import (ConfigError, ModelConfig, attention_mask, encoding_layer,
                      init_layer, layer_view, temporal_encoding, xavier)
from .seeding import derive_rng

ALPHA_INIT = -0.1  # default per-type slope coefficient of the intensity


@dataclass
class ActStats:
    """Diagnostics of one adaptive-halting run.

    ``weight_history[k][b, i]`` is the update weight position (b, i) received
    at iteration k; the per-position cumulative sum lies in (0, 1] and equals
    1 exactly (up to rounding) when the position halted before the cap.
    """

    iterations_run: int
    n_updates: np.ndarray        # (B, I) float, <= max_iters
    halting_prob: np.ndarray     # (B, I)
    remainders: np.ndarray       # (B, I)
    halted: np.ndarray           # (B, I) bool
    pad_mask: np.ndarray         # (B, I) bool
    weight_history: list = field(default_factory=list)

    def mean_iterations(self) -> float:
        return float(self.n_updates[self.pad_mask].mean())

    def max_iterations(self) -> float:
        return float(self.n_updates[self.pad_mask].max())

    def fraction_halted(self) -> float:
        return float(self.halted[self.pad_mask].mean())

    def summary(self) -> str:
        return (f"act iterations mean={self.mean_iterations():.3f} "
                f"max={self.max_iterations():.0f} "
                f"halted_before_cap={self.fraction_halted():.3f}")


def run_pure(embedded: Tensor, temporal: np.ndarray, params: "ModelParams",
             attn_mask: np.ndarray, pad_f: np.ndarray, drops=None) -> Tensor:
    """Fixed-count recursion: the temporal encoding is re-added to the state
    before every layer application."""
    cfg = params.config
    s = embedded
    for it in range(cfg.max_iters):
        prefix = "layer0" if cfg.layer_sharing == "shared" else f"layer{it}"
        layer = layer_view(params.tensors, cfg, prefix)
        s = encoding_layer(layer, s + temporal, attn_mask, pad_f, cfg, drops)
    return s


def run_act(embedded: Tensor, temporal: np.ndarray, params: "ModelParams",
            attn_mask: np.ndarray, pad_mask: np.ndarray, pad_f: np.ndarray,
            drops=None) -> tuple[Tensor, ActStats]:
    """Adaptive halting over the shared layer.

    Per iteration and position: a sigmoid projection of the current state
    gives a halting increment p.  A position halts once its accumulated
    probability would cross the threshold; the leftover to 1 becomes its
    final update weight.  Iteration stops when every real position has halted
    or used up ``max_iters`` updates.  Padded positions start halted with
    zero weight, so they never contribute.
    """
    cfg = params.config
    layer = layer_view(params.tensors, cfg, "layer0")
    w_p = params.tensors["act.W_p"]
    b_p = params.tensors["act.b_p"]
    b, i_max = pad_mask.shape

    h_p = Tensor(np.where(pad_mask, 0.0, 1.0))
    remainders = Tensor(np.zeros((b, i_max)))
    p_s = Tensor(np.zeros((b, i_max, cfg.dim)))
    n_updates = np.zeros((b, i_max))
    halted = ~pad_mask.copy()
    s = embedded
    history: list[np.ndarray] = []
    iterations = 0

    while True:
        eligible = ~halted & (n_updates < cfg.max_iters)
        if not eligible.any():
            break
        iterations += 1
        s_in = s + temporal
        p = ad.sigmoid(ad.reshape(s_in @ w_p, (b, i_max)) + b_p)

        crossing = h_p.data + p.data > cfg.act_threshold
        new_halted = eligible & crossing
        running = eligible & ~crossing
        run_f = running.astype(np.float64)
        new_f = new_halted.astype(np.float64)

        h_p = h_p + p * run_f
        increment = (1.0 - h_p) * new_f
        remainders = remainders + increment
        h_p = h_p + increment
        n_updates += run_f + new_f
        halted |= new_halted

        weights = p * run_f + increment
        history.append(weights.data.copy())
        w3 = ad.reshape(weights, (b, i_max, 1))

        s = encoding_layer(layer, s_in, attn_mask, pad_f, cfg, drops)
        p_s = s * w3 + p_s * (1.0 - w3)

    stats = ActStats(iterations, n_updates, h_p.data.copy(),
                     remainders.data.copy(), halted & pad_mask, pad_mask, history)
    return p_s, stats


def postprocess(h: Tensor, params: "ModelParams", pad_mask: np.ndarray,
                pad_f: np.ndarray) -> Tensor:
    """FC -> left-to-right gated recurrent pass -> FC.

    The hidden state is carried unchanged across padded positions and padded
    outputs are zeroed.
    """
    cfg = params.config
    if cfg.rnn_dim < 1:
        raise ConfigError("postprocess called with rnn_dim = 0")
    t = params.tensors
    b, i_max = pad_mask.shape
    x = h @ t["post.FC3.W"] + t["post.FC3.b"]
    state = Tensor(np.zeros((b, cfg.rnn_dim)))
    outs = []
    for step in range(i_max):
        xt = x[:, step, :]
        z = ad.sigmoid(xt @ t["post.cell.W_z"] + state @ t["post.cell.U_z"] + t["post.cell.b_z"])
        r = ad.sigmoid(xt @ t["post.cell.W_r"] + state @ t["post.cell.U_r"] + t["post.cell.b_r"])
        cand = ad.tanh(xt @ t["post.cell.W_h"] + (r * state) @ t["post.cell.U_h"] + t["post.cell.b_h"])
        updated = (1.0 - z) * state + z * cand
        m = pad_mask[:, step:step + 1].astype(np.float64)
        state = updated * m + state * (1.0 - m)
        outs.append(ad.reshape(state, (b, 1, cfg.rnn_dim)))
    seq = ad.concat(outs, axis=1)
    return (seq @ t["post.FC4.W"] + t["post.FC4.b"]) * pad_f


@dataclass
class ModelParams:
    """All trainable tensors, addressed by stable names, plus the config."""

    config: ModelConfig
    num_types: int
    tensors: dict[str, Tensor]

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if v.requires_grad}

    def mask_fixed_gradients(self, grads: dict[str, np.ndarray]) -> None:
        """Zero gradient entries of structurally fixed values (the PAD
        embedding row)."""
        if "embedding.K" in grads:
            grads["embedding.K"][0, :] = 0.0


def build_model(config: ModelConfig, num_types: int, seed: int = 0) -> ModelParams:
    """Create and initialize every model tensor.

    Attention/feed-forward/head matrices are Xavier-uniform, embeddings and
    intensity history weights are normal(0, dim^-1/2), biases and layer-norm
    shifts start at zero.
    """
    config.validate()
    if num_types < 1:
        raise ConfigError("num_types must be positive")
    rng = derive_rng(seed)
    d, c = config.dim, num_types
    tensors: dict[str, Tensor] = {}

    emb = rng.normal(0.0, d ** -0.5, size=(c + 1, d))
    emb[0, :] = 0.0  # PAD row, fixed at zero
    tensors["embedding.K"] = Tensor(emb, True)

    n_layers = 1 if config.layer_sharing == "shared" else config.max_iters
    for k in range(n_layers):
        init_layer(rng, config, f"layer{k}", tensors)

    if config.act_enabled:
        tensors["act.W_p"] = Tensor(xavier(rng, (d, 1)), True)
        tensors["act.b_p"] = Tensor(0.0, True)

    if config.rnn_dim > 0:
        r = config.rnn_dim
        tensors["post.FC3.W"] = Tensor(xavier(rng, (d, r)), True)
        tensors["post.FC3.b"] = Tensor(np.zeros(r), True)
        for gate in ("z", "r", "h"):
            tensors[f"post.cell.W_{gate}"] = Tensor(xavier(rng, (r, r)), True)
            tensors[f"post.cell.U_{gate}"] = Tensor(xavier(rng, (r, r)), True)
            tensors[f"post.cell.b_{gate}"] = Tensor(np.zeros(r), True)
        tensors["post.FC4.W"] = Tensor(xavier(rng, (r, d)), True)
        tensors["post.FC4.b"] = Tensor(np.zeros(d), True)

    tensors["intensity.b"] = Tensor(np.zeros(c), True)
    tensors["intensity.alpha"] = Tensor(np.full(c, ALPHA_INIT), config.alpha_trainable)
    tensors["intensity.w"] = Tensor(rng.normal(0.0, d ** -0.5, size=(c, d)), True)

    tensors["head.W_time"] = Tensor(xavier(rng, (1, d)), True)
    tensors["head.b_time"] = Tensor(0.0, True)
    tensors["head.W_type"] = Tensor(xavier(rng, (c, d)), True)
    tensors["head.b_type"] = Tensor(np.zeros(c), True)
    return ModelParams(config, num_types, tensors)


def count_params(params: ModelParams) -> int:
    """Number of model parameters: the exact sum over named tensors, minus
    the structurally-zero PAD embedding row."""
    total = sum(t.size for t in params.tensors.values())
    return total - params.config.dim


def parameter_breakdown(params: ModelParams) -> list[tuple[str, tuple, int]]:
    """(name, shape, count) per tensor; the PAD row is deducted from the
    embedding entry so the counts sum to ``count_params``."""
    rows = []
    for name, t in params.tensors.items():
        n = t.size
        if name == "embedding.K":
            n -= params.config.dim
        rows.append((name, tuple(t.shape), n))
    return rows


def forward(params: ModelParams, batch: Batch, drops=None
            ) -> tuple[Tensor, ActStats | None]:
    """Hidden representation of a batch: (B, I_max, dim) with padded rows at
    zero, plus halting diagnostics when adaptive halting is on."""
    cfg = params.config
    emb = ad.embedding_lookup(params.tensors["embedding.K"], batch.type_ids)
    temporal = temporal_encoding(batch.times, cfg.dim)
    attn = attention_mask(batch.pad_mask)
    pad_f = batch.pad_mask.astype(np.float64)[..., None]

    stats = None
    if cfg.act_enabled:
        h, stats = run_act(emb, temporal, params, attn, batch.pad_mask, pad_f, drops)
    else:
        h = run_pure(emb, temporal, params, attn, pad_f, drops)
    if cfg.rnn_dim > 0:
        h = postprocess(h, params, batch.pad_mask, pad_f)
    return h, stats
