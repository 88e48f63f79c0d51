"""Toy volume and report encoders plus the shared projection head.

The volume encoder keeps the structural roles of a staged 3D CNN: four stages,
a freezable prefix, a local tap (stage 3 by default) and a self-attention
module on the last stage whose weights drive the explainability heatmap.
Each downsampling stage is a stride-2, kernel-2 block: the 2x2x2 children of a
cell are concatenated (space-to-depth) and mapped by a per-position affine
layer followed by ReLU. The first stage downsamples the raw voxels, stages 2
and 3 downsample their input grid, and stage 4 keeps the stage-3 grid. Every
stage batch-normalizes its affine output before the ReLU: training passes use
batch statistics (frozen stages included), evaluation passes the running ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Node

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class ConfigError(ValueError):
    pass


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class VolumeEncoderConfig:
    input_dims: tuple[int, int, int] = (16, 16, 16)
    stage_channels: tuple[int, int, int, int] = (8, 16, 32, 64)
    local_tap_stage: int = 3
    proj_dim: int = 64
    dropout_rate: float = 0.25

    def __post_init__(self):
        if len(self.stage_channels) != 4 or min(self.stage_channels) < 1:
            raise ConfigError("volume encoder needs 4 positive stage channel counts")
        if not 1 <= self.local_tap_stage < 4:
            raise ConfigError(f"local_tap_stage must be in 1..3, got {self.local_tap_stage}")
        if any(d % 8 or d < 8 for d in self.input_dims):
            raise ConfigError(f"input dims must be positive multiples of 8, got {self.input_dims}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    def stage_grid(self, stage: int) -> tuple[int, int, int]:
        """Spatial grid of stage 1..4."""
        factor = 2 ** min(stage, 3)
        return tuple(d // factor for d in self.input_dims)

    def local_shape(self) -> tuple[int, int]:
        return int(np.prod(self.stage_grid(self.local_tap_stage))), self.stage_channels[self.local_tap_stage - 1]

    @property
    def global_dim(self) -> int:
        return self.stage_channels[3]


@dataclass(frozen=True)
class ReportEncoderConfig:
    vocab_size: int = 64
    embed_dim: int = 64
    num_layers: int = 3
    frozen_prefix_layers: int = 1
    max_tokens: int = 128
    positional: bool = False

    def __post_init__(self):
        if self.num_layers < 1 or self.embed_dim < 1 or self.vocab_size < 1:
            raise ConfigError("report encoder sizes must be positive")
        if not 0 <= self.frozen_prefix_layers < self.num_layers:
            raise ConfigError("frozen_prefix_layers must be smaller than num_layers")


@dataclass
class EncoderOutput:
    global_rep: Node
    local_rep: Node
    attn_weights: Node | None = None
    grid: tuple[int, int, int] | None = field(default=None, repr=False)


# ---------------------------------------------------------------- init helpers

def _dense(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


def _walsh_stem(rng: np.random.Generator, fan_out: int) -> np.ndarray:
    """Fixed 2x2x2 Walsh-Hadamard filter bank; extra channels are random.

    Stands in for generic low-level filters in the frozen stem: the eight
    sign patterns span every patch exactly (mean, edges, checkerboard).
    """
    h2 = np.array([[1.0, 1.0], [1.0, -1.0]])
    bank = np.kron(np.kron(h2, h2), h2) / np.sqrt(8.0)
    w = _dense(rng, 8, fan_out)
    k = min(8, fan_out)
    w[:, :k] = bank[:, :k]
    return w


def _pooling_stage(rng: np.random.Generator, c_in: int, fan_out: int) -> np.ndarray:
    """Per-channel average over the 8 sub-patches; extra channels are random."""
    w = _dense(rng, 8 * c_in, fan_out)
    k = min(c_in, fan_out)
    w[:, :k] = 0.0
    for c in range(k):
        w[c::c_in, c] = 1.0 / np.sqrt(8.0)
    return w


def _attn_params(rng, prefix: str, channels: int, bias: bool = True) -> dict[str, Node]:
    params = {}
    for part in ("q", "k", "v"):
        params[f"{prefix}.w{part}"] = dc.parameter(
            rng.normal(0.0, 1.0 / np.sqrt(channels), size=(channels, channels)), f"{prefix}.w{part}")
        if bias:
            params[f"{prefix}.b{part}"] = dc.parameter(np.zeros(channels), f"{prefix}.b{part}")
    return params


def init_volume_params(cfg: VolumeEncoderConfig, rng: np.random.Generator) -> dict[str, Node]:
    params: dict[str, Node] = {}
    fan_in = 8
    for s, ch in enumerate(cfg.stage_channels, start=1):
        if s > 1:
            fan_in = cfg.stage_channels[s - 2] * (8 if s <= 3 else 1)
        if s == 1:
            w = _walsh_stem(rng, ch)
        elif s == 2:
            w = _pooling_stage(rng, cfg.stage_channels[0], ch)
        else:
            w = _dense(rng, fan_in, ch)
        params[f"vol.stage{s}.w"] = dc.parameter(w, f"vol.stage{s}.w")
        params[f"vol.stage{s}.b"] = dc.parameter(np.zeros(ch), f"vol.stage{s}.b")
        params[f"vol.stage{s}.gamma"] = dc.parameter(np.ones(ch), f"vol.stage{s}.gamma")
        params[f"vol.stage{s}.beta"] = dc.parameter(np.full(ch, 0.01), f"vol.stage{s}.beta")
        params[f"vol.stage{s}.running_mean"] = dc.Node(np.zeros(ch), name=f"vol.stage{s}.running_mean")
        params[f"vol.stage{s}.running_var"] = dc.Node(np.ones(ch), name=f"vol.stage{s}.running_var")
    n_pos = int(np.prod(cfg.stage_grid(4)))
    params["vol.stage4.pos"] = dc.parameter(rng.normal(0.0, 0.1, size=(n_pos, cfg.stage_channels[3])),
                                            "vol.stage4.pos")
    params.update(_attn_params(rng, "vol.attn", cfg.stage_channels[3]))
    return params


def init_report_params(cfg: ReportEncoderConfig, rng: np.random.Generator) -> dict[str, Node]:
    params = {"txt.embed": dc.parameter(rng.normal(0.0, 1.0, size=(cfg.vocab_size + 1, cfg.embed_dim)),
                                        "txt.embed")}
    for layer in range(cfg.num_layers):
        params.update(_attn_params(rng, f"txt.layer{layer}", cfg.embed_dim))
    return params


def init_projection_head(prefix: str, d_in: int, d_out: int, rng: np.random.Generator,
                         d_hidden: int | None = None) -> dict[str, Node]:
    d_hidden = d_hidden or d_out
    return {
        f"{prefix}.w1": dc.parameter(_dense(rng, d_in, d_hidden), f"{prefix}.w1"),
        f"{prefix}.b1": dc.parameter(np.zeros(d_hidden), f"{prefix}.b1"),
        f"{prefix}.bn.gamma": dc.parameter(np.ones(d_hidden), f"{prefix}.bn.gamma"),
        f"{prefix}.bn.beta": dc.parameter(np.zeros(d_hidden), f"{prefix}.bn.beta"),
        f"{prefix}.bn.running_mean": dc.Node(np.zeros(d_hidden), name=f"{prefix}.bn.running_mean"),
        f"{prefix}.bn.running_var": dc.Node(np.ones(d_hidden), name=f"{prefix}.bn.running_var"),
        f"{prefix}.w2": dc.parameter(rng.normal(0.0, 1.0 / np.sqrt(d_hidden), size=(d_hidden, d_out)),
                                     f"{prefix}.w2"),
        f"{prefix}.b2": dc.parameter(np.zeros(d_out), f"{prefix}.b2"),
    }


# ---------------------------------------------------------------- building blocks

def self_attention(fmap: Node, params: dict[str, Node], prefix: str) -> tuple[Node, Node]:
    """Residual single-head self-attention over the position axis.

    ``fmap`` is [..., P, C]; returns (fmap + softmax(Q K^T / sqrt(C)) V, weights).
    """
    q = fmap @ params[f"{prefix}.wq"] + params[f"{prefix}.bq"]
    k = fmap @ params[f"{prefix}.wk"] + params[f"{prefix}.bk"]
    v = fmap @ params[f"{prefix}.wv"] + params[f"{prefix}.bv"]
    logits = dc.scale(q @ dc.transpose(k), 1.0 / np.sqrt(fmap.shape[-1]))
    weights = dc.softmax_rows(logits)
    return fmap + weights @ v, weights


def projection_head(rep: Node, params: dict[str, Node], prefix: str, training: bool = False) -> Node:
    """Affine, batch norm, relu, affine over the last axis of a vector [d] or batch [n, d].

    The batch norm strips the component shared by every sample: pooled encoder
    features are dominated by it, which leaves all cosines near 1 at init.
    Batch statistics need at least two samples; otherwise running ones are used.
    """
    rep = dc.constant(rep)
    single = rep.ndim == 1
    if single:
        rep = dc.reshape(rep, (1, -1))
    hidden = rep @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"]
    n, width = hidden.shape
    normed = _batch_norm(dc.reshape(hidden, (n, 1, width)), params, f"{prefix}.bn", training and n > 1)
    out = dc.relu(dc.reshape(normed, (n, width))) @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]
    return out[0] if single else out


def _space_to_depth(x: Node, grid: tuple[int, int, int]) -> Node:
    """[B, P, C] on ``grid`` -> [B, P/8, 8C] on the half-resolution grid."""
    b, _, c = x.shape
    d, h, w = grid
    x = dc.reshape(x, (b, d // 2, 2, h // 2, 2, w // 2, 2, c))
    x = dc.transpose(x, (0, 1, 3, 5, 2, 4, 6, 7))
    return dc.reshape(x, (b, (d // 2) * (h // 2) * (w // 2), 8 * c))


def _voxels_to_patches(v: np.ndarray) -> np.ndarray:
    b, d, h, w = v.shape
    v = v.reshape(b, d // 2, 2, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 5, 2, 4, 6)
    return v.reshape(b, (d // 2) * (h // 2) * (w // 2), 8)


def is_buffer(name: str) -> bool:
    """Running statistics: stored with the parameters but never trained."""
    return name.endswith((".running_mean", ".running_var"))


def _batch_norm(x: Node, params: dict[str, Node], prefix: str, training: bool) -> Node:
    """Normalize [B, P, C] per channel over batch and positions."""
    mean_buf, var_buf = params[f"{prefix}.running_mean"], params[f"{prefix}.running_var"]
    if training:
        mu = dc.mean(x, axis=(0, 1))
        centered = x - mu
        var = dc.mean(centered * centered, axis=(0, 1))
        count = x.shape[0] * x.shape[1]
        mean_buf.value = (1 - BN_MOMENTUM) * mean_buf.value + BN_MOMENTUM * mu.value
        unbiased = var.value * count / max(count - 1, 1)
        var_buf.value = (1 - BN_MOMENTUM) * var_buf.value + BN_MOMENTUM * unbiased
        normed = centered * dc.rsqrt(var + BN_EPS)
    else:
        normed = (x - mean_buf.value) * (1.0 / np.sqrt(var_buf.value + BN_EPS))
    return normed * params[f"{prefix}.gamma"] + params[f"{prefix}.beta"]


def _dropout(x: Node, rate: float, rng: np.random.Generator | None) -> Node:
    if rng is None or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


# ---------------------------------------------------------------- encoders

def encode_volume(v, cfg: VolumeEncoderConfig, params: dict[str, Node], training: bool = False,
                  dropout_rng: np.random.Generator | None = None) -> EncoderOutput:
    """Encode one volume [D,H,W] or a batch [B,D,H,W].

    In training mode, trainable stages normalize with batch statistics (and
    update their running statistics); dropout needs ``dropout_rng`` as well.
    """
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 3
    if single:
        v = v[None]
    if v.ndim != 4 or tuple(v.shape[1:]) != tuple(cfg.input_dims):
        raise ConfigError(f"volume shape {v.shape[-3:]} does not match config {cfg.input_dims}")
    x = dc.constant(_voxels_to_patches(v))
    taps = []
    for s in range(1, 5):
        if s in (2, 3):
            x = _space_to_depth(x, cfg.stage_grid(s - 1))
        x = x @ params[f"vol.stage{s}.w"] + params[f"vol.stage{s}.b"]
        x = dc.relu(_batch_norm(x, params, f"vol.stage{s}", training))
        if s < 4 and training:
            x = _dropout(x, cfg.dropout_rate, dropout_rng)
        taps.append(x)
    x = x + params["vol.stage4.pos"]
    weighted, weights = self_attention(x, params, "vol.attn")
    global_rep = dc.mean(weighted, axis=1)
    local_rep = taps[cfg.local_tap_stage - 1]
    if single:
        return EncoderOutput(global_rep[0], local_rep[0], weights[0], cfg.stage_grid(4))
    return EncoderOutput(global_rep, local_rep, weights, cfg.stage_grid(4))


def _sinusoid(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def encode_report(tokens, cfg: ReportEncoderConfig, params: dict[str, Node]) -> EncoderOutput:
    """Encode one token-id sequence [T] or an equal-length batch [B,T].

    An aggregate token (id ``vocab_size``) is prepended; its final embedding is
    the global representation, the remaining positions form the local one.
    """
    ids = np.asarray(tokens)
    single = ids.ndim == 1
    if single:
        ids = ids[None]
    if ids.shape[1] == 0:
        raise ValueError("a report needs at least one token")
    if ids.shape[1] > cfg.max_tokens:
        raise ValueError(f"report has {ids.shape[1]} tokens, max is {cfg.max_tokens}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise VocabularyError(f"token ids must lie in [0, {cfg.vocab_size})")
    agg = np.full((ids.shape[0], 1), cfg.vocab_size)
    x = params["txt.embed"][np.concatenate([agg, ids], axis=1)]
    if cfg.positional:
        x = x + _sinusoid(x.shape[1], cfg.embed_dim)
    for layer in range(cfg.num_layers):
        x, _ = self_attention(x, params, f"txt.layer{layer}")
    if single:
        return EncoderOutput(x[0, 0], x[0, 1:])
    return EncoderOutput(x[:, 0], x[:, 1:])


# ---------------------------------------------------------------- freezing

def volume_stage_names(params: dict[str, Node], stage: int) -> list[str]:
    return [k for k in params if k.startswith(f"vol.stage{stage}.")]


def freeze_prefix(params: dict[str, Node], n_frozen: int, encoder: str = "volume") -> dict[str, Node]:
    """Mark the first ``n_frozen`` volume stages (or report layers) non-trainable.

    For the report encoder the embedding table freezes with the prefix.
    """
    if encoder == "volume":
        if not 0 <= n_frozen <= 4:
            raise ConfigError(f"cannot freeze {n_frozen} of 4 stages")
        names = [k for s in range(1, n_frozen + 1) for k in volume_stage_names(params, s)]
        if n_frozen == 4:
            names += [k for k in params if k.startswith("vol.attn.")]
    elif encoder == "report":
        names = [k for k in params
                 if any(k.startswith(f"txt.layer{i}.") for i in range(n_frozen))]
        if n_frozen > 0:
            names.append("txt.embed")
    else:
        raise ConfigError(f"unknown encoder {encoder!r}")
    for name in names:
        if is_buffer(name):
            continue
        params[name].requires_grad = False
        params[name].grad = None
    return params


def extract_attention_heatmap(out: EncoderOutput, target_dims: tuple[int, int, int]) -> np.ndarray:
    """Attention received per stage-4 position, upsampled and scaled to [0, 1].

    A constant map carries no localization signal and is returned as zeros.
    """
    if out.attn_weights is None or out.grid is None:
        raise ValueError("heatmaps need the output of encode_volume")
    weights = out.attn_weights.value
    if weights.ndim != 2:
        raise ValueError("extract one heatmap at a time (unbatched EncoderOutput)")
    salience = weights.mean(axis=0).reshape(out.grid)
    for axis, (target, g) in enumerate(zip(target_dims, out.grid)):
        if target % g:
            raise ConfigError(f"target dims {target_dims} not a multiple of grid {out.grid}")
        salience = np.repeat(salience, target // g, axis=axis)
    lo, hi = salience.min(), salience.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.zeros(target_dims)
    return (salience - lo) / (hi - lo)
