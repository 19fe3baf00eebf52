"""TSMixer building blocks: residual MLP mixing sublayers with gated attention.

Parameters live in a flat mapping of dotted names to tensors. Each function
takes the mapping plus the name prefix of its parameters, so the same code
serves the backbone, the decoder and the exogenous mixer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T

LN_EPS = 1e-5


@dataclass
class Context:
    """Forward-pass mode shared by every layer of one call."""

    training: bool = False
    rng: T.DropoutRNG | None = None


EVAL = Context()


NORM_MODES = ("feature", "mixed")
GATE_MODES = ("branch", "post")


@dataclass
class MixerBlockConfig:
    """``norm="feature"`` normalizes every sublayer over the hidden axis before
    mixing; ``"mixed"`` normalizes over the axis being mixed.

    ``gate="branch"`` gates the MLP output inside the residual branch,
    ``x + gate(mlp(x))``; ``"post"`` gates the sum, ``gate(x + mlp(x))``.
    """

    num_patches: int
    hidden: int
    num_channels: int = 1
    channel_mix: bool = False
    dropout: float = 0.0
    expansion: int = 2
    norm: str = "feature"
    gate: str = "branch"

    def __post_init__(self) -> None:
        if self.num_patches < 1 or self.hidden < 1 or self.num_channels < 1:
            raise ValueError("mixer block sizes must be positive")
        if self.norm not in NORM_MODES:
            raise ValueError(f"norm must be one of {NORM_MODES}, got {self.norm!r}")
        if self.gate not in GATE_MODES:
            raise ValueError(f"gate must be one of {GATE_MODES}, got {self.gate!r}")

    def norm_width(self, mixed: int) -> int:
        return self.hidden if self.norm == "feature" else mixed


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to two standard deviations by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_linear(rng, name: str, d_in: int, d_out: int) -> dict[str, np.ndarray]:
    return {f"{name}.weight": trunc_normal(rng, (d_in, d_out)), f"{name}.bias": np.zeros(d_out)}


def init_sublayer(rng, name: str, d: int, expansion: int = 2, norm_width: int | None = None) -> dict[str, np.ndarray]:
    e = expansion * d
    w = d if norm_width is None else norm_width
    params = {f"{name}.norm.weight": np.ones(w), f"{name}.norm.bias": np.zeros(w)}
    params.update(init_linear(rng, f"{name}.fc1", d, e))
    params.update(init_linear(rng, f"{name}.fc2", e, d))
    params.update(init_linear(rng, f"{name}.gate", d, d))
    return params


def init_block(rng, name: str, cfg: MixerBlockConfig) -> dict[str, np.ndarray]:
    params = init_sublayer(rng, f"{name}.patch_mix", cfg.num_patches, cfg.expansion, cfg.norm_width(cfg.num_patches))
    params.update(init_sublayer(rng, f"{name}.feature_mix", cfg.hidden, cfg.expansion))
    if cfg.channel_mix:
        params.update(init_sublayer(rng, f"{name}.channel_mix", cfg.num_channels, cfg.expansion,
                                    cfg.norm_width(cfg.num_channels)))
    return params


def linear(x: T.Tensor, p: Mapping[str, T.Tensor], name: str) -> T.Tensor:
    return T.matmul_last_dim(x, p[f"{name}.weight"]) + p[f"{name}.bias"]


def layer_norm(x: T.Tensor, p: Mapping[str, T.Tensor], name: str) -> T.Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = T.power(var + LN_EPS, -0.5)
    return xc * inv * p[f"{name}.weight"] + p[f"{name}.bias"]


def gated_attention(x: T.Tensor, p: Mapping[str, T.Tensor], name: str) -> T.Tensor:
    """x * softmax(x W + b) over the last axis."""
    return x * T.softmax_last_dim(linear(x, p, name))


def mlp_mixer_sublayer(x: T.Tensor, p: Mapping[str, T.Tensor], name: str, ctx: Context, rate: float,
                       normed: T.Tensor | None = None) -> T.Tensor:
    """x + Dropout(fc2(gelu(fc1(LayerNorm(x))))) along the last axis.

    ``normed`` replaces LayerNorm(x) when the caller normalized over another axis.
    """
    d = x.shape[-1]
    if normed is None:
        if p[f"{name}.norm.weight"].shape != (d,):
            raise T.ShapeError(f"{name}: input width {d} does not match parameters {p[f'{name}.norm.weight'].shape}")
        normed = layer_norm(x, p, f"{name}.norm")
    elif normed.shape != x.shape:
        raise T.ShapeError(f"{name}: normalized input {normed.shape} does not match {x.shape}")
    return x + mixer_mlp(normed, p, name, ctx, rate)


def mixer_mlp(normed: T.Tensor, p: Mapping[str, T.Tensor], name: str, ctx: Context, rate: float) -> T.Tensor:
    """The residual branch without the skip: Dropout(fc2(gelu(fc1(normed))))."""
    h = linear(T.gelu(linear(normed, p, f"{name}.fc1")), p, f"{name}.fc2")
    return T.dropout(h, rate, ctx.training, ctx.rng)


# permutation that moves the mixed axis of a [b, c, n, hf] tensor last (each is its own inverse)
_TO_LAST = {"patch_mix": (0, 1, 3, 2), "feature_mix": None, "channel_mix": (0, 3, 2, 1)}


def _permute(x: T.Tensor, perm) -> T.Tensor:
    return x if perm is None else T.transpose_axes(x, perm)


def _sublayer_input(x: T.Tensor, cfg: MixerBlockConfig, p, name: str, kind: str) -> tuple[T.Tensor, T.Tensor]:
    """(mixed-axis-last input, its normalization) for one sublayer of a block."""
    perm = _TO_LAST[kind]
    z = _permute(x, perm)
    if cfg.norm == "feature" and perm is not None:
        return z, _permute(layer_norm(x, p, f"{name}.{kind}.norm"), perm)
    return z, layer_norm(z, p, f"{name}.{kind}.norm")


def _gate_input(x: T.Tensor, cfg: MixerBlockConfig, p, name: str, kind: str, ctx: Context) -> tuple[T.Tensor, T.Tensor]:
    """(skip term, tensor the gate acts on), both with the mixed axis last."""
    z, normed = _sublayer_input(x, cfg, p, name, kind)
    h = mixer_mlp(normed, p, f"{name}.{kind}", ctx, cfg.dropout)
    if cfg.gate == "branch":
        return z, h
    return None, z + h


def _mix(x: T.Tensor, cfg: MixerBlockConfig, p, name: str, kind: str, ctx: Context) -> T.Tensor:
    skip, h = _gate_input(x, cfg, p, name, kind, ctx)
    y = gated_attention(h, p, f"{name}.{kind}.gate")
    if skip is not None:
        y = skip + y
    return _permute(y, _TO_LAST[kind])


def tsmixer_block(x: T.Tensor, cfg: MixerBlockConfig, p: Mapping[str, T.Tensor], name: str,
                  ctx: Context = EVAL) -> T.Tensor:
    """Patch mixing, then feature mixing, then (optionally) channel mixing.

    ``x`` has shape [b, c, n, hf]; the output has the same shape. Each
    sublayer is a residual MLP along its axis with a gate over that axis.
    """
    if x.ndim != 4 or x.shape[2:] != (cfg.num_patches, cfg.hidden):
        raise T.ShapeError(f"{name}: expected [b, c, {cfg.num_patches}, {cfg.hidden}], got {x.shape}")
    if cfg.channel_mix and x.shape[1] != cfg.num_channels:
        raise T.ShapeError(f"{name}: channel mixing built for {cfg.num_channels} channels, got {x.shape[1]}")
    y = _mix(x, cfg, p, name, "patch_mix", ctx)
    y = _mix(y, cfg, p, name, "feature_mix", ctx)
    if cfg.channel_mix:
        y = _mix(y, cfg, p, name, "channel_mix", ctx)
    return y


def channel_gate_weights(x: T.Tensor, cfg: MixerBlockConfig, p: Mapping[str, T.Tensor], name: str) -> np.ndarray:
    """Softmax gate of the channel-mixing sublayer for input ``x``, shape [b, hf, n, c].

    Recomputes the block in eval mode up to the channel gate.
    """
    with T.no_grad():
        y = _mix(x, cfg, p, name, "patch_mix", EVAL)
        y = _mix(y, cfg, p, name, "feature_mix", EVAL)
        _, h = _gate_input(y, cfg, p, name, "channel_mix", EVAL)
        return T.softmax_last_dim(linear(h, p, f"{name}.channel_mix.gate")).data
