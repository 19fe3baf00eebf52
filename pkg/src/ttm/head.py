"""TTM head: slim decoder, linear forecast head and the exogenous mixer."""

from __future__ import annotations

import warnings
from typing import Mapping

import numpy as np

from . import tensor as T
from .config import HeadConfig, ModelConfig
from .mixer import EVAL, Context, MixerBlockConfig, init_block, init_linear, linear, tsmixer_block

DECODER = "decoder"
HEAD = "head"
EXOG = "exog"

# decoder size relative to backbone: hard limits and the preferred band
DECODER_LIMITS = (0.05, 0.25)
DECODER_BAND = (0.10, 0.20)


def decoder_block_config(model: ModelConfig, head: HeadConfig, hf_dec: int) -> MixerBlockConfig:
    return MixerBlockConfig(
        num_patches=model.num_patches,
        hidden=hf_dec,
        num_channels=head.num_channels,
        channel_mix=head.channel_mix,
        dropout=model.dropout,
        expansion=model.expansion,
        norm=model.mixer_norm,
        gate=model.gate_placement,
    )


def exog_block_config(model: ModelConfig, head: HeadConfig) -> MixerBlockConfig:
    """The exogenous mixer sees [b, c, window, fl]: patches are lag offsets, features are forecast steps."""
    return MixerBlockConfig(
        num_patches=head.exog_window,
        hidden=model.fl,
        num_channels=head.num_channels,
        channel_mix=True,
        dropout=model.dropout,
        expansion=model.expansion,
        norm=model.mixer_norm,
        gate=model.gate_placement,
    )


def _sublayer_count(d: int, e: int, w: int) -> int:
    # norm (2w) + fc1 (d*e + e) + fc2 (e*d + d) + gate (d*d + d)
    return 2 * w + d * e + e + e * d + d + d * d + d


def mixer_block_size(cfg: MixerBlockConfig) -> int:
    def count(d):
        return _sublayer_count(d, cfg.expansion * d, cfg.norm_width(d))

    n = count(cfg.num_patches) + count(cfg.hidden)
    if cfg.channel_mix:
        n += count(cfg.num_channels)
    return n


def backbone_size(model: ModelConfig) -> int:
    from .backbone import level_block_config

    n = model.pl * model.hf + model.hf
    if model.resolution_prefix:
        n += model.num_resolutions * model.hf
    for level in range(1, model.levels + 1):
        n += model.blocks_per_level * mixer_block_size(level_block_config(model, level))
    return n


def decoder_size(model: ModelConfig, head: HeadConfig, hf_dec: int) -> int:
    proj = model.hf * hf_dec + hf_dec
    return proj + head.decoder_layers * mixer_block_size(decoder_block_config(model, head, hf_dec))


def choose_hf_dec(model: ModelConfig, head: HeadConfig) -> int:
    """hf/2 when the decoder lands in the preferred band, else the in-band width nearest to it."""
    base = max(1, model.hf // 2)
    total = backbone_size(model)

    def frac(h):
        return decoder_size(model, head, h) / total

    lo, hi = DECODER_BAND
    if lo <= frac(base) <= hi:
        return base
    candidates = range(1, 2 * model.hf + 1)
    in_band = [h for h in candidates if lo <= frac(h) <= hi]
    if in_band:
        return min(in_band, key=lambda h: (abs(h - base), h))
    return min(candidates, key=lambda h: (abs(frac(h) - 0.15), h))


def resolve_hf_dec(model: ModelConfig, head: HeadConfig) -> int:
    hf_dec = head.hf_dec if head.hf_dec is not None else choose_hf_dec(model, head)
    ratio = decoder_size(model, head, hf_dec) / backbone_size(model)
    if not DECODER_LIMITS[0] <= ratio <= DECODER_LIMITS[1]:
        raise ValueError(
            f"decoder is {ratio:.1%} of the backbone; must lie in [{DECODER_LIMITS[0]:.0%}, {DECODER_LIMITS[1]:.0%}]"
        )
    if not DECODER_BAND[0] <= ratio <= DECODER_BAND[1]:
        warnings.warn(f"decoder is {ratio:.1%} of the backbone, outside the 10-20% band", stacklevel=2)
    return hf_dec


def init_decoder(rng, model: ModelConfig, head: HeadConfig, hf_dec: int) -> dict[str, np.ndarray]:
    params = init_linear(rng, f"{DECODER}.proj", model.hf, hf_dec)
    bcfg = decoder_block_config(model, head, hf_dec)
    for i in range(head.decoder_layers):
        params.update(init_block(rng, f"{DECODER}.block{i}", bcfg))
    return params


def init_forecast_head(rng, model: ModelConfig, hf_dec: int) -> dict[str, np.ndarray]:
    return init_linear(rng, f"{HEAD}.linear", model.num_patches * hf_dec, model.fl)


def init_exog_mixer(rng, model: ModelConfig, head: HeadConfig) -> dict[str, np.ndarray]:
    params = init_block(rng, f"{EXOG}.block", exog_block_config(model, head))
    params.update(init_linear(rng, f"{EXOG}.linear", head.num_channels * head.exog_window,
                              len(head.target_channels)))
    return params


def decoder_forward(h: T.Tensor, p: Mapping[str, T.Tensor], model: ModelConfig, head: HeadConfig, hf_dec: int,
                    ctx: Context = EVAL) -> T.Tensor:
    """[b, c, n, hf] -> [b, c, n, hf_dec]; no adaptive patching."""
    out = linear(h, p, f"{DECODER}.proj")
    bcfg = decoder_block_config(model, head, hf_dec)
    for i in range(head.decoder_layers):
        out = tsmixer_block(out, bcfg, p, f"{DECODER}.block{i}", ctx)
    return out


def forecast_head(decoded: T.Tensor, p: Mapping[str, T.Tensor], rate: float = 0.0, ctx: Context = EVAL) -> T.Tensor:
    """[b, c, n, hf_dec] -> [b, c, fl] via flatten + linear, dropout before the linear map."""
    b, c, n, d = decoded.shape
    flat = T.dropout(decoded.reshape(b, c, n * d), rate, ctx.training, ctx.rng)
    # column-stable so that a pruned head reproduces the leading steps exactly
    return T.matmul_columnwise(flat, p[f"{HEAD}.linear.weight"]) + p[f"{HEAD}.linear.bias"]


def substitute_exogenous(y_hat: T.Tensor, exog_future: T.Tensor, exog_channels) -> T.Tensor:
    """Replace the forecasts of exogenous channels with their (normalized) true futures."""
    b, c, fl = y_hat.shape
    exog_channels = list(exog_channels)
    if exog_future is None:
        raise ValueError("exogenous mixer needs the true futures of the exogenous channels")
    if exog_future.shape != (b, len(exog_channels), fl):
        raise T.ShapeError(f"exogenous futures must be {(b, len(exog_channels), fl)}, got {exog_future.shape}")
    rows = []
    for ch in range(c):
        if ch in exog_channels:
            j = exog_channels.index(ch)
            rows.append(T.slice_axis(exog_future, 1, j, j + 1))
        else:
            rows.append(T.slice_axis(y_hat, 1, ch, ch + 1))
    return T.concat(rows, axis=1)


def unfold_time(y: T.Tensor, context: int) -> T.Tensor:
    """[b, c, fl] -> [b, c, 2l+1, fl]: zero-pad l each side, then stride-1 windows.

    Entry [.., j, t] is the padded series at position t + j, i.e. offset j - l from step t.
    """
    b, c, fl = y.shape
    padded = T.pad_axis(y, 2, context, context)
    window = 2 * context + 1
    parts = [T.slice_axis(padded, 2, j, j + fl).reshape(b, c, 1, fl) for j in range(window)]
    return T.concat(parts, axis=2) if window > 1 else parts[0]


def exogenous_mixer(y_hat: T.Tensor, exog_future: T.Tensor, p: Mapping[str, T.Tensor], model: ModelConfig,
                    head: HeadConfig, ctx: Context = EVAL) -> T.Tensor:
    """[b, c, fl] forecasts + [b, c_exog, fl] true futures -> [b, c', fl] target forecasts."""
    b, c, fl = y_hat.shape
    ye = substitute_exogenous(y_hat, exog_future, head.exogenous_channels)
    windows = unfold_time(ye, head.exog_context)
    mixed = tsmixer_block(windows, exog_block_config(model, head), p, f"{EXOG}.block", ctx)
    # per time step: gather the c x (2l+1) values at step t and map them to c' targets
    per_step = T.transpose_axes(mixed, (0, 3, 1, 2)).reshape(b, fl, c * head.exog_window)
    out = linear(per_step, p, f"{EXOG}.linear")
    return T.swapaxes(out, 1, 2)
