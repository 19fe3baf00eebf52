"""Channel-independent multi-level backbone with adaptive patching."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .mixer import EVAL, Context, MixerBlockConfig, init_block, init_linear, trunc_normal, tsmixer_block

PREFIX = "backbone"


def level_block_config(cfg: ModelConfig, level: int) -> MixerBlockConfig:
    k = cfg.level_factor(level)
    return MixerBlockConfig(
        num_patches=cfg.num_backbone_patches * k,
        hidden=cfg.hf // k,
        channel_mix=False,
        dropout=cfg.dropout,
        expansion=cfg.expansion,
        norm=cfg.mixer_norm,
        gate=cfg.gate_placement,
    )


def block_name(level: int, block: int) -> str:
    return f"{PREFIX}.level{level}.block{block}"


def init_backbone(rng: np.random.Generator, cfg: ModelConfig) -> dict[str, np.ndarray]:
    params = init_linear(rng, f"{PREFIX}.embed", cfg.pl, cfg.hf)
    if cfg.resolution_prefix:
        params[f"{PREFIX}.resolution_embedding"] = trunc_normal(rng, (cfg.num_resolutions, cfg.hf))
    for level in range(1, cfg.levels + 1):
        bcfg = level_block_config(cfg, level)
        for m in range(cfg.blocks_per_level):
            params.update(init_block(rng, block_name(level, m), bcfg))
    return params


def embed_patches(xp: T.Tensor, p: Mapping[str, T.Tensor]) -> T.Tensor:
    """[b, c, n, pl] -> [b, c, n, hf]."""
    return T.matmul_last_dim(xp, p[f"{PREFIX}.embed.weight"]) + p[f"{PREFIX}.embed.bias"]


def attach_resolution_prefix(xh: T.Tensor, resolution_ids: Sequence[int], p: Mapping[str, T.Tensor],
                             enabled: bool = True) -> T.Tensor:
    """Prepend the per-resolution embedding row as patch 0 of every channel.

    Ids outside the table fall back to row 0 (unknown resolution).
    """
    if not enabled:
        return xh
    table = p[f"{PREFIX}.resolution_embedding"]
    b, c, n, hf = xh.shape
    ids = np.asarray(resolution_ids, dtype=np.int64).reshape(-1)
    if ids.size == 1 and b > 1:
        ids = np.repeat(ids, b)
    if ids.size != b:
        raise T.ShapeError(f"got {ids.size} resolution ids for batch of {b}")
    ids = np.where((ids >= 0) & (ids < table.shape[0]), ids, 0)
    rows = T.take(table, ids, axis=0).reshape(b, 1, 1, hf)
    prefix = T.broadcast_to(rows, (b, c, 1, hf))
    return T.concat([prefix, xh], axis=2)


def patch_partition(x: T.Tensor, k: int) -> T.Tensor:
    """[b, c, p, hf] -> [b, c, p*k, hf/k]: each hidden vector splits into k contiguous patches."""
    b, c, n, hf = x.shape
    if hf % k:
        raise T.ShapeError(f"hidden size {hf} is not divisible by K={k}")
    return x.reshape(b, c, n * k, hf // k)


def patch_merge(x: T.Tensor, k: int) -> T.Tensor:
    b, c, nk, w = x.shape
    if nk % k:
        raise T.ShapeError(f"patch count {nk} is not divisible by K={k}")
    return x.reshape(b, c, nk // k, w * k)


def backbone_forward(xp: T.Tensor, resolution_ids, p: Mapping[str, T.Tensor], cfg: ModelConfig,
                     ctx: Context = EVAL) -> T.Tensor:
    """[b, c, n, pl] -> [b, c, n', hf] with n' = n + 1 when the resolution prefix is on."""
    if xp.ndim != 4 or xp.shape[2:] != (cfg.num_patches, cfg.pl):
        raise T.ShapeError(f"backbone expects [b, c, {cfg.num_patches}, {cfg.pl}], got {xp.shape}")
    h = embed_patches(xp, p)
    h = attach_resolution_prefix(h, resolution_ids, p, cfg.resolution_prefix)
    for level in range(1, cfg.levels + 1):
        k = cfg.level_factor(level)
        bcfg = level_block_config(cfg, level)
        h = patch_partition(h, k)
        for m in range(cfg.blocks_per_level):
            h = tsmixer_block(h, bcfg, p, block_name(level, m), ctx)
        h = patch_merge(h, k)
    return h


def drop_prefix(h: T.Tensor, cfg: ModelConfig) -> T.Tensor:
    if not cfg.resolution_prefix:
        return h
    return T.slice_axis(h, 2, 1, h.shape[2])
