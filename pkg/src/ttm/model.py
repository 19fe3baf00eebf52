"""End-to-end TTM forecaster: normalize -> patch -> backbone -> head -> denormalize."""

from __future__ import annotations

import dataclasses

import numpy as np

from . import tensor as T
from .backbone import PREFIX as BACKBONE
from .backbone import backbone_forward, drop_prefix, init_backbone
from .config import HeadConfig, ModelConfig
from .head import (
    DECODER,
    EXOG,
    HEAD,
    decoder_forward,
    exogenous_mixer,
    forecast_head,
    init_decoder,
    init_exog_mixer,
    init_forecast_head,
    resolve_hf_dec,
)
from .mixer import EVAL, Context
from .preprocessing import NormStats, apply_stats, denormalize, instance_stats, patch
from .store import ParameterStore

HEAD_PREFIXES = (DECODER + ".", HEAD + ".", EXOG + ".")


def build_store(model: ModelConfig, head: HeadConfig, seed: int = 0) -> ParameterStore:
    """Fresh parameters: truncated normal (std 0.02) weights, zero biases, unit norm scales."""
    head = dataclasses.replace(head)
    head.hf_dec = resolve_hf_dec(model, head)
    rng = np.random.default_rng(seed)
    store = ParameterStore(model, head, meta={"init_seed": seed})
    params = init_backbone(rng, model)
    params.update(init_decoder(rng, model, head, head.hf_dec))
    params.update(init_forecast_head(rng, model, head.hf_dec))
    if head.exog_enabled:
        params.update(init_exog_mixer(rng, model, head))
    for name in sorted(params):
        store.add(name, params[name])
    return store


def adapt_head(store: ParameterStore, head: HeadConfig, seed: int = 0) -> ParameterStore:
    """Reconfigure the head for a target dataset, keeping every parameter whose name and shape still fit.

    The decoder width is inherited from the store. Backbone tensors are copied
    and frozen; newly needed tensors (channel mixing, exogenous mixer) are
    freshly initialized.
    """
    head = dataclasses.replace(head, hf_dec=store.head.hf_dec)
    fresh = build_store(store.model, head, seed=seed)
    for name in fresh:
        if name in store and store[name].shape == fresh[name].shape:
            fresh.add(name, store[name].data.copy(), trainable=True)
    fresh.meta = {**store.meta, **{"init_seed": store.meta.get("init_seed", seed), "head_seed": seed}}
    fresh.set_trainable(BACKBONE + ".", False)
    return fresh


def for_channels(store: ParameterStore, num_channels: int, target_channels=None) -> ParameterStore:
    """Reuse a channel-independent store on data with another channel count.

    Without channel mixing or an exogenous mixer no parameter depends on the
    number of channels, so only the head config changes.
    """
    head = store.head
    if head.num_channels == num_channels and (target_channels is None or
                                              list(target_channels) == list(head.target_channels)):
        return store
    if head.channel_mix or head.exog_enabled:
        raise ValueError(f"store is tied to {head.num_channels} channels (channel mixing or exogenous mixer enabled)")
    out = store.copy()
    out.head = dataclasses.replace(head, num_channels=num_channels, target_channels=None, exogenous_channels=[])
    if target_channels is not None:
        out.head.target_channels = list(target_channels)
    return out


class TTM:
    """Forecaster bound to a parameter store."""

    def __init__(self, store: ParameterStore):
        self.store = store
        self.model = store.model
        self.head = store.head

    @classmethod
    def create(cls, model: ModelConfig, head: HeadConfig | None = None, seed: int = 0) -> "TTM":
        return cls(build_store(model, head or HeadConfig(), seed=seed))

    @property
    def target_channels(self) -> list[int]:
        return list(self.head.target_channels)

    def backbone_output(self, x_norm: T.Tensor, resolution_ids, ctx: Context = EVAL) -> T.Tensor:
        return backbone_forward(patch(x_norm, self.model.pl), resolution_ids, self.store, self.model, ctx)

    def forward_normalized(self, x_norm: T.Tensor, resolution_ids, exog_future_norm: T.Tensor | None = None,
                           ctx: Context = EVAL) -> T.Tensor:
        """Normalized context [b, c, sl] -> normalized target forecasts [b, c', fl]."""
        if x_norm.shape[1] != self.head.num_channels:
            raise T.ShapeError(f"model built for {self.head.num_channels} channels, got {x_norm.shape[1]}")
        h = drop_prefix(self.backbone_output(x_norm, resolution_ids, ctx), self.model)
        dec = decoder_forward(h, self.store, self.model, self.head, self.head.hf_dec, ctx)
        rate = self.head.head_dropout
        y = forecast_head(dec, self.store, rate, ctx)
        if self.head.exog_enabled:
            return exogenous_mixer(y, exog_future_norm, self.store, self.model, self.head, ctx)
        return T.take(y, self.target_channels, axis=1)

    def forward(self, x, resolution_ids, exog_future=None, ctx: Context = EVAL) -> tuple[T.Tensor, NormStats]:
        """Raw context [b, c, sl] -> denormalized target forecasts [b, c', fl].

        ``exog_future`` holds the raw true futures [b, c_exog, fl]; they are
        normalized with the statistics of their own context.
        """
        stats = instance_stats(x)
        x_norm = apply_stats(x, stats)
        ex = None
        if self.head.exog_enabled:
            if exog_future is None:
                raise ValueError("exogenous mixer enabled but no exogenous futures given")
            ex = apply_stats(exog_future, stats.select(self.head.exogenous_channels))
        y_norm = self.forward_normalized(x_norm, resolution_ids, ex, ctx)
        target_stats = stats.select(self.target_channels)
        return denormalize(y_norm, target_stats), stats

    def predict(self, x, resolution_ids, exog_future=None) -> np.ndarray:
        with T.no_grad():
            y, _ = self.forward(x, resolution_ids, exog_future)
        return y.data
