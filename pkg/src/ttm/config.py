"""Architecture and training configuration."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any


@dataclass
class ModelConfig:
    """Backbone hyperparameters.

    ``hf`` must be a multiple of ``2**(levels-1)`` so every level can split the
    hidden vector into ``K_i = 2**(levels-i)`` sub-patches. ``mixer_norm`` picks
    the LayerNorm axis of every mixer sublayer ("feature" or "mixed");
    ``gate_placement`` puts the gate inside the residual branch ("branch") or
    on the residual sum ("post").
    """

    sl: int = 512
    fl: int = 96
    pl: int = 64
    levels: int = 3
    blocks_per_level: int = 2
    hf: int = 192
    expansion: int = 2
    dropout: float = 0.4
    resolution_prefix: bool = True
    num_resolutions: int = 16
    mixer_norm: str = "feature"
    gate_placement: str = "branch"

    def __post_init__(self) -> None:
        if self.mixer_norm not in ("feature", "mixed"):
            raise ValueError(f"mixer_norm must be 'feature' or 'mixed', got {self.mixer_norm!r}")
        if self.gate_placement not in ("branch", "post"):
            raise ValueError(f"gate_placement must be 'branch' or 'post', got {self.gate_placement!r}")
        if min(self.sl, self.fl, self.pl, self.levels, self.blocks_per_level, self.hf) < 1:
            raise ValueError("all sizes must be positive")
        if self.sl % self.pl:
            raise ValueError(f"sl={self.sl} is not divisible by pl={self.pl}")
        k = 2 ** (self.levels - 1)
        if self.hf % k:
            raise ValueError(f"hf={self.hf} must be a multiple of 2**(L-1)={k} for L={self.levels}")

    @property
    def num_patches(self) -> int:
        return self.sl // self.pl

    @property
    def num_backbone_patches(self) -> int:
        return self.num_patches + (1 if self.resolution_prefix else 0)

    def level_factor(self, level: int) -> int:
        """K_i for a 1-based level index."""
        return 2 ** (self.levels - level)

    def fingerprint(self) -> str:
        return fingerprint(dataclasses.asdict(self))


@dataclass
class HeadConfig:
    num_channels: int = 1
    decoder_layers: int = 2
    hf_dec: int | None = None
    channel_mix: bool = False
    head_dropout: float = 0.2
    exog_enabled: bool = False
    exog_context: int = 0
    target_channels: list[int] | None = None
    exogenous_channels: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.target_channels is None:
            self.target_channels = [i for i in range(self.num_channels) if i not in self.exogenous_channels]
        t, e = set(self.target_channels), set(self.exogenous_channels)
        if not t:
            raise ValueError("at least one target channel is required")
        if t & e:
            raise ValueError(f"target and exogenous channels overlap: {sorted(t & e)}")
        if any(i < 0 or i >= self.num_channels for i in t | e):
            raise ValueError("channel index out of range")
        if self.exog_context < 0:
            raise ValueError("exog_context must be >= 0")
        if self.exog_enabled and not self.exogenous_channels:
            raise ValueError("exog_enabled needs at least one exogenous channel")

    @property
    def exog_window(self) -> int:
        """Width of the stride-1 window around each forecast step."""
        return 2 * self.exog_context + 1


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    mode: str = "pretrain"
    few_shot: float = 1.0
    stride: int = 1
    max_windows_per_epoch: int | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("pretrain", "finetune"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0.0 <= self.few_shot <= 1.0:
            raise ValueError("few_shot must lie in [0, 1]; 0 means zero-shot")


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def fingerprint(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def from_dict(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**data)
