"""Per-instance standardization and non-overlapping patching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

NORM_EPS = 1e-5


@dataclass
class NormStats:
    mean: np.ndarray  # [b, c, 1]
    std: np.ndarray  # [b, c, 1], population std
    eps: float = NORM_EPS

    @property
    def scale(self) -> np.ndarray:
        return self.std + self.eps

    def select(self, channels) -> "NormStats":
        idx = list(channels)
        return NormStats(self.mean[:, idx], self.std[:, idx], self.eps)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, T.Tensor) else np.asarray(x, dtype=T.get_dtype())


def instance_stats(x, eps: float = NORM_EPS) -> NormStats:
    d = _data(x)
    if d.ndim != 3 or d.shape[-1] < 2:
        raise ValueError(f"normalize needs [b, c, sl] with sl >= 2, got {d.shape}")
    return NormStats(d.mean(axis=-1, keepdims=True), d.std(axis=-1, keepdims=True), eps)


def apply_stats(x, stats: NormStats) -> T.Tensor:
    """(x - mean) / (std + eps) with the statistics treated as constants."""
    x = x if isinstance(x, T.Tensor) else T.Tensor(x)
    return (x - T.Tensor(stats.mean)) * T.Tensor(1.0 / stats.scale)


def normalize(x, eps: float = NORM_EPS) -> tuple[T.Tensor, NormStats]:
    stats = instance_stats(x, eps)
    return apply_stats(x, stats), stats


def denormalize(y_norm, stats: NormStats) -> T.Tensor:
    """y * (std + eps) + mean; ``stats`` must already be restricted to y's channels."""
    y = y_norm if isinstance(y_norm, T.Tensor) else T.Tensor(y_norm)
    if stats.mean.shape[1] < y.shape[1]:
        raise ValueError(f"stats cover {stats.mean.shape[1]} channels, forecast has {y.shape[1]}")
    return y * T.Tensor(stats.scale[:, : y.shape[1]]) + T.Tensor(stats.mean[:, : y.shape[1]])


def patch(x: T.Tensor, pl: int, stride: int | None = None) -> T.Tensor:
    """[b, c, sl] -> [b, c, sl/pl, pl] with non-overlapping windows."""
    stride = pl if stride is None else stride
    if stride != pl:
        raise ValueError("only non-overlapping patches (stride == pl) are supported")
    b, c, sl = x.shape
    if sl % pl:
        raise ValueError(f"sl={sl} is not divisible by pl={pl}")
    return x.reshape(b, c, sl // pl, pl)


def unpatch(xp: T.Tensor) -> T.Tensor:
    b, c, n, pl = xp.shape
    return xp.reshape(b, c, n * pl)
