"""Loss, Adam, channel-independent pre-training and head-only fine-tuning."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import HeadConfig, ModelConfig, TrainConfig
from .data import TimeSeriesDataset, WindowBatch, default_registry, few_shot_offsets, gather_windows, to_univariate, \
    window_offsets
from .mixer import Context
from .model import TTM, adapt_head, build_store
from .store import FingerprintError, ParameterStore

log = logging.getLogger(__name__)


def mse_loss(y_hat: T.Tensor, y) -> T.Tensor:
    """Mean of squared errors over batch, channels and horizon."""
    y = y if isinstance(y, T.Tensor) else T.Tensor(y)
    if y_hat.shape != y.shape:
        raise T.ShapeError(f"mse_loss: shapes {y_hat.shape} and {y.shape} differ")
    d = y_hat - y
    return (d * d).mean()


class Adam:
    """Adam with bias correction. Frozen tensors are skipped and get no state."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def step(self, store: ParameterStore) -> None:
        store.optimizer_step += 1
        t = store.optimizer_step
        b1, b2 = self.beta1, self.beta2
        for name in store.trainable_names():
            p = store[name]
            if p.grad is None:
                continue
            m = store.optimizer.get(f"adam.m/{name}")
            v = store.optimizer.get(f"adam.v/{name}")
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            g = p.grad
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            store.optimizer[f"adam.m/{name}"] = m
            store.optimizer[f"adam.v/{name}"] = v


def adam_step(store: ParameterStore, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    Adam(lr, beta1, beta2, eps).step(store)


# -- window pools ---------------------------------------------------------
@dataclass
class WindowPool:
    X: np.ndarray
    Y: np.ndarray
    resolution_ids: np.ndarray
    offsets: np.ndarray
    sources: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.offsets)

    @classmethod
    def from_batches(cls, batches: Sequence[WindowBatch], c: int, sl: int, fl: int) -> "WindowPool":
        batches = [b for b in batches if len(b)]
        if not batches:
            return cls(np.zeros((0, c, sl)), np.zeros((0, c, fl)), np.zeros(0, np.int64), np.zeros(0, np.int64))
        return cls(
            np.concatenate([b.X for b in batches]),
            np.concatenate([b.Y for b in batches]),
            np.concatenate([b.resolution_ids for b in batches]),
            np.concatenate([b.offsets for b in batches]),
            [s for b in batches for s in b.source],
        )


def _split_pool(datasets: Sequence[TimeSeriesDataset], split: str, sl: int, fl: int, stride: int,
                fraction: float = 1.0, context_overlap: bool = False) -> WindowPool:
    batches = []
    for ds in datasets:
        offs = window_offsets(ds, split, sl, fl, stride, context_overlap)
        if fraction < 1.0:
            offs = few_shot_offsets(offs, fraction)
        batches.append(gather_windows(ds, offs, sl, fl))
    c = datasets[0].num_channels if datasets else 1
    return WindowPool.from_batches(batches, c, sl, fl)


# -- training loop --------------------------------------------------------
LogFn = Callable[[dict], None]


def jsonl_logger(path) -> LogFn:
    fh = open(path, "a", encoding="utf-8")

    def write(record: dict) -> None:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()

    return write


def _batch_loss(model: TTM, pool: WindowPool, idx: np.ndarray, ctx: Context) -> T.Tensor:
    x = pool.X[idx]
    y = pool.Y[idx][:, model.target_channels]
    ex = pool.Y[idx][:, model.head.exogenous_channels] if model.head.exog_enabled else None
    y_hat, _ = model.forward(x, pool.resolution_ids[idx], ex, ctx)
    return mse_loss(y_hat, y)


def pool_mse(model: TTM, pool: WindowPool, chunk: int = 256) -> float:
    """Eval-mode MSE over every window of a pool (NaN when empty)."""
    if len(pool) == 0:
        return float("nan")
    total = 0.0
    with T.no_grad():
        for i in range(0, len(pool), chunk):
            idx = np.arange(i, min(i + chunk, len(pool)))
            total += _batch_loss(model, pool, idx, Context()).item() * len(idx)
    return total / len(pool)


@dataclass
class TrainResult:
    store: ParameterStore
    history: list[dict]
    best_epoch: int
    window_offsets: np.ndarray


def fit(model: TTM, train: WindowPool, val: WindowPool, cfg: TrainConfig, log_fn: LogFn | None = None) -> TrainResult:
    """Minibatch Adam on ``train``; keeps the parameters with the best validation MSE.

    Without validation windows the running training loss picks the best epoch.
    """
    store = model.store
    if len(train) == 0:
        raise ValueError("no training windows: series too short for sl + fl")
    rng = np.random.default_rng(cfg.seed)
    ctx = Context(training=True, rng=T.DropoutRNG(cfg.seed))
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    history: list[dict] = []
    best = (np.inf, -1, {n: store[n].data.copy() for n in store})
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        if cfg.max_windows_per_epoch:
            order = order[: cfg.max_windows_per_epoch]
        running, seen = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            store.zero_grad()
            loss = _batch_loss(model, train, idx, ctx)
            loss.backward()
            opt.step(store)
            running += loss.item() * len(idx)
            seen += len(idx)
        train_mse = running / seen
        rec = {"epoch": epoch, "split": "train", "mse": train_mse, "wall_seconds": time.perf_counter() - start}
        history.append(rec)
        if log_fn:
            log_fn(rec)
        score = train_mse
        if len(val):
            score = pool_mse(model, val)
            rec = {"epoch": epoch, "split": "val", "mse": score, "wall_seconds": time.perf_counter() - start}
            history.append(rec)
            if log_fn:
                log_fn(rec)
        log.debug("epoch %d train %.6g val %.6g", epoch, train_mse, score)
        if score < best[0]:
            best = (score, epoch, {n: store[n].data.copy() for n in store})
    for name, arr in best[2].items():
        store[name].data[...] = arr
    store.zero_grad()
    return TrainResult(store, history, best[1], train.offsets)


def pretrain(datasets: Sequence[TimeSeriesDataset], model_cfg: ModelConfig, train_cfg: TrainConfig,
             head_cfg: HeadConfig | None = None, log_fn: LogFn | None = None) -> TrainResult:
    """Channel-independent pre-training on the union of all univariate windows.

    Decoder channel mixing and the exogenous mixer are always off here.
    """
    head_cfg = dataclasses.replace(head_cfg or HeadConfig(), num_channels=1, channel_mix=False, exog_enabled=False,
                                   target_channels=[0], exogenous_channels=[])
    uni = [u for ds in datasets for u in to_univariate(ds)]
    train = _split_pool(uni, "train", model_cfg.sl, model_cfg.fl, train_cfg.stride)
    val = _split_pool(uni, "val", model_cfg.sl, model_cfg.fl, train_cfg.stride)
    if len(train) == 0:
        raise ValueError("empty window pool: no dataset has a train split of length >= sl + fl")
    store = build_store(model_cfg, head_cfg, seed=train_cfg.seed)
    store.meta.update(
        {"mode": "pretrain", "train": dataclasses.asdict(train_cfg), "registry": default_registry().to_list(),
         "datasets": sorted({ds.name for ds in datasets})}
    )
    return fit(TTM(store), train, val, train_cfg, log_fn)


def finetune(store: ParameterStore, ds: TimeSeriesDataset, head_cfg: HeadConfig, train_cfg: TrainConfig,
             expected_fingerprint: str | None = None, log_fn: LogFn | None = None) -> TrainResult:
    """Train decoder, forecast head and exogenous mixer with the backbone frozen.

    ``train_cfg.few_shot == 0`` is zero-shot: the input store is returned untouched.
    Otherwise the most recent ``few_shot`` fraction of training windows is used.
    """
    if expected_fingerprint is not None and store.fingerprint != expected_fingerprint:
        raise FingerprintError(f"store fingerprint {store.fingerprint[:12]} does not match {expected_fingerprint[:12]}")
    if train_cfg.few_shot == 0.0:
        return TrainResult(store, [], -1, np.zeros(0, np.int64))
    if head_cfg.num_channels != ds.num_channels:
        raise ValueError(f"head built for {head_cfg.num_channels} channels, dataset has {ds.num_channels}")
    new = adapt_head(store, head_cfg, seed=train_cfg.seed)
    new.meta.update({"mode": "finetune", "finetune": dataclasses.asdict(train_cfg), "dataset": ds.name})
    new.optimizer, new.optimizer_step = {}, 0
    sl, fl = new.model.sl, new.model.fl
    train = _split_pool([ds], "train", sl, fl, train_cfg.stride, fraction=train_cfg.few_shot)
    val = _split_pool([ds], "val", sl, fl, train_cfg.stride, context_overlap=True)
    return fit(TTM(new), train, val, train_cfg, log_fn)
