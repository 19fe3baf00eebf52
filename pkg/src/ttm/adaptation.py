"""Forecast-length adaptation, evaluation protocols and model-insight exports."""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import drop_prefix
from .data import TimeSeriesDataset, gather_windows, window_offsets
from .head import DECODER, HEAD, decoder_block_config
from .mixer import channel_gate_weights, linear, tsmixer_block
from .model import TTM
from .preprocessing import apply_stats, instance_stats
from .store import ParameterStore


# -- forecast-length adaptation -------------------------------------------
class Forecaster:
    """Wraps a model and counts how often it is invoked."""

    def __init__(self, store: ParameterStore, fl: int):
        self.model = TTM(store)
        self.fl = fl
        self.invocations = 0
        self.contexts: list[np.ndarray] = []

    @property
    def store(self) -> ParameterStore:
        return self.model.store

    def _call(self, x, resolution_ids, exog_future=None) -> np.ndarray:
        self.invocations += 1
        self.contexts.append(np.array(x, copy=True))
        return self.model.predict(x, resolution_ids, exog_future)

    def predict(self, x, resolution_ids, exog_future=None) -> np.ndarray:
        return self._call(x, resolution_ids, exog_future)


def prune_store(store: ParameterStore, fl: int) -> ParameterStore:
    """Copy of ``store`` whose forecast head emits only the first ``fl`` steps."""
    if fl > store.model.fl:
        raise ValueError(f"cannot prune a {store.model.fl}-step model to {fl} steps")
    if store.head.exog_enabled and fl != store.model.fl:
        raise ValueError("pruning is not defined for models with an exogenous mixer (it mixes across the horizon)")
    out = store.copy()
    out.model = dataclasses.replace(store.model, fl=fl)
    w = store[f"{HEAD}.linear.weight"]
    bias = store[f"{HEAD}.linear.bias"]
    out.add(f"{HEAD}.linear.weight", w.data[:, :fl].copy(), trainable=w.requires_grad)
    out.add(f"{HEAD}.linear.bias", bias.data[:fl].copy(), trainable=bias.requires_grad)
    out.optimizer = {}
    out.meta = {**store.meta, "pruned_from": store.model.fl}
    return out


def fla_prune(store: ParameterStore, fl: int) -> Forecaster:
    return Forecaster(prune_store(store, fl), fl)


class RecursiveForecaster(Forecaster):
    """Rolls a model forward ``ceil(fl / fl')`` times, feeding its own forecasts back.

    Each step re-normalizes the extended context with fresh statistics. All
    non-exogenous channels must be forecast targets; exogenous channels are
    extended with their true futures, which must cover the full horizon.
    """

    def __init__(self, store: ParameterStore, fl: int):
        super().__init__(store, fl)
        head = store.head
        covered = set(head.target_channels) | set(head.exogenous_channels if head.exog_enabled else [])
        if covered != set(range(head.num_channels)):
            raise ValueError("recursive forecasting needs every channel to be a target or a known exogenous channel")

    def predict(self, x, resolution_ids, exog_future=None) -> np.ndarray:
        step = self.model.model.fl
        head = self.model.head
        x = np.array(x, dtype=T.get_dtype(), copy=True)
        sl = x.shape[-1]
        outputs = []
        for i in range(math.ceil(self.fl / step)):
            ex = None
            if head.exog_enabled:
                ex = np.asarray(exog_future)[:, :, i * step:(i + 1) * step]
                if ex.shape[-1] < step:
                    raise ValueError(f"exogenous futures must cover {math.ceil(self.fl / step) * step} steps")
            y = self._call(x, resolution_ids, ex)
            outputs.append(y)
            nxt = np.empty((x.shape[0], x.shape[1], step), dtype=x.dtype)
            nxt[:, head.target_channels] = y
            if head.exog_enabled:
                nxt[:, head.exogenous_channels] = ex
            x = np.concatenate([x, nxt], axis=-1)[:, :, -sl:]
        return np.concatenate(outputs, axis=-1)[:, :, : self.fl]


def fla_recursive(store: ParameterStore, fl: int) -> RecursiveForecaster:
    if fl < store.model.fl:
        raise ValueError(f"recursive adaptation needs fl >= {store.model.fl}, got {fl}")
    return RecursiveForecaster(store, fl)


def forecaster_for(store: ParameterStore, fl: int | None = None, method: str = "auto") -> Forecaster:
    """direct (fl must equal the trained length), prune, recursive, or auto by comparison."""
    fl = store.model.fl if fl is None else fl
    if method == "auto":
        method = "direct" if fl == store.model.fl else ("prune" if fl < store.model.fl else "recursive")
    if method == "direct":
        if fl != store.model.fl:
            raise ValueError(f"direct forecasting needs fl == {store.model.fl}, got {fl}")
        return Forecaster(store, fl)
    if method == "prune":
        return fla_prune(store, fl)
    if method == "recursive":
        return fla_recursive(store, fl)
    raise ValueError(f"unknown adaptation {method!r}")


# -- evaluation -----------------------------------------------------------
@dataclass
class EvalReport:
    dataset: str
    fl: int
    protocol: str
    mse: float
    n_windows: int
    per_channel_mse: list[float]
    f_imp: dict[str, float] = field(default_factory=dict)
    offsets: np.ndarray | None = field(default=None, repr=False)
    forecasts: np.ndarray | None = field(default=None, repr=False)
    truths: np.ndarray | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {
            "dataset": self.dataset,
            "fl": self.fl,
            "protocol": self.protocol,
            "mse": self.mse,
            "n_windows": self.n_windows,
            "per_channel_mse": self.per_channel_mse,
            "f_imp": self.f_imp,
        }


def evaluate(store: ParameterStore, ds: TimeSeriesDataset, fl: int | None = None, protocol: str = "sliding",
             method: str = "auto", context_overlap: bool = True, workers: int = 1, chunk: int = 256) -> EvalReport:
    """MSE over target channels in the original scale on the test split.

    ``sliding`` uses every stride-1 test window; ``last_window`` only the final one.
    """
    if protocol not in ("sliding", "last_window"):
        raise ValueError(f"unknown protocol {protocol!r}")
    fc = forecaster_for(store, fl, method)
    sl = store.model.sl
    head = store.head
    offsets = window_offsets(ds, "test", sl, fc.fl, 1, context_overlap)
    if len(offsets) == 0:
        raise ValueError(f"test split of {ds.name} holds no window of length {sl + fc.fl}")
    if protocol == "last_window":
        offsets = offsets[-1:]
    batches = [offsets[i:i + chunk] for i in range(0, len(offsets), chunk)]

    def run(offs):
        w = gather_windows(ds, offs, sl, fc.fl)
        ex = w.Y[:, head.exogenous_channels] if head.exog_enabled else None
        return fc.predict(w.X, w.resolution_ids, ex), w.Y[:, head.target_channels]

    if workers > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, batches))
    else:
        results = [run(b) for b in batches]
    forecasts = np.concatenate([r[0] for r in results])
    truths = np.concatenate([r[1] for r in results])
    err = (forecasts - truths) ** 2
    return EvalReport(
        dataset=ds.name,
        fl=fc.fl,
        protocol=protocol,
        mse=float(err.mean()),
        n_windows=len(offsets),
        per_channel_mse=[float(v) for v in err.mean(axis=(0, 2))],
        offsets=offsets,
        forecasts=forecasts,
        truths=truths,
    )


def f_imp(ours: dict[str, float], baseline: dict[str, float]) -> float:
    """Mean over shared datasets of (baseline - ours) / baseline, in percent."""
    shared = sorted(set(ours) & set(baseline))
    if not shared:
        raise ValueError("no dataset in common with the baseline")
    return 100.0 * float(np.mean([(baseline[d] - ours[d]) / baseline[d] for d in shared]))


# -- embeddings and PCA ---------------------------------------------------
def power_iteration_pca(data: np.ndarray, k: int = 2, tol: float = 1e-8, max_iter: int = 100_000,
                        seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Top-``k`` principal axes by power iteration with deflation on the covariance.

    Returns (components [k, d], variances [k]).
    """
    x = np.asarray(data, dtype=np.float64)
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / max(len(x) - 1, 1)
    rng = np.random.default_rng(seed)
    d = cov.shape[0]
    comps, variances = [], []
    total = np.trace(cov)
    for _ in range(min(k, d)):
        v = rng.normal(size=d)
        for prev in comps:
            v -= (v @ prev) * prev
        v /= np.linalg.norm(v)
        for _ in range(max_iter):
            w = cov @ v
            norm = np.linalg.norm(w)
            if norm <= tol * max(total, 1e-300):
                break
            w /= norm
            if w @ v < 0:
                w = -w
            done = np.linalg.norm(w - v) < tol
            v = w
            if done:
                break
        lam = float(v @ cov @ v)
        comps.append(v)
        variances.append(max(lam, 0.0))
        cov = cov - lam * np.outer(v, v)
    return np.asarray(comps), np.asarray(variances)


@dataclass
class EmbeddingExport:
    embeddings: np.ndarray  # [num_windows, c * n * hf]
    projection: np.ndarray  # [num_windows, 2]
    components: np.ndarray
    variances: np.ndarray
    offsets: np.ndarray


def export_embeddings(store: ParameterStore, ds: TimeSeriesDataset, stride: int = 1,
                      resolution_id: int | None = None) -> EmbeddingExport:
    """Flattened backbone outputs (prefix dropped) of every rolling context window, plus a 2-D PCA."""
    model = TTM(store)
    sl = store.model.sl
    if ds.length < sl:
        raise ValueError(f"series of length {ds.length} is shorter than sl={sl}")
    offsets = np.arange(0, ds.length - sl + 1, stride)
    idx = offsets[:, None] + np.arange(sl)[None, :]
    x = ds.values[:, idx].transpose(1, 0, 2)
    rid = ds.resolution.id if resolution_id is None else resolution_id
    with T.no_grad():
        x_norm = apply_stats(x, instance_stats(x))
        h = model.backbone_output(x_norm, np.full(len(offsets), rid))
    if store.model.resolution_prefix:
        h = h.data[:, :, 1:]
    else:
        h = h.data
    emb = h.reshape(len(offsets), -1)
    comps, var = power_iteration_pca(emb, k=2)
    proj = (emb - emb.mean(axis=0)) @ comps.T
    return EmbeddingExport(emb, proj, comps, var, offsets)


# -- channel attention ----------------------------------------------------
@dataclass
class ChannelAttention:
    per_gate: np.ndarray  # [num_gates, c]
    mean: np.ndarray  # [c]
    channel_names: list[str]


def channel_attention_map(store: ParameterStore, ds: TimeSeriesDataset, split: str = "test",
                          max_windows: int = 512) -> ChannelAttention:
    """Mean softmax weight per channel of every decoder channel-mixing gate.

    Averages over samples, patches and features; each gate's vector sums to 1.
    """
    head = store.head
    if not head.channel_mix:
        raise ValueError("channel attention needs a decoder with channel mixing enabled")
    model = TTM(store)
    sl = store.model.sl
    offsets = window_offsets(ds, split, sl, 1, 1, context_overlap=True)
    if len(offsets) == 0:
        offsets = np.arange(0, max(ds.length - sl + 1, 0))
    if len(offsets) == 0:
        raise ValueError(f"series of length {ds.length} is shorter than sl={sl}")
    offsets = offsets[-max_windows:]
    idx = offsets[:, None] + np.arange(sl)[None, :]
    x = ds.values[:, idx].transpose(1, 0, 2)
    gates = []
    with T.no_grad():
        x_norm = apply_stats(x, instance_stats(x))
        h = drop_prefix(model.backbone_output(x_norm, np.full(len(offsets), ds.resolution.id)), store.model)
        out = linear(h, store, f"{DECODER}.proj")
        bcfg = decoder_block_config(store.model, head, head.hf_dec)
        for i in range(head.decoder_layers):
            w = channel_gate_weights(out, bcfg, store, f"{DECODER}.block{i}")
            gates.append(w.mean(axis=(0, 1, 2)))
            out = tsmixer_block(out, bcfg, store, f"{DECODER}.block{i}")
    per_gate = np.asarray(gates)
    return ChannelAttention(per_gate, per_gate.mean(axis=0), list(ds.channel_names))
