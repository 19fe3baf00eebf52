"""Time series ingestion, resolution resampling, chronological splits and rolling windows."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

ROLES = ("target", "exogenous", "conditional")
SPLITS = ("train", "val", "test")


class IngestionError(ValueError):
    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(message if row is None else f"row {row}: {message}")


# -- resolutions ----------------------------------------------------------
@dataclass(frozen=True)
class Resolution:
    id: int
    label: str
    seconds: float


class ResolutionRegistry:
    """Bijective id <-> label map read from the shipped registry file."""

    def __init__(self, entries: Sequence[Resolution]):
        self.entries = list(entries)
        self._by_id = {r.id: r for r in entries}
        self._by_label = {r.label: r for r in entries}
        self._by_seconds = {r.seconds: r for r in entries if r.seconds > 0}
        if len(self._by_id) != len(entries) or len(self._by_label) != len(entries):
            raise ValueError("resolution registry ids and labels must be unique")
        if 0 not in self._by_id:
            raise ValueError("resolution id 0 must be reserved for unknown resolutions")

    @classmethod
    def from_text(cls, text: str) -> "ResolutionRegistry":
        entries = []
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            rid, label, secs = line.split()
            entries.append(Resolution(int(rid), label, float(secs)))
        return cls(entries)

    def __len__(self) -> int:
        return len(self.entries)

    def by_id(self, rid: int) -> Resolution:
        return self._by_id.get(rid, self._by_id[0])

    def by_label(self, label: str) -> Resolution:
        if label in self._by_label:
            return self._by_label[label]
        return Resolution(0, label, 0.0)

    def by_seconds(self, seconds: float) -> Resolution:
        if seconds in self._by_seconds:
            return self._by_seconds[seconds]
        return Resolution(0, f"{seconds:g}s", float(seconds))

    def to_list(self) -> list[list]:
        return [[r.id, r.label, r.seconds] for r in self.entries]


@lru_cache(maxsize=1)
def default_registry() -> ResolutionRegistry:
    text = resources.files("ttm").joinpath("resources/resolutions.txt").read_text()
    return ResolutionRegistry.from_text(text)


# -- datasets -------------------------------------------------------------
@dataclass
class TimeSeriesDataset:
    name: str
    resolution: Resolution
    values: np.ndarray  # [c, T]
    channel_roles: list[str]
    channel_names: list[str] = field(default_factory=list)
    split_bounds: dict[str, tuple[int, int]] | None = None
    timestamps: np.ndarray | None = None  # epoch seconds, length T

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"values must be [c, T], got {self.values.shape}")
        if not self.channel_names:
            self.channel_names = [f"ch{i}" for i in range(self.num_channels)]
        if len(self.channel_roles) != self.num_channels or len(self.channel_names) != self.num_channels:
            raise ValueError("one role and one name per channel required")
        if any(r not in ROLES for r in self.channel_roles):
            raise ValueError(f"channel roles must be in {ROLES}")
        if "target" not in self.channel_roles:
            raise ValueError("at least one target channel is required")
        if self.split_bounds is not None:
            _check_bounds(self.split_bounds, self.length)

    @property
    def num_channels(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    def channels(self, role: str) -> list[int]:
        return [i for i, r in enumerate(self.channel_roles) if r == role]

    @property
    def target_channels(self) -> list[int]:
        return self.channels("target")

    @property
    def exogenous_channels(self) -> list[int]:
        return self.channels("exogenous")

    def bounds(self, split: str) -> tuple[int, int]:
        if self.split_bounds is None:
            return (0, self.length) if split == "train" else (self.length, self.length)
        return self.split_bounds[split]

    def replace(self, **changes) -> "TimeSeriesDataset":
        return dataclasses.replace(self, **changes)


def _check_bounds(bounds: dict[str, tuple[int, int]], length: int) -> None:
    prev = 0
    for split in SPLITS:
        lo, hi = bounds[split]
        if lo < prev or hi < lo or hi > length:
            raise ValueError(f"split bounds must be ordered and disjoint within [0, {length}): {bounds}")
        prev = hi
    if bounds["train"][1] <= bounds["train"][0]:
        raise ValueError("train split is empty")


# -- CSV ingestion --------------------------------------------------------
@dataclass
class CsvSchema:
    channel_roles: dict[str, str] = field(default_factory=dict)
    resolution: str | None = None
    tolerance: float = 0.0
    name: str | None = None
    default_role: str = "target"


def parse_timestamp(text: str) -> float:
    text = text.strip()
    try:
        return float(int(text))
    except ValueError:
        pass
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def load_csv(path, schema: CsvSchema | None = None, registry: ResolutionRegistry | None = None) -> TimeSeriesDataset:
    """Read a header + rows CSV whose first column is a timestamp.

    Row numbers in errors count data rows from 1 (the header is row 0).
    """
    schema = schema or CsvSchema()
    registry = registry or default_registry()
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError("empty file") from None
        if len(header) < 2:
            raise IngestionError("need a timestamp column and at least one channel", row=0)
        names = [h.strip() for h in header[1:]]
        times, rows = [], []
        for i, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(f"expected {len(header)} cells, got {len(row)}", row=i)
            try:
                times.append(parse_timestamp(row[0]))
            except ValueError:
                raise IngestionError(f"unparseable timestamp {row[0]!r}", row=i) from None
            try:
                vals = [float(v) for v in row[1:]]
            except ValueError:
                raise IngestionError("non-numeric or empty cell", row=i) from None
            if any(math.isnan(v) or math.isinf(v) for v in vals):
                raise IngestionError("missing value (NaN/inf) - imputation is not supported", row=i)
            rows.append(vals)
    if not rows:
        raise IngestionError("no data rows")
    ts = np.asarray(times)
    step = None
    if len(ts) > 1:
        diffs = np.diff(ts)
        step = diffs[0]
        for i, d in enumerate(diffs, start=2):
            if d <= 0:
                raise IngestionError("timestamps must be strictly increasing", row=i)
            if abs(d - step) > schema.tolerance:
                raise IngestionError(f"spacing {d:g}s differs from {step:g}s beyond tolerance", row=i)
    if schema.resolution is not None:
        resolution = registry.by_label(schema.resolution)
    elif step is not None:
        resolution = registry.by_seconds(float(step))
    else:
        raise IngestionError("cannot infer resolution from a single row; declare it in the schema")
    unknown = set(schema.channel_roles) - set(names)
    if unknown:
        raise IngestionError(f"schema names unknown channels {sorted(unknown)}")
    roles = [schema.channel_roles.get(n, schema.default_role) for n in names]
    return TimeSeriesDataset(
        name=schema.name or path.stem,
        resolution=resolution,
        values=np.asarray(rows).T,
        channel_roles=roles,
        channel_names=names,
        timestamps=ts,
    )


def write_csv(ds: TimeSeriesDataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ts = ds.timestamps if ds.timestamps is not None else np.arange(ds.length) * max(ds.resolution.seconds, 1)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", *ds.channel_names])
        for t in range(ds.length):
            w.writerow([int(ts[t]), *(repr(float(v)) for v in ds.values[:, t])])


@dataclass
class ManifestEntry:
    dataset: TimeSeriesDataset
    splits: tuple[float, float, float] | None
    drs_average: list[int]
    drs_decimate: list[int]

    def split(self, default: Sequence[float] | None = None) -> TimeSeriesDataset:
        """The dataset with its split applied (explicit bounds win over fractions)."""
        if self.dataset.split_bounds is not None:
            return self.dataset
        fractions = self.splits or default
        if fractions is None:
            raise ValueError(f"dataset {self.dataset.name} declares no split")
        return split_temporal(self.dataset, fractions)


def load_manifest(path) -> list[ManifestEntry]:
    """JSON: {"datasets": [{"path", "name"?, "resolution"?, "channel_roles"?, "splits"? | "bounds"?, "drs"?}]}."""
    path = Path(path)
    doc = json.loads(path.read_text())
    out = []
    for item in doc["datasets"]:
        schema = CsvSchema(
            channel_roles=item.get("channel_roles", {}),
            resolution=item.get("resolution"),
            tolerance=float(item.get("tolerance", 0.0)),
            name=item.get("name"),
        )
        ds = load_csv(path.parent / item["path"], schema)
        if "bounds" in item:
            ds = split_temporal(ds, bounds={k: tuple(v) for k, v in item["bounds"].items()})
        splits = tuple(item["splits"]) if "splits" in item else None
        drs = item.get("drs", {})
        out.append(ManifestEntry(ds, splits, list(drs.get("average", [])), list(drs.get("decimate", []))))
    return out


# -- diverse resolution sampling ------------------------------------------
def _resampled_resolution(ds: TimeSeriesDataset, k: int, registry: ResolutionRegistry | None) -> Resolution:
    registry = registry or default_registry()
    if ds.resolution.seconds <= 0:
        return Resolution(0, f"{ds.resolution.label}x{k}", 0.0)
    return registry.by_seconds(ds.resolution.seconds * k)


def drs_average(ds: TimeSeriesDataset, k: int, registry: ResolutionRegistry | None = None) -> TimeSeriesDataset:
    """Mean of each non-overlapping run of k samples; the trailing remainder is dropped."""
    if k < 1:
        raise ValueError(f"k must be a positive integer, got {k}")
    n = ds.length // k
    if n == 0:
        raise ValueError(f"series of length {ds.length} is shorter than k={k}")
    vals = ds.values[:, : n * k].reshape(ds.num_channels, n, k).mean(axis=2)
    ts = ds.timestamps[: n * k : k].copy() if ds.timestamps is not None else None
    return ds.replace(name=f"{ds.name}_avg{k}", values=vals, timestamps=ts, split_bounds=None,
                      resolution=_resampled_resolution(ds, k, registry) if k > 1 else ds.resolution)


def drs_decimate(ds: TimeSeriesDataset, k: int, registry: ResolutionRegistry | None = None) -> TimeSeriesDataset:
    """Keep samples 0, k, 2k, ..."""
    if k < 1:
        raise ValueError(f"k must be a positive integer, got {k}")
    if ds.length < k:
        raise ValueError(f"series of length {ds.length} is shorter than k={k}")
    vals = ds.values[:, ::k].copy()
    ts = ds.timestamps[::k].copy() if ds.timestamps is not None else None
    return ds.replace(name=f"{ds.name}_dec{k}", values=vals, timestamps=ts, split_bounds=None,
                      resolution=_resampled_resolution(ds, k, registry) if k > 1 else ds.resolution)


# -- splits and windows ---------------------------------------------------
def split_temporal(ds: TimeSeriesDataset, fractions: Sequence[float] | None = None,
                   bounds: dict[str, tuple[int, int]] | None = None) -> TimeSeriesDataset:
    if bounds is None:
        if fractions is None or len(fractions) != 3:
            raise ValueError("give three split fractions or explicit bounds")
        if any(f < 0 for f in fractions) or sum(fractions) > 1 + 1e-12:
            raise ValueError(f"split fractions must be nonnegative and sum to at most 1: {fractions}")
        n_train = int(round(fractions[0] * ds.length))
        n_val = int(round(fractions[1] * ds.length))
        n_test = int(round(fractions[2] * ds.length))
        n_test = min(n_test, ds.length - n_train - n_val)
        bounds = {
            "train": (0, n_train),
            "val": (n_train, n_train + n_val),
            "test": (n_train + n_val, n_train + n_val + n_test),
        }
    bounds = {k: (int(v[0]), int(v[1])) for k, v in bounds.items()}
    _check_bounds(bounds, ds.length)
    return ds.replace(split_bounds=bounds)


@dataclass
class WindowBatch:
    X: np.ndarray  # [b, c, sl]
    Y: np.ndarray  # [b, c, fl]
    resolution_ids: np.ndarray  # [b]
    offsets: np.ndarray  # [b], index of the first context step
    source: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.offsets)


def window_offsets(ds: TimeSeriesDataset, split: str, sl: int, fl: int, stride: int = 1,
                   context_overlap: bool = False) -> np.ndarray:
    """Start offsets of every (context, future) window inside a split, in chronological order.

    With ``context_overlap`` the context may reach back before the split start;
    the future always lies inside the split.
    """
    if sl < 1 or fl < 1 or stride < 1:
        raise ValueError("sl, fl and stride must be >= 1")
    lo, hi = ds.bounds(split)
    if context_overlap:
        lo = max(0, lo - sl)
    count = (hi - lo - sl - fl) // stride + 1
    if hi - lo - sl - fl < 0:
        count = 0
    return lo + stride * np.arange(count, dtype=np.int64)


def gather_windows(ds: TimeSeriesDataset, offsets: np.ndarray, sl: int, fl: int) -> WindowBatch:
    offsets = np.asarray(offsets, dtype=np.int64)
    idx = offsets[:, None] + np.arange(sl + fl)[None, :]
    block = ds.values[:, idx].transpose(1, 0, 2) if len(offsets) else np.zeros((0, ds.num_channels, sl + fl))
    return WindowBatch(
        X=np.ascontiguousarray(block[:, :, :sl]),
        Y=np.ascontiguousarray(block[:, :, sl:]),
        resolution_ids=np.full(len(offsets), ds.resolution.id, dtype=np.int64),
        offsets=offsets,
        source=[ds.name] * len(offsets),
    )


def make_windows(ds: TimeSeriesDataset, split: str, sl: int, fl: int, stride: int = 1, batch_size: int | None = None,
                 context_overlap: bool = False) -> Iterator[WindowBatch]:
    """Chronological stream of window batches (one batch with everything when batch_size is None)."""
    offsets = window_offsets(ds, split, sl, fl, stride, context_overlap)
    step = batch_size or max(len(offsets), 1)
    for i in range(0, len(offsets), step):
        yield gather_windows(ds, offsets[i:i + step], sl, fl)


def few_shot_offsets(offsets: np.ndarray, fraction: float) -> np.ndarray:
    """The most recent ``fraction`` of the windows (at least one when any exist)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"few-shot fraction must lie in (0, 1], got {fraction}")
    if len(offsets) == 0:
        return offsets
    keep = max(1, math.ceil(fraction * len(offsets) - 1e-9))
    return offsets[len(offsets) - keep:]


def to_univariate(ds: TimeSeriesDataset) -> list[TimeSeriesDataset]:
    out = []
    for i in range(ds.num_channels):
        out.append(ds.replace(
            name=f"{ds.name}:{ds.channel_names[i]}",
            values=ds.values[i:i + 1].copy(),
            channel_roles=["target"],
            channel_names=[ds.channel_names[i]],
        ))
    return out
