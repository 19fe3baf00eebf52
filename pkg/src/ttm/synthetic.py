"""Seeded synthetic series for tests, scripts and the bundled CLI fixtures."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import TimeSeriesDataset, default_registry, split_temporal, write_csv


def _dataset(name: str, values: np.ndarray, resolution: str, roles=None, names=None, start: int = 1_700_000_000,
             splits=(0.7, 0.1, 0.2)) -> TimeSeriesDataset:
    res = default_registry().by_label(resolution)
    values = np.atleast_2d(values)
    ts = start + np.arange(values.shape[1], dtype=np.int64) * int(res.seconds)
    ds = TimeSeriesDataset(name, res, values, roles or ["target"] * values.shape[0], names or [], timestamps=ts)
    return split_temporal(ds, splits) if splits else ds


def sinusoid(length: int, period: float, phase: float = 0.0, amplitude: float = 1.0, offset: float = 0.0,
             name: str = "sine", resolution: str = "1h", splits=(0.7, 0.1, 0.2)) -> TimeSeriesDataset:
    t = np.arange(length)
    return _dataset(name, offset + amplitude * np.sin(2 * np.pi * t / period + phase), resolution, splits=splits)


def seasonal_mix(length: int, seed: int, channels: int = 2, resolution: str = "1h", name: str = "mix",
                 noise: float = 0.05) -> TimeSeriesDataset:
    """Per channel: two sinusoids + linear trend + Gaussian noise."""
    rng = np.random.default_rng(seed)
    t = np.arange(length)
    rows = []
    for _ in range(channels):
        p1, p2 = rng.uniform(12, 30), rng.uniform(40, 90)
        x = np.sin(2 * np.pi * t / p1 + rng.uniform(0, 2 * np.pi))
        x += 0.5 * np.sin(2 * np.pi * t / p2 + rng.uniform(0, 2 * np.pi))
        x += rng.uniform(-1, 1) * t / length + rng.uniform(-2, 2)
        rows.append(x + noise * rng.normal(size=length))
    return _dataset(name, np.asarray(rows), resolution)


def smooth_noise(length: int, rng: np.random.Generator, phi: float = 0.8) -> np.ndarray:
    e = rng.normal(size=length + 200)
    x = np.zeros_like(e)
    for i in range(1, len(e)):
        x[i] = phi * x[i - 1] + e[i]
    return x[200:]


def lag_coupled(length: int, lag: int, seed: int, name: str = "lagged", noise: float = 0.0) -> TimeSeriesDataset:
    """Channel 1 is an AR(1) process; channel 2 repeats channel 1 ``lag`` steps later."""
    rng = np.random.default_rng(seed)
    x = smooth_noise(length + lag, rng)
    lead = x[lag:]
    follow = x[:length] + noise * rng.normal(size=length)
    return _dataset(name, np.stack([lead, follow]), "1h", names=["lead", "follow"])


def exogenous_driven(length: int, seed: int, lag: int = 1, name: str = "exog") -> TimeSeriesDataset:
    """Target responds to a known exogenous driver ``lag`` steps earlier, plus a daily cycle."""
    rng = np.random.default_rng(seed)
    t = np.arange(length)
    driver = smooth_noise(length + lag, rng, phi=0.7)
    target = np.sin(2 * np.pi * t / 24) + 0.8 * driver[:length] + 0.05 * rng.normal(size=length)
    return _dataset(name, np.stack([target, driver[lag:]]), "1h", roles=["target", "exogenous"],
                    names=["target", "driver"])


def two_resolution_corpus(seed: int, length: int = 1500, noise: float = 0.6) -> list[TimeSeriesDataset]:
    """Two noisy sinusoid families whose period depends on the resolution.

    At the short contexts used in tests the noise makes the period hard to
    read off the context, so knowing the resolution helps.
    """
    rng = np.random.default_rng(seed)
    out = []
    for label, period in (("10min", 20.0), ("1h", 28.0)):
        for j in range(3):
            t = np.arange(length)
            x = np.sin(2 * np.pi * t / period + rng.uniform(0, 2 * np.pi)) + noise * rng.normal(size=length)
            out.append(_dataset(f"{label}_{j}", x, label, splits=(0.6, 0.2, 0.2)))
    return out


def write_fixture_corpus(root, seed: int = 0) -> Path:
    """Write the bundled 2-channel fixture plus a pre-training corpus and a manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    datasets = [
        (seasonal_mix(2000, seed, channels=2, resolution="10min", name="pretrain_a"), {"average": [6]}),
        (seasonal_mix(1500, seed + 1, channels=1, resolution="1h", name="pretrain_b"), {}),
    ]
    items = []
    for ds, drs in datasets:
        write_csv(ds, root / f"{ds.name}.csv")
        items.append({"path": f"{ds.name}.csv", "name": ds.name, "resolution": ds.resolution.label,
                      "splits": [0.7, 0.1, 0.2], "drs": drs})
    (root / "pretrain_manifest.json").write_text(json.dumps({"datasets": items}, indent=2) + "\n")
    target = lag_coupled(1200, 8, seed + 2, name="target2ch")
    write_csv(target, root / "target2ch.csv")
    (root / "target_manifest.json").write_text(json.dumps({"datasets": [
        {"path": "target2ch.csv", "name": "target2ch", "resolution": "1h", "splits": [0.7, 0.1, 0.2],
         "channel_roles": {"lead": "target", "follow": "target"}}
    ]}, indent=2) + "\n")
    exo = exogenous_driven(1200, seed + 3, name="exog2ch")
    write_csv(exo, root / "exog2ch.csv")
    (root / "exog_manifest.json").write_text(json.dumps({"datasets": [
        {"path": "exog2ch.csv", "name": "exog2ch", "resolution": "1h", "splits": [0.7, 0.1, 0.2],
         "channel_roles": {"target": "target", "driver": "exogenous"}}
    ]}, indent=2) + "\n")
    return root
