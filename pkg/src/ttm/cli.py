"""``ttm`` command line: prepare, pretrain, finetune, forecast, eval, inspect, synth.

Every run writes ``run_manifest.json`` into its output directory. Failures
print one JSON object on a single stderr line and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import shutil
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import store as S
from .adaptation import channel_attention_map, evaluate, export_embeddings, f_imp, forecaster_for
from .config import HeadConfig, ModelConfig, TrainConfig, from_dict
from .model import for_channels
from .data import (
    CsvSchema,
    IngestionError,
    TimeSeriesDataset,
    drs_average,
    drs_decimate,
    load_csv,
    load_manifest,
    split_temporal,
    window_offsets,
    write_csv,
)
from .synthetic import write_fixture_corpus
from .training import finetune, jsonl_logger, pretrain

MANIFEST = "run_manifest.json"
SECTIONS = ("model", "head", "pretrain", "finetune", "data")
DEFAULT_SPLITS = [0.7, 0.1, 0.2]

EXIT_CODES = {"usage": 2, "config": 3, "data": 4, "checkpoint": 5, "invalid": 6, "runtime": 1}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        self.kind = kind
        super().__init__(message)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


# -- config ---------------------------------------------------------------
def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def resolve_config(path: str | None, overrides: list[str]) -> dict:
    """TOML file < TTM_SEED < ``--set section.key=value``."""
    cfg: dict = {s: {} for s in SECTIONS}
    if path:
        try:
            doc = tomllib.loads(Path(path).read_text())
        except tomllib.TOMLDecodeError as e:
            raise CliError("config", f"{path}: {e}") from None
        for key, val in doc.items():
            if key not in SECTIONS or not isinstance(val, dict):
                raise CliError("config", f"unknown config section {key!r}")
            cfg[key].update(val)
    if "TTM_SEED" in os.environ:
        try:
            seed = int(os.environ["TTM_SEED"])
        except ValueError:
            raise CliError("config", f"TTM_SEED must be an integer, got {os.environ['TTM_SEED']!r}") from None
        cfg["pretrain"]["seed"] = seed
        cfg["finetune"]["seed"] = seed
    for item in overrides:
        key, sep, val = item.partition("=")
        section, dot, field = key.strip().partition(".")
        if not sep or not dot or section not in SECTIONS:
            raise CliError("config", f"--set expects section.key=value with section in {SECTIONS}, got {item!r}")
        cfg[section][field] = _parse_value(val.strip())
    return cfg


def _build(cls, data: dict, **fixed):
    try:
        return from_dict(cls, {**data, **fixed})
    except (TypeError, ValueError) as e:
        raise CliError("config", f"{cls.__name__}: {e}") from None


# -- io helpers -----------------------------------------------------------
def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


class Run:
    """Collects inputs and outputs of one command and writes its manifest."""

    def __init__(self, command: str, out: Path, argv: list[str]):
        self.command, self.out, self.argv = command, out, argv
        self.start = time.perf_counter()
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.config: dict = {}
        self.seed: int | None = None
        out.mkdir(parents=True, exist_ok=True)

    def input(self, path) -> Path:
        path = Path(path)
        if not path.is_file():
            raise CliError("data", f"input file not found: {path}")
        self.inputs[str(path)] = sha256_file(path)
        return path

    def output(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def finish(self) -> Path:
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "resolved_config": self.config,
            "seed": self.seed,
            "input_hashes": self.inputs,
            "output_paths": sorted(self.outputs),
            "wall_seconds": time.perf_counter() - self.start,
            "git_describe": git_describe(),
        }
        path = self.out / MANIFEST
        _write_json(path, manifest)
        return path


def load_datasets(run: Run, path, name: str | None = None, splits=None) -> list[TimeSeriesDataset]:
    """A JSON manifest (all entries, or the one called ``name``) or a bare CSV."""
    path = run.input(path)
    if path.suffix == ".csv":
        ds = load_csv(path, CsvSchema(name=name))
        return [split_temporal(ds, splits or DEFAULT_SPLITS)]
    entries = load_manifest(path)
    doc = json.loads(path.read_text())
    for item in doc["datasets"]:
        run.input(path.parent / item["path"])
    datasets = [e.split(splits or DEFAULT_SPLITS) for e in entries]
    if name is not None:
        datasets = [d for d in datasets if d.name == name]
        if not datasets:
            raise CliError("data", f"no dataset named {name!r} in {path}")
    return datasets


def load_checkpoint(run: Run, path) -> S.ParameterStore:
    return S.load(run.input(path))


def _fit_to(store: S.ParameterStore, ds: TimeSeriesDataset) -> S.ParameterStore:
    """A channel-independent (e.g. freshly pre-trained) store is applied to every target of ``ds``."""
    if store.head.num_channels == ds.num_channels:
        return store
    try:
        return for_channels(store, ds.num_channels, ds.target_channels)
    except ValueError as e:
        raise CliError("data", f"checkpoint expects {store.head.num_channels} channels, data has "
                               f"{ds.num_channels}: {e}") from None


def _one(datasets: list[TimeSeriesDataset], what: str) -> TimeSeriesDataset:
    if len(datasets) != 1:
        raise CliError("data", f"{what} needs exactly one dataset, got {len(datasets)}; pick one with --dataset")
    return datasets[0]


# -- commands -------------------------------------------------------------
def cmd_prepare(args, run: Run) -> None:
    """Apply splits and DRS variants; write the CSVs and a corpus manifest with explicit bounds."""
    src = run.input(args.manifest)
    entries = load_manifest(src)
    for item in json.loads(src.read_text())["datasets"]:
        run.input(src.parent / item["path"])
    items = []
    for entry in entries:
        fractions = entry.splits or DEFAULT_SPLITS
        variants = [entry.split(fractions)]
        variants += [split_temporal(drs_average(entry.dataset, k), fractions) for k in entry.drs_average]
        variants += [split_temporal(drs_decimate(entry.dataset, k), fractions) for k in entry.drs_decimate]
        for ds in variants:
            fname = f"{ds.name}.csv"
            write_csv(ds, run.output(fname))
            items.append({
                "path": fname,
                "name": ds.name,
                "resolution": ds.resolution.label,
                "channel_roles": dict(zip(ds.channel_names, ds.channel_roles)),
                "bounds": {k: list(v) for k, v in ds.split_bounds.items()},
            })
    _write_json(run.output("corpus.json"), {"datasets": items})


def cmd_pretrain(args, run: Run) -> None:
    cfg = run.config
    model = _build(ModelConfig, cfg["model"])
    head = _build(HeadConfig, cfg["head"])
    train = _build(TrainConfig, cfg["pretrain"], mode="pretrain")
    run.seed = train.seed
    datasets = load_datasets(run, args.corpus, splits=cfg["data"].get("splits"))
    log_path = run.output("train_log.jsonl")
    log_path.unlink(missing_ok=True)
    result = pretrain(datasets, model, train, head, log_fn=jsonl_logger(log_path))
    S.save(result.store, run.output("model.ttmf"))


def cmd_finetune(args, run: Run) -> None:
    cfg = run.config
    ck = Path(args.checkpoint)
    store = load_checkpoint(run, ck)
    train = _build(TrainConfig, cfg["finetune"], mode="finetune")
    run.seed = train.seed
    ds = _one(load_datasets(run, args.data, args.dataset, cfg["data"].get("splits")), "finetune")
    head_fields = {**cfg["head"]}
    exog = bool(head_fields.pop("exog_enabled", False))
    head = _build(
        HeadConfig,
        head_fields,
        num_channels=ds.num_channels,
        target_channels=ds.target_channels,
        exogenous_channels=ds.exogenous_channels if exog else [],
        exog_enabled=exog,
    )
    out = run.output("model.ttmf")
    if train.few_shot == 0.0:
        shutil.copyfile(ck, out)  # zero-shot: the checkpoint is used as is
        return
    log_path = run.output("train_log.jsonl")
    log_path.unlink(missing_ok=True)
    result = finetune(store, ds, head, train, log_fn=jsonl_logger(log_path))
    S.save(result.store, out)
    _write_json(run.output("window_offsets.json"), {
        "dataset": ds.name,
        "split": "train",
        "all": [int(v) for v in _train_offsets(ds, store, train)],
        "used": [int(v) for v in result.window_offsets],
    })


def _train_offsets(ds, store, train):
    return window_offsets(ds, "train", store.model.sl, store.model.fl, train.stride)


def _method(args) -> str:
    return "auto" if args.fla is None else args.fla


def cmd_forecast(args, run: Run) -> None:
    """Forecast from the last ``sl`` rows; with an exogenous mixer the final ``fl`` rows carry the known futures."""
    store = load_checkpoint(run, args.checkpoint)
    ds = _one(load_datasets(run, args.data, args.dataset, run.config["data"].get("splits")), "forecast")
    store = _fit_to(store, ds)
    fc = forecaster_for(store, args.fl, _method(args))
    sl, fl, head = store.model.sl, fc.fl, store.head
    end = ds.length - fl if head.exog_enabled else ds.length
    if end < sl:
        raise CliError("data", f"need at least {sl + (fl if head.exog_enabled else 0)} rows, got {ds.length}")
    x = ds.values[None, :, end - sl:end]
    ex = ds.values[None, head.exogenous_channels, end:end + fl] if head.exog_enabled else None
    y = fc.predict(x, np.array([ds.resolution.id]), ex)[0]
    step_s = ds.resolution.seconds
    t0 = int(ds.timestamps[end - 1]) if ds.timestamps is not None else end - 1
    with run.output("forecast.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "channel", "step", "value"])
        for j, ch in enumerate(head.target_channels):
            for s in range(fl):
                w.writerow([int(t0 + (s + 1) * step_s), ds.channel_names[ch], s + 1, repr(float(y[j, s]))])


def cmd_eval(args, run: Run) -> None:
    store = load_checkpoint(run, args.checkpoint)
    ds = _one(load_datasets(run, args.data, args.dataset, run.config["data"].get("splits")), "eval")
    store = _fit_to(store, ds)
    protocol = {"sliding": "sliding", "last": "last_window"}[args.protocol]
    report = evaluate(store, ds, args.fl, protocol, _method(args), workers=args.workers)
    if args.baseline:
        baseline = json.loads(run.input(args.baseline).read_text())
        report.f_imp = {"vs_baseline_percent": f_imp({ds.name: report.mse}, baseline)}
    _write_json(run.output("eval_report.json"), report.to_json())
    names = [ds.channel_names[c] for c in store.head.target_channels]
    with run.output("window_forecasts.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window_offset", "channel", "step", "forecast", "truth"])
        for i, off in enumerate(report.offsets):
            for j, name in enumerate(names):
                for s in range(report.fl):
                    w.writerow([int(off), name, s + 1, repr(float(report.forecasts[i, j, s])),
                                repr(float(report.truths[i, j, s]))])


def cmd_inspect(args, run: Run) -> None:
    store = load_checkpoint(run, args.checkpoint)
    _write_json(run.output("summary.json"), {
        "fingerprint": store.fingerprint,
        "model": dataclasses.asdict(store.model),
        "head": dataclasses.asdict(store.head),
        "num_params": {p: store.num_params(p) for p in ("backbone.", "decoder.", "head.", "exog.")},
        "num_trainable": int(sum(store[n].data.size for n in store.trainable_names())),
    })
    if not (args.embeddings or args.attention):
        return
    ds = _one(load_datasets(run, args.data, args.dataset, run.config["data"].get("splits")), "inspect")
    store = _fit_to(store, ds)
    if args.embeddings:
        exp = export_embeddings(store, ds, stride=args.stride)
        with run.output("embeddings.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["window_offset", "pc1", "pc2"])
            for off, row in zip(exp.offsets, exp.projection):
                w.writerow([int(off), *(repr(float(v)) for v in row)] + [repr(0.0)] * (2 - len(row)))
    if args.attention:
        att = channel_attention_map(store, ds)
        with run.output("attention.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["gate", "channel", "weight"])
            for g, row in enumerate(att.per_gate):
                for name, v in zip(att.channel_names, row):
                    w.writerow([f"decoder.block{g}", name, repr(float(v))])
            for name, v in zip(att.channel_names, att.mean):
                w.writerow(["mean", name, repr(float(v))])


def cmd_synth(args, run: Run) -> None:
    run.seed = args.seed
    write_fixture_corpus(run.out, seed=args.seed)
    for p in sorted(run.out.iterdir()):
        if p.name != MANIFEST:
            run.outputs.append(p.name)


COMMANDS = {
    "prepare": cmd_prepare,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "forecast": cmd_forecast,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ttm", description="Tiny Time Mixer forecasting")
    common = _Parser(add_help=False)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare", parents=[common], help="apply splits and DRS, write a corpus manifest")
    s.add_argument("--manifest", required=True)

    s = sub.add_parser("pretrain", parents=[common])
    s.add_argument("--corpus", required=True)

    def data_args(s, data_required=True):
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--data", required=data_required, help="dataset manifest JSON or CSV")
        s.add_argument("--dataset", help="dataset name inside the manifest")

    s = sub.add_parser("finetune", parents=[common])
    data_args(s)
    s.add_argument("--few-shot", type=float, dest="few_shot")
    s.add_argument("--channel-mix", action="store_true", dest="channel_mix")
    s.add_argument("--exog", action="store_true")

    for name in ("forecast", "eval"):
        s = sub.add_parser(name, parents=[common])
        data_args(s)
        s.add_argument("--fla", choices=["prune", "recursive", "direct"])
        s.add_argument("--fl", type=int)
    s.add_argument("--protocol", choices=["sliding", "last"], default="sliding")
    s.add_argument("--baseline", help="JSON {dataset: mse} for the f_imp score")

    s = sub.add_parser("inspect", parents=[common])
    data_args(s, data_required=False)
    s.add_argument("--embeddings", action="store_true")
    s.add_argument("--attention", action="store_true")
    s.add_argument("--stride", type=int, default=1)

    s = sub.add_parser("synth", parents=[common], help="write the synthetic fixture corpus")
    s.add_argument("--seed", type=int, default=0)
    return p


def run_command(argv: list[str]) -> Path:
    args = build_parser().parse_args(argv)
    if args.workers < 1:
        raise CliError("usage", "--workers must be >= 1")
    cfg = resolve_config(args.config, args.set)
    if getattr(args, "few_shot", None) is not None:
        cfg["finetune"]["few_shot"] = args.few_shot
    if getattr(args, "channel_mix", False):
        cfg["head"]["channel_mix"] = True
    if getattr(args, "exog", False):
        cfg["head"]["exog_enabled"] = True
    if getattr(args, "command", None) == "inspect" and (args.embeddings or args.attention) and not args.data:
        raise CliError("usage", "--embeddings/--attention need --data")
    run = Run(args.command, Path(args.out), list(argv))
    if args.config:
        run.input(args.config)
    run.config = cfg
    COMMANDS[args.command](args, run)
    return run.finish()


def _kind(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.kind
    if isinstance(exc, S.CheckpointError):
        return "checkpoint"
    if isinstance(exc, (IngestionError, FileNotFoundError, json.JSONDecodeError, KeyError)):
        return "data"
    if isinstance(exc, ValueError):
        return "invalid"
    return "runtime"


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        run_command(argv)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one stderr line
        kind = _kind(exc)
        code = getattr(exc, "code", kind)
        msg = " ".join(str(exc).split()) or type(exc).__name__
        sys.stderr.write(json.dumps({"error": kind, "code": code, "type": type(exc).__name__, "message": msg}) + "\n")
        return EXIT_CODES[kind]
    return 0


if __name__ == "__main__":
    sys.exit(main())
