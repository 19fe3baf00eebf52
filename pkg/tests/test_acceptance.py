"""Acceptance checks, one test per criterion.

Each test records a ``[PASS]``/``[FAIL]`` line (shown in the pytest terminal
summary) before asserting. ``python tests/test_acceptance.py`` runs the same
checks without pytest.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import subprocess
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

import gradcheck
from ttm import store as S
from ttm import synthetic as syn
from ttm import tensor as T
from ttm.adaptation import evaluate, fla_prune, fla_recursive
from ttm.backbone import attach_resolution_prefix, backbone_forward, patch_merge, patch_partition
from ttm.config import HeadConfig, ModelConfig, TrainConfig
from ttm.data import drs_average, drs_decimate, few_shot_offsets, window_offsets
from ttm.head import decoder_forward, exogenous_mixer, forecast_head, unfold_time
from ttm.mixer import (
    EVAL,
    MixerBlockConfig,
    gated_attention,
    init_block,
    init_linear,
    init_sublayer,
    mlp_mixer_sublayer,
    tsmixer_block,
)
from ttm.model import TTM, build_store
from ttm.preprocessing import patch, unpatch
from ttm.training import finetune, pretrain

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "src" / "ttm" / "resources" / "fixtures"
CONFIG = ROOT / "configs" / "fixture.toml"


def randomize(params, rng, scale=0.3):
    """Generic (non-initial) parameter values so gates and norms are not near-degenerate."""
    out = {}
    for name, arr in params.items():
        base = 1.0 if name.endswith("norm.weight") else 0.0
        out[name] = base + scale * rng.normal(size=np.shape(arr))
    return out


def randomize_store(store, rng, scale=0.3):
    for name, arr in randomize({n: store[n].data for n in store}, rng, scale).items():
        store[name].data[...] = arr
    return store


def tiny_model(**kw):
    base = dict(sl=64, fl=16, pl=8, levels=2, blocks_per_level=1, hf=8, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


# -- 1 ---------------------------------------------------------------------
def criterion_gradients():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    x = rng.normal(size=(2, 3, 8, 16))
    errors = {}

    for axis_name, d, arr in (("patch", 8, np.swapaxes(x, 2, 3)), ("feature", 16, x),
                              ("channel", 3, np.transpose(x, (0, 3, 2, 1)))):
        p = randomize(init_sublayer(rng, "s", d), rng)
        errs = gradcheck.params_check(lambda q, t: mlp_mixer_sublayer(t, q, "s", EVAL, 0.0), p, arr)
        errors[f"sublayer/{axis_name}"] = max(errs.values())

    p = randomize(init_linear(rng, "g", 16, 16), rng)
    errors["gated_attention"] = max(gradcheck.params_check(lambda q, t: gated_attention(t, q, "g"), p, x).values())

    bcfg = MixerBlockConfig(num_patches=8, hidden=16, num_channels=3, channel_mix=True)
    p = randomize(init_block(rng, "blk", bcfg), rng)
    errors["mixer_block"] = max(gradcheck.params_check(lambda q, t: tsmixer_block(t, bcfg, q, "blk"), p, x).values())

    model = ModelConfig(sl=32, fl=8, pl=8, levels=2, blocks_per_level=1, hf=16, dropout=0.0)
    store = randomize_store(build_store(model, HeadConfig(num_channels=3, decoder_layers=1, channel_mix=True,
                                                          head_dropout=0.0)), rng)
    params = {n: store[n].data for n in store}
    ids = np.array([3, 11])
    xp = rng.normal(size=(2, 3, 4, 8))
    bb = {k: v for k, v in params.items() if k.startswith("backbone.")}
    errors["backbone"] = max(gradcheck.params_check(
        lambda q, t: backbone_forward(t, ids, q, model), bb, xp, max_entries=40).values())

    head = store.head
    dec = {k: v for k, v in params.items() if k.startswith("decoder.")}
    h = rng.normal(size=(2, 3, 4, 16))
    errors["decoder"] = max(gradcheck.params_check(
        lambda q, t: decoder_forward(t, q, model, head, head.hf_dec), dec, h, max_entries=40).values())

    fh = {k: v for k, v in params.items() if k.startswith("head.")}
    d = rng.normal(size=(2, 3, 4, head.hf_dec))
    errors["forecast_head"] = max(gradcheck.params_check(lambda q, t: forecast_head(t, q), fh, d).values())

    ehead = HeadConfig(num_channels=3, exog_enabled=True, exog_context=1, exogenous_channels=[2], decoder_layers=1)
    estore = randomize_store(build_store(model, ehead), rng)
    ep = {k: estore[k].data for k in estore if k.startswith("exog.")}
    y_hat = rng.normal(size=(2, 3, 8))
    ex = rng.normal(size=(2, 1, 8))
    errs = gradcheck.check(
        lambda t: exogenous_mixer(t["y"], t["ex"], t, model, estore.head),
        {"y": y_hat, "ex": ex, **ep}, max_entries=40)
    errors["exog_mixer"] = max(errs.values())
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = all(e < gradcheck.TOL for e in errors.values()) and elapsed < 60
    return ok, f"worst {worst} rel err {errors[worst]:.2e} (< 1e-4), {len(errors)} modules, {elapsed:.1f}s (< 60s)"


# -- 2 ---------------------------------------------------------------------
def criterion_structure():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 64))
    checks = {"patch/unpatch": np.array_equal(unpatch(patch(T.Tensor(x), 8)).data, x)}
    h = rng.normal(size=(2, 3, 5, 16))
    for k in (1, 2, 4, 8):
        checks[f"partition/merge K={k}"] = np.array_equal(patch_merge(patch_partition(T.Tensor(h), k), k).data, h)
    try:
        ModelConfig(sl=64, pl=8, levels=3, hf=12)
        checks["hf=12,L=3 rejected"] = False
    except ValueError:
        checks["hf=12,L=3 rejected"] = True
    try:
        ModelConfig(sl=64, pl=8, levels=3, hf=10)
        checks["hf=10,L=3 rejected"] = False
    except ValueError:
        checks["hf=10,L=3 rejected"] = True
    try:
        ModelConfig(sl=64, pl=8, levels=3, hf=16)
        checks["hf=16,L=3 accepted"] = True
    except ValueError:
        checks["hf=16,L=3 accepted"] = False
    table = rng.normal(size=(16, 16))
    ids = np.array([4, 9])
    out = attach_resolution_prefix(T.Tensor(h[:, :, :4]), ids, {"backbone.resolution_embedding": T.Tensor(table)}).data
    checks["prefix n+1"] = out.shape == (2, 3, 5, 16)
    checks["prefix row"] = all(np.array_equal(out[b, c, 0], table[ids[b]]) for b in range(2) for c in range(3))
    checks["prefix rest"] = np.array_equal(out[:, :, 1:], h[:, :, :4])
    failed = [k for k, v in checks.items() if not v]
    detail = f"{len(checks) - len(failed)}/{len(checks)} structural checks hold"
    if failed:
        detail += f", failed: {failed}"
    if "hf=12,L=3 rejected" in failed:
        detail += " (12 is a multiple of 2**(L-1) = 4, so the divisibility rule accepts it)"
    return not failed, detail


# -- 3 ---------------------------------------------------------------------
def criterion_channel_independence():
    rng = np.random.default_rng(2)
    trials, bad = 10, 0
    for trial in range(trials):
        model = ModelConfig(sl=64, fl=16, pl=8, levels=3, blocks_per_level=2, hf=32, dropout=0.0)
        store = randomize_store(build_store(model, HeadConfig(num_channels=5, decoder_layers=2), seed=trial), rng)
        perm = rng.permutation(5)
        xp = rng.normal(size=(3, 5, 8, 8))
        ids = rng.integers(0, 16, size=3)
        h = rng.normal(size=(3, 5, 8, 32))
        with T.no_grad():
            a = backbone_forward(T.Tensor(xp), ids, store, model).data
            b = backbone_forward(T.Tensor(xp[:, perm]), ids, store, model).data
            d1 = decoder_forward(T.Tensor(h), store, model, store.head, store.head.hf_dec).data
            d2 = decoder_forward(T.Tensor(h[:, perm]), store, model, store.head, store.head.hf_dec).data
        bad += (not np.array_equal(a[:, perm], b)) + (not np.array_equal(d1[:, perm], d2))
    return bad == 0, f"{2 * trials - bad}/{2 * trials} backbone/decoder permutation checks bit-exact"


# -- 4 ---------------------------------------------------------------------
def criterion_affine():
    """Inputs have a standard deviation around 100, so the 1e-5 added to the
    normalization scale perturbs the result far below 1e-6."""
    rng = np.random.default_rng(3)
    worst = 0.0
    for seed in range(3):
        model = ModelConfig(sl=64, fl=16, pl=8, levels=2, blocks_per_level=1, hf=16, dropout=0.3)
        store = randomize_store(build_store(model, HeadConfig(num_channels=3, channel_mix=True, decoder_layers=1,
                                                              head_dropout=0.2), seed=seed), rng)
        net = TTM(store)
        x = 100.0 * rng.normal(size=(4, 3, 64)) + rng.normal(size=(4, 3, 1)) * 30
        ids = rng.integers(0, 16, size=4)
        ref = net.predict(x, ids)
        for a in (0.5, 3.0):
            for b in (-7.0, 10.0):
                out = net.predict(a * x + b, ids)
                target = a * ref + b
                worst = max(worst, float(np.max(np.abs(out - target)) / np.max(np.abs(target))))
    return worst < 1e-6, f"max relative deviation {worst:.2e} (< 1e-6) over 3 random models x 4 (a, b)"


# -- 5 ---------------------------------------------------------------------
def brute_average(values, k):
    c, t = values.shape
    out = np.zeros((c, t // k))
    for ch in range(c):
        for i in range(t // k):
            s = 0.0
            for j in range(k):
                s += values[ch, i * k + j]
            out[ch, i] = s / k
    return out


def brute_decimate(values, k):
    c, t = values.shape
    return np.array([[values[ch, i] for i in range(0, t, k)] for ch in range(c)])


def criterion_drs():
    rng = np.random.default_rng(4)
    worst, laws = 0.0, 0
    for i in range(50):
        length = int(rng.integers(40, 400))
        ds = syn.sinusoid(length, period=float(rng.uniform(5, 50)), resolution="1min", splits=None)
        c = int(rng.integers(1, 4))
        ds = ds.replace(values=rng.normal(size=(c, length)) * 10, channel_roles=["target"] * c,
                        channel_names=[f"c{i}" for i in range(c)])
        k = int(rng.integers(1, 9))
        worst = max(worst, float(np.max(np.abs(drs_average(ds, k).values - brute_average(ds.values, k)))))
        worst = max(worst, float(np.max(np.abs(drs_decimate(ds, k).values - brute_decimate(ds.values, k)))))
        a, b = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        if length >= a * b:
            two = drs_average(drs_average(ds, a), b).values
            one = drs_average(ds, a * b).values
            laws += np.max(np.abs(two - one)) <= 1e-12
        else:
            laws += 1
    ok = worst <= 1e-12 and laws == 50
    return ok, f"max |drs - brute force| {worst:.1e} (<= 1e-12) on 50 series; composition law {laws}/50"


# -- 6 ---------------------------------------------------------------------
def criterion_smoke():
    start = time.perf_counter()
    model = tiny_model()
    train_cfg = TrainConfig(epochs=200, lr=1e-3, batch_size=64, seed=0)
    head = HeadConfig(decoder_layers=1, head_dropout=0.0)
    sine = syn.sinusoid(1200, period=32.0, splits=(0.8, 0.1, 0.1))
    result = pretrain([sine], model, train_cfg, head)
    elapsed = time.perf_counter() - start
    train_mse = [r["mse"] for r in result.history if r["split"] == "train"]
    reached = next((i for i, v in enumerate(train_mse) if v < 1e-2), None)
    shifted = syn.sinusoid(500, period=32.0, phase=1.3, splits=(0.2, 0.0, 0.8))
    zero_shot = evaluate(result.store, shifted).mse
    ok = reached is not None and elapsed < 180 and zero_shot < 5e-2
    return ok, (f"train MSE < 1e-2 at epoch {reached}, final {train_mse[-1]:.1e}; zero-shot MSE {zero_shot:.1e} "
                f"(< 5e-2); {elapsed:.0f}s (< 180s)")


# -- 7 ---------------------------------------------------------------------
def criterion_finetune():
    model = tiny_model(hf=16)
    pre = pretrain([syn.seasonal_mix(1500, 0, channels=2)], model, TrainConfig(epochs=20, lr=3e-3, seed=0),
                   HeadConfig(decoder_layers=2, head_dropout=0.0))
    base = pre.store
    backbone_before = {n: base[n].data.tobytes() for n in base if n.startswith("backbone.")}

    ds = syn.lag_coupled(1200, 16, 100)
    head = HeadConfig(num_channels=2, decoder_layers=2, channel_mix=True, head_dropout=0.0)
    few = finetune(base, ds, head, TrainConfig(mode="finetune", epochs=2, lr=1e-2, few_shot=0.05, seed=0))
    frozen = all(few.store[n].data.tobytes() == raw for n, raw in backbone_before.items())
    untouched = all(base[n].data.tobytes() == raw for n, raw in backbone_before.items())
    all_offsets = window_offsets(ds, "train", model.sl, model.fl)
    expected = all_offsets[len(all_offsets) - math.ceil(0.05 * len(all_offsets)):]
    few_ok = np.array_equal(few.window_offsets, expected) and np.array_equal(
        few.window_offsets, few_shot_offsets(all_offsets, 0.05))

    wins, pairs = 0, []
    for seed in range(5):
        ds = syn.lag_coupled(1200, 16, 100 + seed)
        mses = []
        for mix in (False, True):
            h = HeadConfig(num_channels=2, decoder_layers=2, channel_mix=mix, head_dropout=0.0)
            r = finetune(base, ds, h, TrainConfig(mode="finetune", epochs=20, lr=3e-3, seed=seed))
            mses.append(evaluate(r.store, ds).mse)
        wins += mses[1] < mses[0]
        pairs.append(f"{mses[0]:.3f}/{mses[1]:.3f}")
    ok = frozen and untouched and few_ok and wins >= 4
    return ok, (f"backbone byte-identical {frozen and untouched}; few-shot 5% uses last {len(few.window_offsets)}/"
                f"{len(all_offsets)} windows {few_ok}; channel-mix wins {wins}/5 (CI/CM test MSE {', '.join(pairs)})")


# -- 8 ---------------------------------------------------------------------
def criterion_exogenous():
    rng = np.random.default_rng(8)
    model = tiny_model(hf=16)
    head = HeadConfig(num_channels=3, exog_enabled=True, exog_context=1, exogenous_channels=[2], decoder_layers=1,
                      head_dropout=0.0)
    store = randomize_store(build_store(model, head), rng, scale=0.1)
    net = TTM(store)
    x = rng.normal(size=(4, 3, 64))
    y = rng.normal(size=(4, 2, 16))
    ex = T.Tensor(rng.normal(size=(4, 1, 16)), requires_grad=True)
    y_hat, _ = net.forward(x, np.full(4, 11), ex)
    d = y_hat - T.Tensor(y)
    (d * d).mean().backward()
    norm = float(np.linalg.norm(ex.grad))
    deltas = [HeadConfig(num_channels=2, exogenous_channels=[1], exog_context=l).exog_window for l in (0, 1, 2)]
    shapes = [unfold_time(T.Tensor(np.zeros((1, 2, 7))), l).shape[2] for l in (0, 1, 2)]
    ok = norm > 0 and deltas == [1, 3, 5] and shapes == [1, 3, 5]
    return ok, f"||dL/d exog futures|| = {norm:.3e} (> 0); window sizes {deltas}, unfolded {shapes} (1, 3, 5)"


# -- 9 ---------------------------------------------------------------------
def criterion_fla():
    rng = np.random.default_rng(9)
    model = ModelConfig(sl=64, fl=16, pl=8, levels=2, blocks_per_level=1, hf=16, dropout=0.0)
    store = randomize_store(build_store(model, HeadConfig(num_channels=2, decoder_layers=1, channel_mix=True)), rng)
    x = rng.normal(size=(5, 2, 64)) * 3 + 1
    ids = np.full(5, 7)
    full = TTM(store).predict(x, ids)
    pruned_ok = all(np.array_equal(fla_prune(store, k).predict(x, ids), full[:, :, :k]) for k in (1, 5, 8, 15, 16))
    short = randomize_store(build_store(dataclasses.replace(model, fl=8),
                                        HeadConfig(num_channels=2, decoder_layers=1)), rng)
    rec = fla_recursive(short, 16)
    a = rec.predict(x, ids)
    calls = rec.invocations
    b = fla_recursive(short, 16).predict(x, ids)
    ok = pruned_ok and calls == 2 and np.array_equal(a, b)
    return ok, f"prune == slice bit-exact {pruned_ok} (fl' in 1,5,8,15,16); recursive 16 = 2x8: {calls} calls, " \
               f"deterministic {np.array_equal(a, b)}"


# -- 10 --------------------------------------------------------------------
def criterion_serialization(tmp_path):
    rng = np.random.default_rng(10)
    model = tiny_model(hf=16)
    r1 = pretrain([syn.seasonal_mix(400, 1, channels=1)], model, TrainConfig(epochs=2, seed=5),
                  HeadConfig(decoder_layers=1))
    r2 = pretrain([syn.seasonal_mix(400, 1, channels=1)], model, TrainConfig(epochs=2, seed=5),
                  HeadConfig(decoder_layers=1))
    S.save(r1.store, tmp_path / "a.ttmf")
    S.save(r2.store, tmp_path / "b.ttmf")
    a = (tmp_path / "a.ttmf").read_bytes()
    same_seed = a == (tmp_path / "b.ttmf").read_bytes()
    round_trip = S.to_bytes(S.load(tmp_path / "a.ttmf")) == a
    header, start = S.read_header(a)
    detected = 0
    for pos in rng.integers(start, len(a) - 4, size=20):
        bad = bytearray(a)
        bad[pos] ^= 0x10
        try:
            S.from_bytes(bytes(bad))
        except S.CRCError:
            detected += 1
    ok = same_seed and round_trip and detected == 20
    return ok, f"save->load->save identical {round_trip}; same-seed checkpoints identical {same_seed}; " \
               f"CRC caught {detected}/20 payload bit flips"


# -- 11 --------------------------------------------------------------------
def _ttm(*args, cwd):
    return subprocess.run([sys.executable, "-m", "ttm", *map(str, args)], cwd=cwd, capture_output=True, text=True,
                          env={**os.environ, "PYTHONWARNINGS": "ignore"})


def criterion_cli(tmp_path):
    start = time.perf_counter()
    c = ["--config", CONFIG]
    steps = [
        ("prepare", ["prepare", "--manifest", FIXTURES / "pretrain_manifest.json", "--out", "prep", *c]),
        ("pretrain", ["pretrain", "--corpus", "prep/corpus.json", "--out", "pre", *c]),
        ("finetune", ["finetune", "--checkpoint", "pre/model.ttmf", "--data", FIXTURES / "target_manifest.json",
                      "--channel-mix", "--out", "ft", *c]),
        ("eval", ["eval", "--checkpoint", "ft/model.ttmf", "--data", FIXTURES / "target_manifest.json",
                  "--protocol", "sliding", "--out", "ev", *c]),
        ("inspect", ["inspect", "--checkpoint", "ft/model.ttmf", "--data", FIXTURES / "target_manifest.json",
                     "--embeddings", "--attention", "--out", "in", *c]),
    ]
    codes = {}
    for name, args in steps:
        proc = _ttm(*args, cwd=tmp_path)
        codes[name] = proc.returncode
        if proc.returncode:
            return False, f"{name} exited {proc.returncode}: {proc.stderr.strip()[-300:]}"
    elapsed = time.perf_counter() - start
    manifests = all((tmp_path / d / "run_manifest.json").is_file() for d in ("prep", "pre", "ft", "ev", "in"))
    report = json.loads((tmp_path / "ev" / "eval_report.json").read_text())
    with open(tmp_path / "ev" / "window_forecasts.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    sq = [(float(r["forecast"]) - float(r["truth"])) ** 2 for r in rows]
    recomputed = math.fsum(sq) / len(sq)
    diff = abs(recomputed - report["mse"])
    ok = elapsed < 300 and manifests and diff <= 1e-10 and all(v == 0 for v in codes.values())
    return ok, f"5 commands exit 0 in {elapsed:.0f}s (< 300s); manifests present {manifests}; " \
               f"|report MSE - recomputed| = {diff:.1e} (<= 1e-10)"


# -- 12 --------------------------------------------------------------------
def criterion_rpt():
    wins, pairs = 0, []
    for seed in range(5):
        corpus = syn.two_resolution_corpus(seed, length=800, noise=0.6)
        val = []
        for rpt in (False, True):
            model = ModelConfig(sl=16, fl=16, pl=4, levels=2, blocks_per_level=1, hf=8, dropout=0.0,
                                resolution_prefix=rpt)
            r = pretrain(corpus, model, TrainConfig(epochs=10, lr=3e-3, seed=seed),
                         HeadConfig(decoder_layers=1, head_dropout=0.0))
            val.append(min(h["mse"] for h in r.history if h["split"] == "val"))
        wins += val[1] <= val[0]
        pairs.append(f"{val[0]:.3f}/{val[1]:.3f}")
    return wins >= 4, f"RPT-on val MSE <= RPT-off on {wins}/5 seeds (off/on {', '.join(pairs)})"


CRITERIA = [
    (1, "gradient suite", criterion_gradients),
    (2, "structural invariants", criterion_structure),
    (3, "channel independence", criterion_channel_independence),
    (4, "affine equivariance", criterion_affine),
    (5, "DRS oracle equivalence", criterion_drs),
    (6, "pre-training smoke", criterion_smoke),
    (7, "fine-tuning contracts", criterion_finetune),
    (8, "exogenous flow", criterion_exogenous),
    (9, "forecast-length adaptation", criterion_fla),
    (10, "serialization", criterion_serialization),
    (11, "end-to-end CLI", criterion_cli),
    (12, "RPT effect", criterion_rpt),
]
NEEDS_TMP = {10, 11}


@pytest.mark.parametrize("number,title,fn", CRITERIA, ids=[f"c{n:02d}" for n, _, _ in CRITERIA])
def test_criterion(number, title, fn, report, tmp_path):
    ok, detail = fn(tmp_path) if number in NEEDS_TMP else fn()
    report(number, title, ok, detail)
    assert ok, detail


if __name__ == "__main__":
    import tempfile

    warnings.filterwarnings("ignore")
    failures = 0
    for number, title, fn in CRITERIA:
        with tempfile.TemporaryDirectory() as tmp:
            ok, detail = fn(Path(tmp)) if number in NEEDS_TMP else fn()
        failures += not ok
        print(f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} | {detail}", flush=True)
    sys.exit(1 if failures else 0)
