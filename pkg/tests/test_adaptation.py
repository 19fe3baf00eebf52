import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttm import synthetic as syn
from ttm.adaptation import (
    channel_attention_map,
    evaluate,
    export_embeddings,
    f_imp,
    fla_prune,
    fla_recursive,
    forecaster_for,
    power_iteration_pca,
    prune_store,
)
from ttm.config import HeadConfig, ModelConfig
from ttm.data import gather_windows, window_offsets
from ttm.model import TTM, build_store

MODEL = ModelConfig(sl=32, fl=8, pl=8, levels=2, blocks_per_level=1, hf=8, dropout=0.0)


def jittered(model=MODEL, head=None, seed=0):
    store = build_store(model, head or HeadConfig(decoder_layers=1, head_dropout=0.0), seed=seed)
    rng = np.random.default_rng(seed + 100)
    for name in store:
        store[name].data += 0.3 * rng.normal(size=store[name].shape)
    return store


def test_prune_equals_slicing(rng):
    store = jittered(head=HeadConfig(num_channels=2, decoder_layers=1, channel_mix=True))
    x = rng.normal(size=(3, 2, 32)) * 2 + 1
    full = TTM(store).predict(x, 5)
    for k in range(1, 9):
        assert np.array_equal(fla_prune(store, k).predict(x, 5), full[:, :, :k])
    with pytest.raises(ValueError):
        prune_store(store, 9)


def test_recursive_rolls_context_forward(rng):
    store = jittered()
    x = rng.normal(size=(2, 1, 32))
    rec = fla_recursive(store, 20)
    y = rec.predict(x, 3)
    assert y.shape == (2, 1, 20) and rec.invocations == 3
    first = TTM(store).predict(x, 3)
    np.testing.assert_array_equal(y[:, :, :8], first)
    np.testing.assert_array_equal(rec.contexts[1], np.concatenate([x, first], axis=-1)[:, :, -32:])
    with pytest.raises(ValueError):
        fla_recursive(store, 4)


def test_forecaster_dispatch():
    store = jittered()
    assert forecaster_for(store).fl == 8
    assert forecaster_for(store, 4).store.model.fl == 4
    assert forecaster_for(store, 16).__class__.__name__ == "RecursiveForecaster"
    with pytest.raises(ValueError):
        forecaster_for(store, 4, method="direct")


def test_evaluate_matches_manual_windows():
    store = jittered()
    ds = syn.seasonal_mix(300, 1, channels=1)
    rep = evaluate(store, ds)
    offs = window_offsets(ds, "test", 32, 8, 1, context_overlap=True)
    w = gather_windows(ds, offs, 32, 8)
    manual = np.mean((TTM(store).predict(w.X, w.resolution_ids) - w.Y) ** 2)
    assert rep.n_windows == len(offs) and rep.mse == pytest.approx(manual, rel=1e-12)
    last = evaluate(store, ds, protocol="last_window")
    assert last.n_windows == 1 and last.offsets[0] == offs[-1]
    threaded = evaluate(store, ds, workers=4, chunk=7)
    assert threaded.mse == rep.mse
    with pytest.raises(ValueError):
        evaluate(store, ds, protocol="random")


def test_f_imp():
    assert f_imp({"a": 0.5, "b": 1.0}, {"a": 1.0, "b": 1.0, "c": 2.0}) == pytest.approx(25.0)
    with pytest.raises(ValueError):
        f_imp({"a": 1.0}, {"b": 1.0})


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_power_iteration_matches_eigh(seed):
    rng = np.random.default_rng(seed)
    scales = np.array([5.0, 2.0, 1.0, 0.5, 0.1])
    data = rng.normal(size=(200, 5)) * scales @ np.linalg.qr(rng.normal(size=(5, 5)))[0]
    comps, var = power_iteration_pca(data, k=2, tol=1e-12)
    xc = data - data.mean(axis=0)
    evals, evecs = np.linalg.eigh(xc.T @ xc / (len(data) - 1))
    np.testing.assert_allclose(var, evals[::-1][:2], rtol=1e-6)
    for i in range(2):
        assert abs(abs(comps[i] @ evecs[:, -1 - i]) - 1.0) < 1e-6


def test_embedding_export_shapes():
    store = jittered()
    ds = syn.seasonal_mix(100, 2, channels=2)
    out = export_embeddings(store, ds, stride=4)
    n = len(range(0, 100 - 32 + 1, 4))
    assert out.embeddings.shape == (n, 2 * 4 * 8) and out.projection.shape == (n, 2)
    assert out.variances[0] >= out.variances[1]


def test_channel_attention_sums_to_one():
    head = HeadConfig(num_channels=2, decoder_layers=2, channel_mix=True, head_dropout=0.0)
    store = jittered(head=head)
    att = channel_attention_map(store, syn.lag_coupled(400, 4, 0))
    assert att.per_gate.shape == (2, 2)
    np.testing.assert_allclose(att.per_gate.sum(axis=1), 1.0, rtol=1e-12)
    with pytest.raises(ValueError):
        channel_attention_map(jittered(), syn.lag_coupled(400, 4, 0))


def test_prune_rejects_exogenous_models():
    head = HeadConfig(num_channels=2, exog_enabled=True, exog_context=1, exogenous_channels=[1], decoder_layers=1)
    store = jittered(model=dataclasses.replace(MODEL), head=head)
    with pytest.raises(ValueError):
        prune_store(store, 4)
