import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import softmax

from dps import autodiff as ad
from dps.gas import (GasConfig, GasModel, GumbelDraw, gas_aggregate, gas_sample, gas_scores, gas_select,
                     gumbel_attention, pretrain_gas)
from dps.graph_store import TemporalGraph, chrono_split, neighbors_before, ragged_candidates, synth_generate
from dps.samplers import gumbel_noise


@pytest.fixture
def small():
    g = synth_generate(30, 400, 3, seed=2)
    with ad.use_profile("test"):
        yield g, GasModel(g.num_nodes, 0, d_node=8, d_time=4, seed=1)


def test_temperature_schedule():
    cfg = GasConfig()
    assert [cfg.temperature(e) for e in range(6)] == [1.0, 0.5, 0.25, 0.125, 0.1, 0.1]


def test_single_query_scores_match_batch(small):
    g, model = small
    nodes = np.array([0, 5, 9])
    times = np.array([g.ts[-1], g.ts[200], g.ts[300]])
    seg, pos, _ = ragged_candidates(g, nodes, times)
    batch = model.score_ragged(g, nodes, times, seg, pos)
    for i, (u, t) in enumerate(zip(nodes, times)):
        ns = neighbors_before(g, int(u), float(t))
        if len(ns):
            assert np.allclose(gas_scores(model, int(u), float(t), ns), batch[seg == i], atol=1e-10)


def test_scores_need_neighbours(small):
    g, model = small
    with pytest.raises(ValueError):
        gas_scores(model, 0, -1.0, neighbors_before(g, 0, -1.0))


def test_gumbel_attention_normalised_and_sharpens():
    p = np.array([0.1, 2.0, -1.0, 0.5])
    draw = GumbelDraw.sample(np.random.default_rng(0), 4)
    a = gumbel_attention(p, draw, 1.0)
    assert a.sum() == pytest.approx(1.0)
    cold = gumbel_attention(p, draw, 1e-3)
    assert cold[np.argmax(p + draw.noise)] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        gumbel_attention(p, draw, 0.0)
    with pytest.raises(ValueError):
        gumbel_attention(p, GumbelDraw(np.zeros(2)), 1.0)


@settings(max_examples=5, deadline=None)
@given(p=st.lists(st.floats(-3, 3), min_size=2, max_size=8))
def test_gumbel_max_law(p):
    p = np.array(p)
    n = 100_000
    rng = np.random.default_rng(len(p))
    wins = np.argmax(p + gumbel_noise(rng, (n, len(p))), axis=1)
    f = np.bincount(wins, minlength=len(p)) / n
    q = softmax(p)
    assert np.all(np.abs(f - q) <= 3 * np.sqrt(q * (1 - q) / n) + 1e-12)


def test_select_ties_and_short_lists():
    assert list(gas_select([0.2, 0.4, 0.4, 0.0], 2)) == [1, 2]
    assert list(gas_select([0.5, 0.5, 0.5], 2)) == [0, 1]
    assert list(gas_select([0.1, 0.2], 5)) == [0, 1]
    with pytest.raises(ValueError):
        gas_select([0.1], 0)


def test_aggregate_renormalises_over_selection(small):
    _, model = small
    alpha = np.array([0.5, 0.3, 0.2])
    values = np.random.default_rng(0).normal(size=(3, model.W_V.shape[0]))
    out = gas_aggregate(model, alpha, [0, 2], values).data
    expect = (0.5 / 0.7) * values[0] @ model.W_V.data + (0.2 / 0.7) * values[2] @ model.W_V.data
    assert np.allclose(out, expect)


def test_gas_sample_requires_training(small):
    g, model = small
    ns = neighbors_before(g, 0, float(g.ts[-1]) + 1)
    with pytest.raises(ValueError):
        gas_sample(model, 0, float(g.ts[-1]) + 1, ns, 3)
    model.trained = True
    got = gas_sample(model, 0, ns.anchor_time, ns, 3)
    scores = gas_scores(model, 0, ns.anchor_time, ns)
    assert len(got) == min(3, len(ns))
    assert sorted(e for _, _, e in got) == sorted(ns.eid[np.argsort(-scores, kind="stable")[:3]].tolist())


def test_inference_embed_is_noise_free(small):
    g, model = small
    nodes, times = np.array([1, 2, 1]), np.full(3, float(g.ts[-1]))
    a = model.embed(g, nodes, times, 4).data
    b = model.embed(g, nodes, times, 4).data
    assert np.array_equal(a, b) and np.array_equal(a[0], a[2])


def test_state_round_trip(small):
    _, model = small
    model.temperature, model.trained = 0.25, True
    other = GasModel(30, 0, d_node=8, d_time=4, seed=9)
    other.load_state_dict(model.state_dict())
    assert other.temperature == 0.25 and other.trained
    assert np.array_equal(other.W_Q.data, model.W_Q.data)
    with pytest.raises(ad.ShapeError):
        GasModel(31, 0, d_node=8, d_time=4).load_state_dict(model.state_dict())


def test_pretraining_runs_and_is_deterministic():
    g = synth_generate(40, 600, 4, seed=3)
    sp = chrono_split(g)
    cfg = GasConfig(d_node=8, d_time=4, neighbors=5, max_epochs=2, batch_size=100, seed=2)
    with ad.use_profile("train"):
        m1, info = pretrain_gas(g, sp, cfg)
        m2, _ = pretrain_gas(g, sp, cfg)
    assert m1.trained and 0 <= info["best_score"] <= 1 and len(info["losses"]) == info["epochs"]
    assert m1.temperature == cfg.temperature(info["best_epoch"])
    for k, v in m1.state_dict().items():
        assert np.array_equal(v, m2.state_dict()[k])


@pytest.fixture(scope="module")
def planted_gas():
    g = synth_generate(200, 4000, 5, seed=0)
    cfg = GasConfig(d_node=16, d_time=16, neighbors=10, lr=0.01, batch_size=50, max_epochs=15, patience=5)
    with ad.use_profile("train"):
        gas, info = pretrain_gas(g, chrono_split(g), cfg)
    return g, gas, info


def test_pretraining_on_planted_graph(planted_gas):
    _, _, info = planted_gas
    assert info["best_score"] > 0.75


def probe_loss(model, g, ids):
    from dps.graph_store import sample_negatives

    neg = sample_negatives(g, g.src[ids], g.dst[ids], np.random.default_rng(99))
    with ad.no_grad():
        pos = model.predict(g, g.src[ids], g.dst[ids], g.ts[ids], 10).data
        bad = model.predict(g, g.src[ids], neg, g.ts[ids], 10).data
    return float(np.mean(-np.log(pos) - np.log(1 - bad)))


def test_one_epoch_lowers_loss():
    g = synth_generate(200, 4000, 5, seed=0)
    sp = chrono_split(g)
    cfg = GasConfig(d_node=16, d_time=16, neighbors=10, lr=0.01, batch_size=50, max_epochs=1)
    with ad.use_profile("train"):
        fresh = GasModel(g.num_nodes, 0, 16, 16, seed=cfg.seed)
        trained, _ = pretrain_gas(g, sp, cfg)
        assert probe_loss(trained, g, sp.train[::5]) < probe_loss(fresh, g, sp.train[::5])


def test_selected_neighbours_favour_own_community(planted_gas):
    from dps.samplers import GasSampler, UniformSampler

    g, gas, _ = planted_gas
    rng = np.random.default_rng(0)
    q = rng.integers(0, g.num_edges, 10_000)
    nodes, times = g.src[q], g.ts[q]
    rate = {}
    with ad.use_profile("train"):
        for smp in (GasSampler(gas), UniformSampler()):
            nb = smp.sample(g, nodes, times, 3, np.random.default_rng(1))
            rate[smp.name] = (g.community[nb.nbr] == g.community[nodes][:, None])[nb.mask].mean()
    assert rate["GAS"] > rate["uniform"]
