import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dps import autodiff as ad
from dps.fusion_model import (MODES, ConvLayer, DpsModel, FusionLayer, PredictionHead, TimeKernel, conv_forward,
                              edge_feature, embed_node, fuse, predict_link, time_encode, unique_queries)
from dps.gas import GasModel
from dps.graph_store import TemporalGraph, synth_generate
from dps.samplers import GasSampler, TdsSampler, UniformSampler
from dps.tds import DecayRates


@pytest.fixture(autouse=True)
def float64():
    with ad.use_profile("test"):
        yield


def test_time_encode_zero_gap_is_ones():
    k = TimeKernel(5)
    out = time_encode(k, np.zeros((2, 3)))
    assert out.shape == (2, 3, 5) and np.allclose(out.data, 1.0)
    with pytest.raises(ValueError):
        TimeKernel(0)


def test_edge_feature_layout_and_mask():
    k = TimeKernel(2)
    h = ad.Tensor(np.ones((1, 2, 3)))
    f = edge_feature(k, h, np.zeros((1, 2)), np.full((1, 2, 1), 7.0), np.array([[True, False]]))
    assert f.shape == (1, 2, 6)
    assert np.allclose(f.data[0, 0], [1, 1, 1, 1, 1, 7]) and np.all(f.data[0, 1] == 0)
    with pytest.raises(ad.ShapeError):
        edge_feature(k, h, np.zeros((1, 3)), np.zeros((1, 3, 1)))


def test_conv_attention_respects_mask():
    rng = np.random.default_rng(0)
    layer = ConvLayer(4, 6, 2, rng, "c")
    feats = ad.Tensor(rng.normal(size=(3, 5, 6)))
    mask = np.array([[1, 1, 0, 0, 0], [1, 1, 1, 1, 1], [0, 0, 0, 0, 0]], bool)
    out, attn = conv_forward(layer, ad.Tensor(rng.normal(size=(3, 4))), feats, mask, return_attention=True)
    assert out.shape == (3, 4)
    for a in attn:
        assert np.allclose(a.data[:2].sum(-1), 1) and np.all(a.data[~mask] == 0)
    assert np.all(out.data[2] == 0)
    with pytest.raises(ValueError):
        ConvLayer(6, 6, 4, rng, "bad")


def test_fusion_of_identical_branches_is_identity():
    rng = np.random.default_rng(1)
    fl = FusionLayer(4, rng)
    h = ad.Tensor(rng.normal(size=(5, 4)))
    out, alpha, _ = fuse(fl, h, h, return_weights=True)
    assert np.allclose(alpha.data.sum(-1), 1) and np.allclose(out.data, h.data)
    with pytest.raises(ad.ShapeError):
        fuse(fl, h, ad.Tensor(np.ones((5, 3))))


def test_fusion_weight_follows_scores():
    rng = np.random.default_rng(2)
    fl = FusionLayer(3, rng)
    fl.b["TDS"].data[:] = 50.0 * np.sign(fl.q.data)
    _, alpha, _ = fuse(fl, ad.Tensor(np.zeros((1, 3))), ad.Tensor(np.zeros((1, 3))), return_weights=True)
    assert alpha.data[0, 0] > 0.5


def test_prediction_head_range_and_shape():
    rng = np.random.default_rng(3)
    head = PredictionHead(4, rng)
    p = predict_link(head, ad.Tensor(rng.normal(size=(6, 4))), ad.Tensor(rng.normal(size=(6, 4))))
    assert p.shape == (6,) and np.all((p.data > 0) & (p.data < 1))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_unique_queries_inverse(seed):
    rng = np.random.default_rng(seed)
    n = rng.integers(0, 4, 30)
    t = rng.integers(0, 3, 30).astype(float)
    un, ut, inv = unique_queries(n, t)
    assert np.array_equal(un[inv], n) and np.array_equal(ut[inv], t)
    assert len(set(zip(un.tolist(), ut.tolist()))) == len(un)


def samplers_for(g, mode):
    rates = DecayRates(np.full(g.num_nodes, 0.5), 0.5, np.ones(g.num_nodes, bool))
    gas = GasModel(g.num_nodes, g.feature_dim, d_node=8, d_time=4)
    gas.trained = True
    return {"DPS": [TdsSampler(rates), GasSampler(gas)], "TDS_only": [TdsSampler(rates)],
            "GAS_only": [GasSampler(gas)], "no_fusion": [TdsSampler(rates), GasSampler(gas)],
            "uniform": [UniformSampler(), UniformSampler()]}[mode]


@pytest.mark.parametrize("mode", MODES)
def test_modes_forward_and_parameter_sets(mode):
    g = synth_generate(20, 200, 2, seed=0)
    model = DpsModel(20, 0, d_node=8, d_time=4, layers=2, heads=2, neighbors=3, mode=mode)
    p = model.predict(g, [0, 1], [2, 3], [g.ts[-1]] * 2, samplers_for(g, mode), rng=np.random.default_rng(0))
    assert p.shape == (2,)
    names = set(model.parameters())
    assert ("fusion.q" in names) == (mode in ("DPS", "uniform"))
    assert ("merge.W" in names) == (mode == "no_fusion")


def test_wrong_sampler_count_and_mode():
    g = synth_generate(20, 200, 2, seed=0)
    model = DpsModel(20, 0, d_node=8, d_time=4, layers=1, neighbors=3)
    with pytest.raises(ValueError):
        model.node_embedding(g, [0], [1.0], samplers_for(g, "TDS_only"))
    with pytest.raises(ValueError):
        DpsModel(5, mode="random")
    with pytest.raises(ValueError):
        DpsModel(5, layers=0)


def test_embedding_ignores_future_interactions():
    g = synth_generate(20, 300, 2, seed=4)
    t = float(g.ts[150])
    keep = g.ts < t
    past = TemporalGraph(20, g.src[keep], g.dst[keep], g.ts[keep])
    model = DpsModel(20, 0, d_node=8, d_time=4, layers=2, neighbors=4)
    a = embed_node(model, g, UniformSampler(), 3, t, 2, rng=np.random.default_rng(5))
    b = embed_node(model, past, UniformSampler(), 3, t, 2, rng=np.random.default_rng(5))
    assert np.allclose(a, b, atol=1e-12)


def test_state_dict_round_trip():
    a = DpsModel(10, 0, d_node=8, d_time=4, layers=1, seed=1)
    b = DpsModel(10, 0, d_node=8, d_time=4, layers=1, seed=2)
    b.load_state_dict(a.state_dict())
    for k, v in a.state_dict().items():
        assert np.array_equal(v, b.state_dict()[k])
    with pytest.raises(KeyError):
        b.load_state_dict({})
