"""Finite-difference checks for every differentiable piece of the engine and model.

Each case builds a scalar loss from float64 parameters. The analytic
gradient from :func:`autodiff.backward` is compared with central
differences, using the norm-wise relative error
``|g_a - g_n| / max(|g_a|, |g_n|, 1e-12)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .fusion_model import ConvLayer, DpsModel, FusionLayer, PredictionHead, TimeKernel, conv_forward, edge_feature, fuse, predict_link, time_encode
from .gas import GasModel, gas_aggregate
from .graph_store import TemporalGraph
from .samplers import TdsSampler, UniformSampler
from .tds import DecayRates


@dataclass
class GradResult:
    name: str
    rel_error: float
    n_params: int
    seconds: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.rel_error < self.tol)


def analytic_grad(f, params) -> list[np.ndarray]:
    ad.clear_tape()
    for p in params:
        p.grad = None
    ad.backward(f())
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def numeric_grad(f, params, h: float = 1e-5) -> list[np.ndarray]:
    out = []
    with ad.no_grad():
        for p in params:
            g = np.zeros_like(p.data)
            flat, gflat = p.data.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                up = float(f().data)
                flat[i] = old - h
                down = float(f().data)
                flat[i] = old
                gflat[i] = (up - down) / (2 * h)
            out.append(g)
    return out


def relative_error(a: list[np.ndarray], n: list[np.ndarray]) -> float:
    a = np.concatenate([x.ravel() for x in a])
    n = np.concatenate([x.ravel() for x in n])
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-12))


def check(name: str, f, params, h: float = 1e-5, tol: float = 1e-4) -> GradResult:
    t0 = time.perf_counter()
    err = relative_error(analytic_grad(f, params), numeric_grad(f, params, h))
    return GradResult(name, err, int(sum(p.data.size for p in params)), time.perf_counter() - t0, tol)


def _weighted(out: ad.Tensor, rng) -> ad.Tensor:
    """Random projection to a scalar so every output entry reaches the gradient."""
    return ad.sum(ad.mul(out, rng.normal(size=out.shape)))


def _away_from(x, points, margin=0.05):
    for c in points:
        close = np.abs(x - c) < margin
        x = np.where(close, c + np.sign(x - c + 1e-12) * margin, x)
    return x


# ---------------------------------------------------------------------------
# cases; each returns (loss_fn, params)


def _op_cases(rng):
    P = ad.parameter
    cases = {}
    a, b = P(rng.normal(size=(3, 4))), P(rng.normal(size=(4,)))
    cases["add"] = (lambda: _weighted(ad.add(a, b), rng_fixed(1)), [a, b])
    cases["sub"] = (lambda: _weighted(ad.sub(a, b), rng_fixed(2)), [a, b])
    cases["mul"] = (lambda: _weighted(ad.mul(a, b), rng_fixed(3)), [a, b])
    d = P(rng.uniform(0.5, 2.0, size=(4,)) * rng.choice([-1, 1], 4))
    cases["div"] = (lambda: _weighted(ad.div(a, d), rng_fixed(4)), [a, d])
    r = P(_away_from(rng.normal(size=(3, 4)), [0.0]))
    cases["relu"] = (lambda: _weighted(ad.relu(r), rng_fixed(5)), [r])
    cases["sigmoid"] = (lambda: _weighted(ad.sigmoid(a), rng_fixed(6)), [a])
    cases["exp"] = (lambda: _weighted(ad.exp(a), rng_fixed(7)), [a])
    pos = P(rng.uniform(0.2, 3.0, size=(3, 4)))
    cases["log"] = (lambda: _weighted(ad.log(pos), rng_fixed(8)), [pos])
    cases["cos"] = (lambda: _weighted(ad.cos(a), rng_fixed(9)), [a])
    c = P(_away_from(rng.normal(size=(3, 4)), [-0.5, 0.5]))
    cases["clip"] = (lambda: _weighted(ad.clip(c, -0.5, 0.5), rng_fixed(10)), [c])
    w = P(rng.normal(size=(4, 5)))
    x3 = P(rng.normal(size=(2, 3, 4)))
    cases["matmul"] = (lambda: _weighted(ad.matmul(a, w), rng_fixed(11)), [a, w])
    cases["matmul_rank3"] = (lambda: _weighted(ad.matmul(x3, w), rng_fixed(12)), [x3, w])
    y3 = P(rng.normal(size=(2, 4, 2)))
    cases["bmm"] = (lambda: _weighted(ad.bmm(x3, y3), rng_fixed(13)), [x3, y3])
    e = P(rng.normal(size=(3, 2)))
    cases["concat"] = (lambda: _weighted(ad.concat([a, e], axis=-1), rng_fixed(14)), [a, e])
    cases["concat_axis0"] = (lambda: _weighted(ad.concat([a, ad.mul(a, 2.0)], axis=0), rng_fixed(15)), [a])
    cases["slice"] = (lambda: _weighted(ad.slice(a, 1, 3), rng_fixed(16)), [a])
    cases["slice_axis0"] = (lambda: _weighted(ad.slice(x3, 0, 1, axis=0), rng_fixed(17)), [x3])
    cases["reshape"] = (lambda: _weighted(ad.reshape(x3, (6, 4)), rng_fixed(18)), [x3])
    cases["sum"] = (lambda: _weighted(ad.sum(x3, axis=1), rng_fixed(19)), [x3])
    cases["sum_all"] = (lambda: ad.mul(ad.sum(ad.mul(a, a)), 0.5), [a])
    cases["mean"] = (lambda: _weighted(ad.mean(x3, axis=-1, keepdims=True), rng_fixed(20)), [x3])
    table = P(rng.normal(size=(5, 3)))
    idx = np.array([0, 2, 2, 4, 0, 1])
    cases["gather"] = (lambda: _weighted(ad.gather(table, idx), rng_fixed(21)), [table])
    cases["take"] = (lambda: _weighted(ad.take(a, np.array([2, 0, 2])), rng_fixed(22)), [a])
    mask = np.array([[True, True, False, True], [False, False, False, False], [True, False, True, True]])
    cases["masked_softmax"] = (lambda: _weighted(ad.masked_softmax(a, mask), rng_fixed(23)), [a])
    cases["softmax_unmasked"] = (lambda: _weighted(ad.masked_softmax(x3), rng_fixed(24)), [x3])
    cases["dropout"] = (lambda: _weighted(ad.dropout(a, 0.3, True, rng_fixed(25)), rng_fixed(26)), [a])
    return cases


def rng_fixed(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 99])


def _composite_case(rng, n_ops: int = 8):
    """A random chain of ``n_ops`` shape-preserving ops on a (3, 4) input."""
    x = ad.parameter(rng.uniform(0.3, 1.5, size=(3, 4)))
    w = ad.parameter(rng.normal(size=(4, 4)) * 0.5)
    choices = ["add", "mul", "sigmoid", "exp_small", "matmul", "cos", "softmax", "log_sig"]
    plan = [choices[i] for i in rng.integers(0, len(choices), n_ops)]

    def f():
        h = x
        for op in plan:
            if op == "add":
                h = ad.add(h, x)
            elif op == "mul":
                h = ad.mul(h, x)
            elif op == "sigmoid":
                h = ad.sigmoid(h)
            elif op == "exp_small":
                h = ad.exp(ad.mul(ad.sigmoid(h), 0.5))
            elif op == "matmul":
                h = ad.matmul(h, w)
            elif op == "cos":
                h = ad.cos(h)
            elif op == "softmax":
                h = ad.masked_softmax(h)
            else:
                h = ad.log(ad.add(ad.sigmoid(h), 0.1))
        return _weighted(h, rng_fixed(30))

    return f, [x, w], plan


def _model_cases(rng):
    cases = {}
    d, d_t, s, B = 4, 3, 3, 2
    kernel = TimeKernel(d_t, name="gc.kernel")
    kernel.omega.data[:] = rng.uniform(0.2, 1.5, d_t)
    dt = rng.uniform(0, 3, (B, s))
    cases["time_encode"] = (lambda: _weighted(time_encode(kernel, dt), rng_fixed(40)), [kernel.omega])

    h_nbr = ad.parameter(rng.normal(size=(B, s, d)))
    m = rng.normal(size=(B, s, 2))
    mask = np.array([[True, True, False], [True, False, False]])
    cases["edge_feature"] = (lambda: _weighted(edge_feature(kernel, h_nbr, dt, m, mask), rng_fixed(41)),
                             [h_nbr, kernel.omega])

    layer = ConvLayer(d, d + d_t + 2, 2, rng, "gc.conv")
    h_u = ad.parameter(rng.normal(size=(B, d)))
    feats_in = ad.parameter(rng.normal(size=(B, s, d + d_t + 2)))
    conv_mask = np.array([[True, True, False], [False, False, False]])

    def conv_loss():
        return _weighted(conv_forward(layer, h_u, feats_in, conv_mask, dropout=0.2, train=True,
                                      rng=rng_fixed(42)), rng_fixed(43))

    cases["conv_layer"] = (conv_loss, [h_u, feats_in] + list(layer.parameters().values()))

    fusion = FusionLayer(d, rng, "gc.fusion")
    h1, h2 = ad.parameter(rng.normal(size=(B, d))), ad.parameter(rng.normal(size=(B, d)))
    cases["fusion_layer"] = (lambda: _weighted(fuse(fusion, h1, h2), rng_fixed(44)),
                             [h1, h2] + list(fusion.parameters().values()))

    head = PredictionHead(d, rng, "gc.head")
    hu, hv = ad.parameter(rng.normal(size=(3, d))), ad.parameter(rng.normal(size=(3, d)))
    cases["prediction_head"] = (lambda: _weighted(predict_link(head, hu, hv), rng_fixed(45)),
                                [hu, hv] + list(head.parameters().values()))

    from .trainer import link_loss

    pp, pn = ad.parameter(rng.uniform(0.1, 0.9, 5)), ad.parameter(rng.uniform(0.1, 0.9, 5))
    cases["link_loss"] = (lambda: link_loss(pp, pn), [pp, pn])

    gm = GasModel(6, 0, d_node=d, d_time=d_t, seed=1)
    alpha = ad.parameter(rng.uniform(0.05, 1.0, 5))
    values = ad.parameter(rng.normal(size=(5, d + d_t)))
    sel = np.array([0, 2, 3])
    cases["gas_aggregate"] = (lambda: _weighted(gas_aggregate(gm, alpha, sel, values), rng_fixed(46)),
                              [alpha, values, gm.W_V])

    anchors = np.array([0, 3])
    nbr = np.array([[1, 2, 4], [5, 0, 1]])

    def gas_scores_loss():
        h_k = gm.candidate_features(nbr, dt, np.zeros((B, s, 0)))
        return _weighted(gm.scores_tensor(gm.anchor_features(anchors), h_k), rng_fixed(47))

    cases["gas_scores"] = (gas_scores_loss, list(gm.parameters().values()))
    return cases


def tiny_graph(num_nodes: int = 10, num_edges: int = 40, feature_dim: int = 2, seed: int = 0) -> TemporalGraph:
    rng = np.random.default_rng([seed, 50])
    src = rng.integers(0, num_nodes, num_edges)
    dst = (src + rng.integers(1, num_nodes, num_edges)) % num_nodes
    ts = np.sort(rng.uniform(0, 5, num_edges))
    return TemporalGraph(num_nodes, src, dst, ts, rng.normal(size=(num_edges, feature_dim)))


def _end_to_end_case(mode: str = "DPS"):
    """Two-layer DPS link loss on a 10-node graph; sampler draws and dropout masks are pinned."""
    from .trainer import link_loss

    g = tiny_graph()
    model = DpsModel(g.num_nodes, g.feature_dim, d_node=4, d_time=3, layers=2, heads=2, neighbors=3,
                     dropout=0.1, mode=mode, seed=3)
    rates = DecayRates(np.full(g.num_nodes, 0.5), 0.5, np.ones(g.num_nodes, dtype=bool))
    gas = GasModel(g.num_nodes, g.feature_dim, d_node=4, d_time=3, seed=4)
    gas.trained = True
    from .samplers import GasSampler

    samplers = {"DPS": [TdsSampler(rates), GasSampler(gas)], "no_fusion": [TdsSampler(rates), GasSampler(gas)],
                "uniform": [UniformSampler(), UniformSampler()]}[mode]
    src, dst, neg = np.array([0, 4, 7]), np.array([1, 5, 2]), np.array([3, 9, 6])
    t = np.array([3.0, 4.0, 4.8])

    def f():
        p = model.predict(g, np.concatenate([src, src]), np.concatenate([dst, neg]), np.concatenate([t, t]),
                          samplers, train=True, rng=rng_fixed(60))
        return link_loss(ad.slice(p, 0, 3, axis=0), ad.slice(p, 3, 6, axis=0))

    return f, list(model.parameters().values())


def run_suite(seed: int = 0, h: float = 1e-5, tol: float = 1e-4, progress=None) -> list[GradResult]:
    """Every case at float64; returns one result per case."""
    results = []
    with ad.use_profile("test"):
        rng = np.random.default_rng([seed, 70])
        cases = dict(_op_cases(rng))
        cases.update(_model_cases(rng))
        f, params, plan = _composite_case(rng)
        cases["composite_" + "-".join(plan)] = (f, params)
        for mode in ("DPS", "no_fusion"):
            cases[f"end_to_end_2layer_{mode}"] = _end_to_end_case(mode)
        for name, (f, params) in cases.items():
            res = check(name, f, params, h, tol)
            results.append(res)
            if progress:
                progress(res)
        ad.clear_tape()
    return results
