"""Attention convolution over sampled temporal neighbourhoods, sampler fusion and link head."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph_store import TemporalGraph

MODES = ("DPS", "TDS_only", "GAS_only", "no_fusion", "uniform")


@dataclass
class Neighborhood:
    """Fixed-width sampled neighbourhoods for a batch of queries (padding has ``mask`` False)."""

    nbr: np.ndarray
    ts: np.ndarray
    eid: np.ndarray
    mask: np.ndarray

    @property
    def width(self) -> int:
        return self.nbr.shape[1]


def _glorot(shape, rng, name):
    return ad.parameter(ad.glorot_init(shape, rng), name=name)


class TimeKernel:
    def __init__(self, dim: int, name: str = "time_kernel"):
        if dim <= 0:
            raise ValueError("time encoding dimension must be positive")
        self.omega = ad.parameter(1.0 / 10 ** np.linspace(0, 9, dim), name=f"{name}.omega")

    @property
    def dim(self) -> int:
        return self.omega.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {self.omega.name: self.omega}


def time_encode(kernel: TimeKernel, dt) -> Tensor:
    """``cos(omega_k * dt)`` along a new trailing axis."""
    dt = np.asarray(dt, dtype=kernel.omega.dtype)
    return ad.cos(ad.mul(dt[..., None], kernel.omega))


def edge_feature(kernel: TimeKernel, h_nbr: Tensor, dt, m, mask=None) -> Tensor:
    """Interaction embedding ``[h_v, cos(omega dt), m]``; masked slots become zero rows."""
    dt = np.asarray(dt)
    m = np.asarray(m, dtype=h_nbr.dtype)
    if m.shape[:-1] != dt.shape or h_nbr.shape[:-1] != dt.shape:
        raise ad.ShapeError(f"edge_feature: leading shapes differ: h {h_nbr.shape}, dt {dt.shape}, m {m.shape}")
    out = ad.concat([h_nbr, time_encode(kernel, dt), m], axis=-1)
    if mask is not None:
        out = ad.mul(out, np.asarray(mask, dtype=h_nbr.dtype)[..., None])
    return out


class ConvLayer:
    """Multi-head attention over neighbour interaction embeddings."""

    def __init__(self, d_model: int, d_edge: int, heads: int, rng, name: str):
        if heads not in (1, 2, 4) or d_model % heads:
            raise ValueError(f"heads must be 1, 2 or 4 and divide d_model={d_model}, got {heads}")
        self.heads = heads
        self.d_model = d_model
        self.W_Q = _glorot((d_model, d_model), rng, f"{name}.W_Q")
        self.W_K = _glorot((d_edge, d_model), rng, f"{name}.W_K")
        self.W_V = _glorot((d_edge, d_model), rng, f"{name}.W_V")
        self.W_O = _glorot((d_model, d_model), rng, f"{name}.W_O")

    def parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in (self.W_Q, self.W_K, self.W_V, self.W_O)}


def conv_forward(layer: ConvLayer, h_u: Tensor, feats: Tensor, mask, *, dropout: float = 0.0,
                 train: bool = False, rng=None, return_attention: bool = False):
    """Attend from ``h_u`` (B, d) over ``feats`` (B, s, D); rows with no unmasked slot give zeros."""
    B, s = feats.shape[0], feats.shape[1]
    mask = np.asarray(mask, dtype=bool)
    q = ad.matmul(h_u, layer.W_Q)
    k = ad.matmul(feats, layer.W_K)
    v = ad.matmul(feats, layer.W_V)
    dh = layer.d_model // layer.heads
    outs, attn = [], []
    for h in range(layer.heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = ad.reshape(ad.slice(q, lo, hi), (B, dh, 1))
        logits = ad.reshape(ad.bmm(ad.slice(k, lo, hi), qh), (B, s))
        alpha = ad.masked_softmax(ad.mul(logits, 1.0 / math.sqrt(dh)), mask)
        attn.append(alpha)
        alpha = ad.dropout(alpha, dropout, train, rng)
        outs.append(ad.reshape(ad.bmm(ad.reshape(alpha, (B, 1, s)), ad.slice(v, lo, hi)), (B, dh)))
    out = ad.matmul(ad.concat(outs, axis=-1) if len(outs) > 1 else outs[0], layer.W_O)
    return (out, attn) if return_attention else out


class FusionLayer:
    def __init__(self, d_model: int, rng, name: str = "fusion"):
        self.q = ad.parameter(rng.uniform(-1, 1, d_model) / math.sqrt(d_model), name=f"{name}.q")
        self.W = {
            "TDS": _glorot((d_model, d_model), rng, f"{name}.W_TDS"),
            "GAS": _glorot((d_model, d_model), rng, f"{name}.W_GAS"),
        }
        self.b = {
            "TDS": ad.parameter(np.zeros(d_model), name=f"{name}.b_TDS"),
            "GAS": ad.parameter(np.zeros(d_model), name=f"{name}.b_GAS"),
        }

    def parameters(self) -> dict[str, Tensor]:
        ts = [self.q, self.W["TDS"], self.W["GAS"], self.b["TDS"], self.b["GAS"]]
        return {t.name: t for t in ts}

    def branch_score(self, key: str, h: Tensor) -> Tensor:
        z = ad.sigmoid(ad.add(ad.matmul(h, self.W[key]), self.b[key]))
        return ad.sum(ad.mul(z, self.q), axis=-1, keepdims=True)


def fuse(fusion: FusionLayer, h_tds: Tensor, h_gas: Tensor, return_weights: bool = False):
    """Softmax-weighted sum of the two sampler embeddings."""
    if h_tds.shape != h_gas.shape:
        raise ad.ShapeError(f"fuse: shapes differ {h_tds.shape} vs {h_gas.shape}")
    w = ad.concat([fusion.branch_score("TDS", h_tds), fusion.branch_score("GAS", h_gas)], axis=-1)
    alpha = ad.masked_softmax(w)
    out = ad.add(ad.mul(ad.slice(alpha, 0, 1), h_tds), ad.mul(ad.slice(alpha, 1, 2), h_gas))
    return (out, alpha, w) if return_weights else out


class PredictionHead:
    def __init__(self, d_model: int, rng, name: str = "head"):
        self.W_u = _glorot((d_model, d_model), rng, f"{name}.W_u")
        self.W_v = _glorot((d_model, d_model), rng, f"{name}.W_v")
        self.W = _glorot((d_model, 1), rng, f"{name}.W")

    def parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in (self.W_u, self.W_v, self.W)}


def predict_link(head: PredictionHead, h_u: Tensor, h_v: Tensor) -> Tensor:
    """``sigmoid(W relu(W_u h_u + W_v h_v))`` for each row; shape (B,)."""
    if h_u.shape != h_v.shape:
        raise ad.ShapeError(f"predict_link: shapes differ {h_u.shape} vs {h_v.shape}")
    z = ad.relu(ad.add(ad.matmul(h_u, head.W_u), ad.matmul(h_v, head.W_v)))
    out = ad.sigmoid(ad.matmul(z, head.W))
    return ad.reshape(out, (h_u.shape[0],))


def unique_queries(nodes: np.ndarray, times: np.ndarray):
    """Distinct (node, time) pairs and the inverse map back to the input order."""
    nodes = np.asarray(nodes, dtype=np.int64)
    times = np.asarray(times, dtype=np.float64)
    order = np.lexsort((times, nodes))
    n, t = nodes[order], times[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = (n[1:] != n[:-1]) | (t[1:] != t[:-1])
    inv = np.empty(len(order), dtype=np.int64)
    inv[order] = np.cumsum(first) - 1
    return n[first], t[first], inv


class DpsModel:
    """Node table, time kernel, shared conv layers, sampler fusion and link head."""

    def __init__(self, num_nodes: int, feature_dim: int = 0, *, d_node: int = 64, d_time: int = 64,
                 layers: int = 2, heads: int = 2, neighbors: int = 20, dropout: float = 0.1,
                 mode: str = "DPS", seed: int = 0):
        if mode not in MODES:
            raise ValueError(f"unknown sampler mode {mode!r}; expected one of {MODES}")
        if layers < 1:
            raise ValueError("need at least one convolution layer")
        self.hyper = dict(num_nodes=num_nodes, feature_dim=feature_dim, d_node=d_node, d_time=d_time,
                          layers=layers, heads=heads, neighbors=neighbors, dropout=dropout, mode=mode,
                          seed=seed)
        rng = np.random.default_rng([seed, 1])
        self.node_table = ad.parameter(rng.normal(0, 1 / math.sqrt(d_node), (num_nodes, d_node)), "node_table")
        self.time_kernel = TimeKernel(d_time)
        d_edge = d_node + d_time + feature_dim
        self.conv = [ConvLayer(d_node, d_edge, heads, rng, f"conv{l}") for l in range(layers)]
        self.fusion = FusionLayer(d_node, rng)
        self.merge = _glorot((2 * d_node, d_node), rng, "merge.W")
        self.head = PredictionHead(d_node, rng)

    # -- bookkeeping ----------------------------------------------------
    @property
    def mode(self) -> str:
        return self.hyper["mode"]

    @property
    def branches(self) -> tuple[str, ...]:
        return {"DPS": ("TDS", "GAS"), "TDS_only": ("TDS",), "GAS_only": ("GAS",),
                "no_fusion": ("TDS", "GAS"), "uniform": ("TDS", "GAS")}[self.mode]

    def parameters(self) -> dict[str, Tensor]:
        out = {self.node_table.name: self.node_table}
        out.update(self.time_kernel.parameters())
        for c in self.conv:
            out.update(c.parameters())
        if self.mode in ("DPS", "uniform"):
            out.update(self.fusion.parameters())
        if self.mode == "no_fusion":
            out[self.merge.name] = self.merge
        out.update(self.head.parameters())
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=p.dtype)
            if arr.shape != p.shape:
                raise ad.ShapeError(f"{k}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    # -- forward --------------------------------------------------------
    def embed(self, g: TemporalGraph, nodes, times, sampler, layer: int, *, train=False, rng=None) -> Tensor:
        """``h_u^layer(t)`` for each (node, time), sampling with ``sampler`` at every hop."""
        nodes = np.asarray(nodes, dtype=np.int64)
        times = np.asarray(times, dtype=np.float64)
        if layer == 0:
            return ad.gather(self.node_table, nodes)
        s = self.hyper["neighbors"]
        nb = sampler.sample(g, nodes, times, s, rng)
        B, w = nb.nbr.shape
        q_nodes = np.concatenate([nodes, nb.nbr.ravel()])
        q_times = np.concatenate([times, nb.ts.ravel()])
        un, ut, inv = unique_queries(q_nodes, q_times)
        h = ad.take(self.embed(g, un, ut, sampler, layer - 1, train=train, rng=rng), inv)
        d = self.node_table.shape[1]
        h_self = ad.slice(h, 0, B, axis=0)
        h_nbr = ad.reshape(ad.slice(h, B, B + B * w, axis=0), (B, w, d))
        dt = np.where(nb.mask, times[:, None] - nb.ts, 0.0)
        if g.num_edges:
            m = g.features[nb.eid] * nb.mask[..., None]
        else:
            m = np.zeros((B, w, g.feature_dim))
        feats = edge_feature(self.time_kernel, h_nbr, dt, m, nb.mask)
        return conv_forward(self.conv[layer - 1], h_self, feats, nb.mask,
                            dropout=self.hyper["dropout"], train=train, rng=rng)

    def node_embedding(self, g: TemporalGraph, nodes, times, samplers, *, train=False, rng=None) -> Tensor:
        """Final temporal embedding: per-branch embeddings combined according to the mode."""
        L = self.hyper["layers"]
        hs = [self.embed(g, nodes, times, samp, L, train=train, rng=rng) for samp in samplers]
        if len(hs) != len(self.branches):
            raise ValueError(f"mode {self.mode} needs {len(self.branches)} samplers, got {len(hs)}")
        if self.mode in ("DPS", "uniform"):
            h = fuse(self.fusion, hs[0], hs[1])
        elif self.mode == "no_fusion":
            h = ad.matmul(ad.concat(hs, axis=-1), self.merge)
        else:
            h = hs[0]
        return ad.dropout(h, self.hyper["dropout"], train, rng)

    def predict(self, g, src, dst, times, samplers, *, train=False, rng=None) -> Tensor:
        src = np.asarray(src)
        B = len(src)
        h = self.node_embedding(g, np.concatenate([src, dst]), np.concatenate([times, times]), samplers,
                                train=train, rng=rng)
        return predict_link(self.head, ad.slice(h, 0, B, axis=0), ad.slice(h, B, 2 * B, axis=0))


def embed_node(model: DpsModel, g: TemporalGraph, sampler, u: int, t: float, layer: int, rng=None) -> np.ndarray:
    """Single-query convenience wrapper around :meth:`DpsModel.embed` (inference mode)."""
    with ad.no_grad():
        return model.embed(g, np.array([u]), np.array([t]), sampler, layer, rng=rng).data[0]
