"""Gumbel attention sampling: a one-layer attention network that learns which neighbours to keep.

Candidates are scored by ``(W_Q h_k) . (W_K h_u) / sqrt(d)``. During
pretraining the scores are perturbed with Gumbel noise and divided by a
temperature, the top ``s`` are kept and their renormalised weights
aggregate ``W_V h_k``. At inference selection is the noiseless top ``s``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fusion_model import PredictionHead, TimeKernel, predict_link, time_encode, unique_queries
from .graph_store import ChronoSplit, NeighborSet, TemporalGraph, ragged_candidates, sample_negatives
from .metrics import roc_auc
from .samplers import gumbel_noise, top_per_segment

log = logging.getLogger(__name__)

SCORE_CHUNK = 32768


@dataclass
class GumbelDraw:
    noise: np.ndarray

    @classmethod
    def sample(cls, rng: np.random.Generator, n: int) -> "GumbelDraw":
        return cls(gumbel_noise(rng, n))

    def __len__(self):
        return len(self.noise)


@dataclass
class GasConfig:
    d_node: int = 64
    d_time: int = 64
    neighbors: int = 20
    batch_size: int = 200
    lr: float = 1e-3
    weight_decay: float = 1e-5
    max_epochs: int = 10
    patience: int = 3
    tau_start: float = 1.0
    tau_decay: float = 0.5
    tau_min: float = 0.1
    seed: int = 0

    def temperature(self, epoch: int) -> float:
        return max(self.tau_min, self.tau_start * self.tau_decay ** epoch)


class GasModel:
    def __init__(self, num_nodes: int, feature_dim: int = 0, d_node: int = 64, d_time: int = 64, seed: int = 0):
        rng = np.random.default_rng([seed, 3])
        self.hyper = dict(num_nodes=num_nodes, feature_dim=feature_dim, d_node=d_node, d_time=d_time, seed=seed)
        d_in = d_node + d_time + feature_dim
        self.node_table = ad.parameter(rng.normal(0, 1 / math.sqrt(d_node), (num_nodes, d_node)), "gas.node_table")
        self.time_kernel = TimeKernel(d_time, name="gas.time_kernel")
        self.W_Q = ad.parameter(ad.glorot_init((d_in, d_node), rng), "gas.W_Q")
        self.W_K = ad.parameter(ad.glorot_init((d_in, d_node), rng), "gas.W_K")
        self.W_V = ad.parameter(ad.glorot_init((d_in, d_node), rng), "gas.W_V")
        self.head = PredictionHead(d_node, rng, name="gas.head")
        self.temperature = 1.0
        self.trained = False
        # number of scoring passes; lets callers prove a run never consulted GAS
        self.score_calls = 0

    @property
    def dim(self) -> int:
        return self.W_V.shape[1]

    def parameters(self, include_head: bool = False) -> dict[str, Tensor]:
        out = {t.name: t for t in (self.node_table, self.time_kernel.omega, self.W_Q, self.W_K, self.W_V)}
        if include_head:
            out.update(self.head.parameters())
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.parameters().items()}
        out["gas.temperature"] = np.array([self.temperature])
        out["gas.trained"] = np.array([float(self.trained)])
        return out

    def load_state_dict(self, state) -> None:
        for k, p in self.parameters().items():
            arr = np.asarray(state[k], dtype=p.dtype)
            if arr.shape != p.shape:
                raise ad.ShapeError(f"{k}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()
        self.temperature = float(np.asarray(state["gas.temperature"]).ravel()[0])
        self.trained = bool(np.asarray(state["gas.trained"]).ravel()[0] > 0.5)

    # -- input features -------------------------------------------------
    def anchor_features(self, nodes) -> Tensor:
        """Anchor input: table row, the time code of a zero gap, and a zero interaction-feature block."""
        nodes = np.asarray(nodes)
        zeros_t = np.zeros(len(nodes))
        f = np.zeros((len(nodes), self.hyper["feature_dim"]))
        return ad.concat([ad.gather(self.node_table, nodes), time_encode(self.time_kernel, zeros_t), f], axis=-1)

    def candidate_features(self, nbr, dt, m) -> Tensor:
        return ad.concat([ad.gather(self.node_table, nbr), time_encode(self.time_kernel, dt),
                          np.asarray(m, dtype=self.node_table.dtype)], axis=-1)

    def scores_tensor(self, h_u: Tensor, h_k: Tensor) -> Tensor:
        """Scaled dot products between (B, D) anchors and (B, s, D) candidates."""
        B, s = h_k.shape[0], h_k.shape[1]
        q = ad.matmul(h_k, self.W_Q)
        k = ad.reshape(ad.matmul(h_u, self.W_K), (B, self.dim, 1))
        return ad.mul(ad.reshape(ad.bmm(q, k), (B, s)), 1.0 / math.sqrt(self.dim))

    def score_ragged(self, g: TemporalGraph, nodes, times, seg, pos) -> np.ndarray:
        """Noise-free scores for flattened candidates (no tape)."""
        self.score_calls += 1
        nodes = np.asarray(nodes)
        times = np.asarray(times, dtype=np.float64)
        out = np.empty(len(pos))
        table = self.node_table.data
        omega = self.time_kernel.omega.data
        d_n, d_t = table.shape[1], len(omega)
        W_Q, W_K = self.W_Q.data, self.W_K.data
        # anchor projection: table row, cos(0) = 1 time code, zero feature block
        ku = table[nodes] @ W_K[:d_n] + W_K[d_n:d_n + d_t].sum(axis=0)
        # the score is linear in each input block, so project the anchor back into block space
        back_node = ku @ W_Q[:d_n].T
        back_time = ku @ W_Q[d_n:d_n + d_t].T
        back_feat = ku @ W_Q[d_n + d_t:].T
        scale = 1.0 / math.sqrt(self.dim)
        for a in range(0, len(pos), SCORE_CHUNK):
            p = pos[a:a + SCORE_CHUNK]
            sg = seg[a:a + SCORE_CHUNK]
            dt = (times[sg] - g.adj_ts[p]).astype(table.dtype)
            sc = np.einsum("ij,ij->i", table[g.adj_nbr[p]], back_node[sg])
            sc += np.einsum("ij,ij->i", np.cos(dt[:, None] * omega), back_time[sg])
            if self.hyper["feature_dim"]:
                sc += np.einsum("ij,ij->i", g.features[g.adj_eid[p]].astype(table.dtype), back_feat[sg])
            out[a:a + SCORE_CHUNK] = sc * scale
        return out

    # -- forward --------------------------------------------------------
    def embed(self, g: TemporalGraph, nodes, times, s: int, *, train: bool = False, rng=None) -> Tensor:
        """First-layer embeddings; Gumbel-perturbed selection when ``train``."""
        nodes = np.asarray(nodes, dtype=np.int64)
        times = np.asarray(times, dtype=np.float64)
        un, ut, inv = unique_queries(nodes, times)
        U = len(un)
        seg, pos, _ = ragged_candidates(g, un, ut)
        scores = self.score_ragged(g, un, ut, seg, pos)
        noise = gumbel_noise(rng, len(pos)) if train else np.zeros(len(pos))
        tau = self.temperature
        idx, mask = top_per_segment(seg, (scores + noise) / tau, U, s)
        safe = np.where(mask, idx, 0)
        if len(pos):
            p = pos[safe]
            nbr = np.where(mask, g.adj_nbr[p], un[:, None])
            dt = np.where(mask, ut[:, None] - g.adj_ts[p], 0.0)
            m = g.features[g.adj_eid[p]] * mask[..., None]
            gsel = np.where(mask, noise[safe], 0.0)
        else:
            nbr = np.repeat(un[:, None], s, axis=1)
            dt = np.zeros((U, s))
            m = np.zeros((U, s, g.feature_dim))
            gsel = np.zeros((U, s))
        h_u = self.anchor_features(un)
        h_k = self.candidate_features(nbr, dt, m)
        logits = ad.mul(ad.add(self.scores_tensor(h_u, h_k), gsel), 1.0 / tau)
        alpha = ad.masked_softmax(logits, mask)
        values = ad.matmul(h_k, self.W_V)
        out = ad.reshape(ad.bmm(ad.reshape(alpha, (U, 1, s)), values), (U, self.dim))
        return ad.take(out, inv)

    def predict(self, g, src, dst, times, s: int, *, train=False, rng=None) -> Tensor:
        B = len(src)
        h = self.embed(g, np.concatenate([src, dst]), np.concatenate([times, times]), s, train=train, rng=rng)
        return predict_link(self.head, ad.slice(h, 0, B, axis=0), ad.slice(h, B, 2 * B, axis=0))


# ---------------------------------------------------------------------------
# single-query operations


def _query_tensors(model: GasModel, ns: NeighborSet, edge_feats=None):
    n = len(ns)
    if edge_feats is None:
        edge_feats = np.zeros((n, model.hyper["feature_dim"]))
    dt = ns.anchor_time - np.asarray(ns.ts, dtype=np.float64)
    h_u = model.anchor_features(np.array([ns.anchor_node]))
    h_k = model.candidate_features(np.asarray(ns.nbr)[None, :], dt[None, :], np.asarray(edge_feats)[None])
    return h_u, h_k


def gas_scores(model: GasModel, u: int, t: float, ns: NeighborSet, edge_feats=None) -> np.ndarray:
    """Unnormalised attention score of every interaction in ``ns`` with respect to ``(u, t)``."""
    if len(ns) == 0:
        raise ValueError("gas_scores needs a non-empty neighbour set")
    if ns.anchor_node != u or ns.anchor_time != t:
        ns = NeighborSet(u, t, ns.nbr, ns.ts, ns.eid)
    with ad.no_grad():
        h_u, h_k = _query_tensors(model, ns, edge_feats)
        return model.scores_tensor(h_u, h_k).data[0].astype(np.float64)


def gumbel_attention(p, draw: GumbelDraw, tau: float) -> np.ndarray:
    """``softmax((p + g) / tau)``."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    p = np.asarray(p, dtype=np.float64)
    if len(draw) != len(p):
        raise ValueError("one Gumbel draw per candidate is required")
    z = (p + draw.noise) / tau
    z = np.exp(z - z.max())
    return z / z.sum()


def gas_select(alpha, s: int) -> np.ndarray:
    """Indices of the ``s`` largest weights, ascending; ties favour the lower index."""
    if s < 1:
        raise ValueError("sample size must be >= 1")
    alpha = np.asarray(alpha, dtype=np.float64)
    order = np.lexsort((np.arange(len(alpha)), -alpha))
    return np.sort(order[:s])


def gas_aggregate(model: GasModel, alpha, selected, values) -> Tensor:
    """``sum_k alpha_hat_k W_V h_k`` over the selected candidates, with ``alpha`` renormalised over them.

    ``alpha`` (n,) and ``values`` (n, D) may be tensors so gradients reach
    the scoring parameters.
    """
    selected = np.asarray(selected, dtype=np.int64)
    alpha = alpha if isinstance(alpha, Tensor) else Tensor(np.asarray(alpha, dtype=model.W_V.dtype))
    values = values if isinstance(values, Tensor) else Tensor(np.asarray(values, dtype=model.W_V.dtype))
    a = ad.take(alpha, selected)
    a = ad.div(a, ad.sum(a))
    v = ad.matmul(ad.take(values, selected), model.W_V)
    k = len(selected)
    return ad.reshape(ad.matmul(ad.reshape(a, (1, k)), v), (model.dim,))


def gas_sample(model: GasModel, u: int, t: float, ns: NeighborSet, s: int, edge_feats=None):
    """Inference-mode selection: the ``s`` highest-scoring interactions, no noise."""
    if not model.trained:
        raise ValueError("gas_sample needs a pretrained model")
    entries = ns.entries
    if len(entries) <= s:
        return entries
    idx = gas_select(gas_scores(model, u, t, ns, edge_feats), s)
    return [entries[i] for i in idx]


# ---------------------------------------------------------------------------
# pretraining


def pretrain_gas(g: TemporalGraph, split: ChronoSplit, config: GasConfig | None = None,
                 progress=None) -> tuple[GasModel, dict]:
    """Train the one-layer sampler on temporal link prediction; the local head is discarded afterwards."""
    from .trainer import iterate_batches, link_loss, predict_in_batches, run_early_stopping

    cfg = config or GasConfig()
    if len(split.train) == 0:
        raise ValueError("cannot pretrain GAS on an empty training set")
    model = GasModel(g.num_nodes, g.feature_dim, cfg.d_node, cfg.d_time, seed=cfg.seed)
    params = list(model.parameters(include_head=True).values())
    opt = ad.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 4])
    val = split.val if len(split.val) else split.train[-max(1, len(split.train) // 10):]
    val_neg = sample_negatives(g, g.src[val], g.dst[val], np.random.default_rng([cfg.seed, 5]))
    losses = []

    def train_epoch(epoch):
        model.temperature = cfg.temperature(epoch)
        total, n = 0.0, 0
        for batch in iterate_batches(split.train, cfg.batch_size, rng):
            src, dst, t = g.src[batch], g.dst[batch], g.ts[batch]
            neg = sample_negatives(g, src, dst, rng)
            p = model.predict(g, np.concatenate([src, src]), np.concatenate([dst, neg]),
                              np.concatenate([t, t]), cfg.neighbors, train=True, rng=rng)
            B = len(batch)
            loss = link_loss(ad.slice(p, 0, B, axis=0), ad.slice(p, B, 2 * B, axis=0))
            ad.backward(loss)
            opt.step()
            total += float(loss.data) * B
            n += B
        losses.append(total / n)
        return losses[-1]

    def validate():
        def fn(s, d, t):
            return model.predict(g, s, d, t, cfg.neighbors).data
        pos = predict_in_batches(fn, g.src[val], g.dst[val], g.ts[val], cfg.batch_size)
        neg = predict_in_batches(fn, g.src[val], val_neg, g.ts[val], cfg.batch_size)
        return roc_auc(pos, neg)

    def get_state():
        return {k: v.data.copy() for k, v in model.parameters(include_head=True).items()}

    def set_state(state):
        for k, v in model.parameters(include_head=True).items():
            v.data = state[k].copy()

    result = run_early_stopping(train_epoch, validate, get_state, set_state,
                                patience=cfg.patience, max_epochs=cfg.max_epochs, progress=progress)
    model.trained = True
    model.temperature = cfg.temperature(result["best_epoch"])
    info = dict(result, losses=losses, config=asdict(cfg))
    log.info("GAS pretraining done: best val AUC %.4f at epoch %d", result["best_score"], result["best_epoch"])
    return model, info
