"""Batch neighbourhood samplers feeding the convolution layers.

Every sampler turns a batch of (node, time) queries into a fixed-width
:class:`Neighborhood`. Repeated queries in one call share one draw.
"""

from __future__ import annotations

import numpy as np

from .fusion_model import Neighborhood, unique_queries
from .graph_store import TemporalGraph, ragged_candidates


def top_per_segment(seg: np.ndarray, keys: np.ndarray, num_segments: int, s: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the ``s`` largest keys inside each segment (ties go to the lower index).

    Returns an ``(num_segments, s)`` index array, ascending within a row,
    and its validity mask.
    """
    R = len(keys)
    out = np.full((num_segments, s), R, dtype=np.int64)
    if R:
        order = np.argsort(-keys)
        sk = keys[order]
        if np.any(sk[1:] == sk[:-1]):
            order = np.lexsort((np.arange(R), -keys, seg))
        else:
            order = order[np.argsort(seg[order], kind="stable")]
        sseg = seg[order]
        counts = np.bincount(seg, minlength=num_segments)
        first = np.concatenate([[0], np.cumsum(counts)[:-1]])
        rank = np.arange(R) - first[sseg]
        keep = rank < s
        out[sseg[keep], rank[keep]] = order[keep]
        out.sort(axis=1)
    return out, out < R


def gumbel_noise(rng: np.random.Generator, size) -> np.ndarray:
    eps = np.clip(rng.random(size), 1e-12, 1 - 1e-12)
    return -np.log(-np.log(eps))


class _Sampler:
    name = "base"

    def __init__(self):
        self.calls = 0

    def keys(self, g, nodes, times, seg, pos, rng):
        raise NotImplementedError

    def sample(self, g: TemporalGraph, nodes, times, s: int, rng=None) -> Neighborhood:
        self.calls += 1
        nodes = np.asarray(nodes, dtype=np.int64)
        times = np.asarray(times, dtype=np.float64)
        un, ut, inv = unique_queries(nodes, times) if len(nodes) else (nodes, times, np.zeros(0, np.int64))
        seg, pos, counts = ragged_candidates(g, un, ut)
        if np.all(counts <= s):
            keys = np.zeros(len(pos))
        else:
            keys = self.keys(g, un, ut, seg, pos, rng)
        idx, mask = top_per_segment(seg, keys, len(un), s)
        safe = np.where(mask, idx, 0)
        p = pos[safe] if len(pos) else np.zeros_like(safe)
        nbr = np.where(mask, g.adj_nbr[p] if len(pos) else 0, un[:, None])
        ts = np.where(mask, g.adj_ts[p] if len(pos) else 0.0, 0.0)
        eid = np.where(mask, g.adj_eid[p] if len(pos) else 0, 0)
        return Neighborhood(nbr[inv], ts[inv], eid[inv], mask[inv])


class UniformSampler(_Sampler):
    """Uniform subset without replacement (the heuristic baseline)."""

    name = "uniform"

    def keys(self, g, nodes, times, seg, pos, rng):
        return rng.random(len(pos))


class TdsSampler(_Sampler):
    """Time-decay sampling without replacement.

    Perturbing ``lambda_u * t_k`` with Gumbel noise and keeping the top
    ``s`` is distributed exactly like ``s`` sequential renormalised
    categorical draws.
    """

    name = "TDS"

    def __init__(self, rates):
        super().__init__()
        self.rates = rates

    def keys(self, g, nodes, times, seg, pos, rng):
        lam = self.rates[nodes]
        return lam[seg] * g.adj_ts[pos] + gumbel_noise(rng, len(pos))


class GasSampler(_Sampler):
    """Deterministic top-s by the pretrained attention scores."""

    name = "GAS"

    def __init__(self, model):
        super().__init__()
        if not model.trained:
            raise ValueError("GAS sampler needs a pretrained model")
        self.model = model

    def keys(self, g, nodes, times, seg, pos, rng):
        return self.model.score_ragged(g, nodes, times, seg, pos)
