"""Temporal interaction storage, chronological splits and synthetic graphs.

Interactions are kept as parallel numpy arrays sorted by time, plus a CSR
adjacency in which every interaction is listed under both endpoints.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SECONDS_PER_DAY = 86400.0


class EdgeListParseError(ValueError):
    """A line of an edge list could not be parsed."""

    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


class EdgeListFormatError(ValueError):
    """The edge list is readable but structurally inconsistent."""


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class TemporalEdge:
    src: int
    dst: int
    timestamp: float
    features: np.ndarray
    edge_id: int


@dataclass(frozen=True)
class NeighborSet:
    """Interactions of ``anchor_node`` strictly before ``anchor_time``."""

    anchor_node: int
    anchor_time: float
    nbr: np.ndarray
    ts: np.ndarray
    eid: np.ndarray

    def __len__(self) -> int:
        return len(self.nbr)

    @property
    def entries(self) -> list[tuple[int, float, int]]:
        return [(int(v), float(t), int(e)) for v, t, e in zip(self.nbr, self.ts, self.eid)]


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class TemporalGraph:
    """Immutable time-sorted interaction store.

    Edge ids are dense and equal to the position in the time-sorted edge
    arrays (ties keep input order). ``adj_*`` arrays form a CSR layout:
    the interactions of node ``u`` live in ``adj_ptr[u]:adj_ptr[u + 1]``
    sorted ascending by timestamp, then edge id.
    """

    def __init__(
        self,
        num_nodes: int,
        src: np.ndarray,
        dst: np.ndarray,
        ts: np.ndarray,
        features: np.ndarray | None = None,
        *,
        time_origin: float = 0.0,
        time_scale: float = 1.0,
        node_names: Sequence[str] | None = None,
    ):
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        ts = np.asarray(ts, dtype=np.float64)
        if not (len(src) == len(dst) == len(ts)):
            raise ValueError("src, dst and ts must have equal length")
        if features is None:
            features = np.zeros((len(src), 0))
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2:
            features = features.reshape(len(src), -1) if features.size else np.zeros((len(src), 0))
        if len(ts) and (not np.all(np.isfinite(ts)) or ts.min() < 0):
            raise ValueError("timestamps must be finite and non-negative")
        if len(src) and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= num_nodes):
            raise ValueError("node id out of range")

        order = np.argsort(ts, kind="stable")
        self.num_nodes = int(num_nodes)
        self.src = _readonly(src[order])
        self.dst = _readonly(dst[order])
        self.ts = _readonly(ts[order])
        self.features = _readonly(features[order])
        self.time_origin = float(time_origin)
        self.time_scale = float(time_scale)
        if node_names is None:
            node_names = [str(i) for i in range(self.num_nodes)]
        if len(node_names) != self.num_nodes:
            raise ValueError("node_names length must equal num_nodes")
        self.node_names = tuple(node_names)

        m = len(self.src)
        eid = np.arange(m, dtype=np.int64)
        owner = np.concatenate([self.src, self.dst])
        other = np.concatenate([self.dst, self.src])
        both_t = np.concatenate([self.ts, self.ts])
        both_e = np.concatenate([eid, eid])
        perm = np.lexsort((both_e, both_t, owner))
        self.adj_nbr = _readonly(other[perm])
        self.adj_ts = _readonly(both_t[perm])
        self.adj_eid = _readonly(both_e[perm])
        counts = np.bincount(owner, minlength=self.num_nodes)
        self.adj_ptr = _readonly(np.concatenate([[0], np.cumsum(counts)]).astype(np.int64))

    @property
    def num_edges(self) -> int:
        return len(self.src)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def edge(self, i: int) -> TemporalEdge:
        return TemporalEdge(int(self.src[i]), int(self.dst[i]), float(self.ts[i]), self.features[i], int(i))

    @property
    def edges(self) -> list[TemporalEdge]:
        return [self.edge(i) for i in range(self.num_edges)]

    def adjacency(self, u: int) -> NeighborSet:
        a, b = self.adj_ptr[u], self.adj_ptr[u + 1]
        return NeighborSet(int(u), math.inf, self.adj_nbr[a:b], self.adj_ts[a:b], self.adj_eid[a:b])

    def degree(self) -> np.ndarray:
        return np.diff(self.adj_ptr)

    def subgraph(self, edge_ids: Iterable[int]) -> "TemporalGraph":
        """Graph over the same node set restricted to ``edge_ids``."""
        idx = np.sort(np.asarray(list(edge_ids) if not isinstance(edge_ids, np.ndarray) else edge_ids, dtype=np.int64))
        return TemporalGraph(
            self.num_nodes, self.src[idx], self.dst[idx], self.ts[idx], self.features[idx],
            time_origin=self.time_origin, time_scale=self.time_scale, node_names=self.node_names,
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for a in (self.src, self.dst, self.ts, self.features):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(str(self.num_nodes).encode())
        return h.hexdigest()[:16]

    def __repr__(self) -> str:
        return f"TemporalGraph(num_nodes={self.num_nodes}, num_edges={self.num_edges}, feature_dim={self.feature_dim})"


# ---------------------------------------------------------------------------
# queries


def count_before(g: TemporalGraph, nodes: np.ndarray, times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised binary search over the CSR adjacency.

    Returns ``(start, end)`` so that the interactions of ``nodes[i]`` with
    timestamp strictly below ``times[i]`` are ``adj_*[start[i]:end[i]]``.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    times = np.asarray(times, dtype=np.float64)
    start = g.adj_ptr[nodes]
    lo = start.copy()
    hi = g.adj_ptr[nodes + 1].copy()
    last = max(len(g.adj_ts) - 1, 0)
    while True:
        active = lo < hi
        if not active.any():
            break
        mid = (lo + hi) // 2
        if len(g.adj_ts):
            right = active & (g.adj_ts[np.minimum(mid, last)] < times)
        else:
            right = np.zeros_like(active)
        lo = np.where(right, mid + 1, lo)
        hi = np.where(active & ~right, mid, hi)
    return start, lo


def neighbors_before(g: TemporalGraph, u: int, t: float) -> NeighborSet:
    if not 0 <= u < g.num_nodes:
        raise IndexError(f"unknown node {u} (graph has {g.num_nodes} nodes)")
    start, end = count_before(g, np.array([u]), np.array([t]))
    a, b = int(start[0]), int(end[0])
    return NeighborSet(int(u), float(t), g.adj_nbr[a:b], g.adj_ts[a:b], g.adj_eid[a:b])


def ragged_candidates(g: TemporalGraph, nodes: np.ndarray, times: np.ndarray):
    """Flattened neighbourhoods of a batch of (node, time) queries.

    Returns ``(seg, pos, counts)``: ``pos`` indexes the adjacency arrays and
    ``seg`` names the query each candidate belongs to, grouped by query in
    time order.
    """
    start, end = count_before(g, nodes, times)
    counts = end - start
    total = int(counts.sum())
    seg = np.repeat(np.arange(len(counts)), counts)
    first = np.concatenate([[0], np.cumsum(counts)[:-1]]) if len(counts) else np.zeros(0, np.int64)
    pos = start[seg] + (np.arange(total) - first[seg])
    return seg, pos, counts


# ---------------------------------------------------------------------------
# splits and negatives


@dataclass(frozen=True)
class ChronoSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    removed: np.ndarray
    train_nodes: np.ndarray = field(repr=False)


def chrono_split(g: TemporalGraph, ratios: Sequence[float] = (0.70, 0.15, 0.15)) -> ChronoSplit:
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise SplitError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    m = g.num_edges
    if m < 3:
        raise SplitError(f"need at least 3 edges to split, got {m}")
    a = int(math.floor(ratios[0] * m + 1e-9))
    b = int(math.floor((ratios[0] + ratios[1]) * m + 1e-9))
    ids = np.arange(m, dtype=np.int64)
    train, val, test = ids[:a], ids[a:b], ids[b:]
    seen = np.zeros(g.num_nodes, dtype=bool)
    seen[g.src[train]] = True
    seen[g.dst[train]] = True

    def keep(part):
        ok = seen[g.src[part]] & seen[g.dst[part]]
        return part[ok], part[~ok]

    val, rv = keep(val)
    test, rt = keep(test)
    return ChronoSplit(train, val, test, np.concatenate([rv, rt]), np.flatnonzero(seen))


def sample_negative(g: TemporalGraph, positive: TemporalEdge, rng: np.random.Generator) -> int:
    """Uniform node excluding both endpoints (only ``dst`` if nothing else is left)."""
    n = g.num_nodes
    if n < 2:
        raise ValueError("negative sampling needs at least 2 nodes")
    excluded = {positive.src, positive.dst}
    if len(excluded) >= n:
        excluded = {positive.dst}
    while True:
        j = int(rng.integers(n))
        if j not in excluded:
            return j


def sample_negatives(g: TemporalGraph, src: np.ndarray, dst: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Batch form of :func:`sample_negative`."""
    n = g.num_nodes
    if n < 2:
        raise ValueError("negative sampling needs at least 2 nodes")
    src = np.asarray(src)
    dst = np.asarray(dst)
    # with two nodes and a non-loop positive both are excluded; fall back to != dst
    strict = ~((n == 2) & (src != dst))
    out = rng.integers(n, size=len(dst))
    bad = (out == dst) | (strict & (out == src))
    while bad.any():
        out[bad] = rng.integers(n, size=int(bad.sum()))
        bad = (out == dst) | (strict & (out == src))
    return out


# ---------------------------------------------------------------------------
# statistics


def summary_stats(g: TemporalGraph) -> dict:
    """Dataset statistics: nodes, edges, density, repetition, timespan."""
    n, m = g.num_nodes, g.num_edges
    density = 2.0 * m / (n * (n - 1)) if n > 1 else 0.0
    if m:
        lo = np.minimum(g.src, g.dst)
        hi = np.maximum(g.src, g.dst)
        key = lo * n + hi
        _, first = np.unique(key, return_index=True)
        repetition = 1.0 - len(first) / m
        timespan = float(g.ts[-1] - g.ts[0])
    else:
        repetition = 0.0
        timespan = 0.0
    return {
        "nodes": n,
        "edges": m,
        "density": density,
        "repetition": repetition,
        "timespan": timespan,
        "feature_dim": g.feature_dim,
    }


# ---------------------------------------------------------------------------
# text IO


def _split_line(line: str) -> list[str]:
    if "," in line:
        return [tok.strip() for tok in line.split(",")]
    return line.split()


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def _parse_edge_lines(path, has_features: bool, time_column: int):
    srcs, dsts, times, feats = [], [], [], []
    arity = None
    first_content = True
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line[0] in "%#":
                continue
            toks = _split_line(line)
            if first_content:
                first_content = False
                if len(toks) > time_column and not _is_number(toks[time_column]):
                    continue
            if len(toks) <= max(2, time_column):
                raise EdgeListParseError(path, lineno, f"expected at least {max(3, time_column + 1)} fields, got {len(toks)}")
            try:
                t = float(toks[time_column])
            except ValueError:
                raise EdgeListParseError(path, lineno, f"bad timestamp {toks[time_column]!r}") from None
            if not math.isfinite(t):
                raise EdgeListParseError(path, lineno, f"non-finite timestamp {toks[time_column]!r}")
            f = []
            if has_features:
                try:
                    f = [float(x) for x in toks[time_column + 1:]]
                except ValueError as exc:
                    raise EdgeListParseError(path, lineno, f"bad feature value ({exc})") from None
                if arity is None:
                    arity = len(f)
                elif len(f) != arity:
                    raise EdgeListFormatError(f"{path}:{lineno}: feature arity {len(f)} differs from {arity}")
            srcs.append(toks[0])
            dsts.append(toks[1])
            times.append(t)
            feats.append(f)
    features = np.asarray(feats, dtype=np.float64).reshape(len(times), arity or 0)
    return srcs, dsts, np.asarray(times, dtype=np.float64), features


def load_edge_list(
    path,
    has_features: bool = False,
    time_unit_divisor: float = SECONDS_PER_DAY,
    time_column: int = 2,
) -> TemporalGraph:
    """Parse ``src dst timestamp [f1 .. fm]`` lines into a TemporalGraph.

    Lines starting with ``%`` or ``#`` are comments. A non-numeric first
    line is treated as a header. Node tokens are remapped to dense ids in
    order of first appearance along the time-sorted interactions.
    Timestamps are shifted so the earliest is 0, then divided by
    ``time_unit_divisor`` (seconds to days by default).
    """
    if time_unit_divisor <= 0:
        raise ValueError("time_unit_divisor must be positive")
    srcs, dsts, times, features = _parse_edge_lines(path, has_features, time_column)
    if len(times) == 0:
        return TemporalGraph(0, [], [], [], features, time_scale=time_unit_divisor)
    order = np.argsort(times, kind="stable")
    ids: dict[str, int] = {}
    for i in order:
        for tok in (srcs[i], dsts[i]):
            if tok not in ids:
                ids[tok] = len(ids)
    src = np.array([ids[s] for s in srcs])
    dst = np.array([ids[d] for d in dsts])
    origin = float(times.min())
    ts = (times - origin) / time_unit_divisor
    return TemporalGraph(len(ids), src, dst, ts, features, time_origin=origin,
                         time_scale=time_unit_divisor, node_names=list(ids))


def write_edge_list(g: TemporalGraph, path) -> None:
    """Write dense-id interactions with normalised timestamps (9 significant digits)."""
    with open(path, "w") as fh:
        header = ["src", "dst", "timestamp"] + [f"f{k}" for k in range(g.feature_dim)]
        fh.write(",".join(header) + "\n")
        for i in range(g.num_edges):
            row = [str(g.src[i]), str(g.dst[i]), f"{g.ts[i]:.9g}"]
            row += [repr(float(x)) for x in g.features[i]]
            fh.write(",".join(row) + "\n")


def save_dataset(g: TemporalGraph, directory, stats: dict | None = None) -> Path:
    """Write a normalised dataset directory (edges.csv, nodes.csv, dataset.json)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_edge_list(g, d / "edges.csv")
    with open(d / "nodes.csv", "w") as fh:
        fh.write("node_id,name\n")
        for i, name in enumerate(g.node_names):
            fh.write(f"{i},{name}\n")
    meta = {
        "num_nodes": g.num_nodes,
        "num_edges": g.num_edges,
        "feature_dim": g.feature_dim,
        "time_origin": g.time_origin,
        "time_scale": g.time_scale,
        "fingerprint": g.fingerprint(),
        "stats": stats if stats is not None else summary_stats(g),
    }
    with open(d / "dataset.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return d


def load_dataset(path, has_features: bool = False, time_unit_divisor: float = SECONDS_PER_DAY) -> TemporalGraph:
    """Load either a dataset directory written by :func:`save_dataset` or a raw edge list."""
    p = Path(path)
    if not p.is_dir():
        return load_edge_list(p, has_features=has_features, time_unit_divisor=time_unit_divisor)
    with open(p / "dataset.json") as fh:
        meta = json.load(fh)
    n = int(meta["num_nodes"])
    srcs, dsts, times, features = _parse_edge_lines(p / "edges.csv", meta["feature_dim"] > 0, 2)
    names = [str(i) for i in range(n)]
    if (p / "nodes.csv").exists():
        with open(p / "nodes.csv") as fh:
            next(fh)
            for line in fh:
                k, name = line.rstrip("\n").split(",", 1)
                names[int(k)] = name
    try:
        src = np.array([int(x) for x in srcs], dtype=np.int64)
        dst = np.array([int(x) for x in dsts], dtype=np.int64)
    except ValueError as exc:
        raise EdgeListFormatError(f"{p / 'edges.csv'}: dataset edges must use dense integer ids ({exc})") from None
    return TemporalGraph(n, src, dst, times, features,
                         time_origin=meta["time_origin"], time_scale=meta["time_scale"], node_names=names)


def load_labels(path, g: TemporalGraph):
    """Read ``node_id timestamp label`` rows; timestamps are raw and get normalised like the graph's."""
    index = {name: i for i, name in enumerate(g.node_names)}
    nodes, times, labels = [], [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line[0] in "%#":
                continue
            toks = _split_line(line)
            if len(toks) < 3:
                raise EdgeListParseError(path, lineno, "expected node_id timestamp label")
            if not _is_number(toks[1]):
                if not nodes:
                    continue
                raise EdgeListParseError(path, lineno, f"bad timestamp {toks[1]!r}")
            if toks[0] not in index:
                raise EdgeListParseError(path, lineno, f"unknown node {toks[0]!r}")
            lab = int(float(toks[2]))
            if lab not in (0, 1):
                raise EdgeListParseError(path, lineno, f"label must be 0 or 1, got {toks[2]!r}")
            nodes.append(index[toks[0]])
            times.append((float(toks[1]) - g.time_origin) / g.time_scale)
            labels.append(lab)
    order = np.argsort(np.asarray(times), kind="stable")
    return (np.asarray(nodes, dtype=np.int64)[order], np.asarray(times)[order],
            np.asarray(labels, dtype=np.int64)[order])


# ---------------------------------------------------------------------------
# synthetic data


def synth_generate(
    num_nodes: int = 500,
    num_edges: int = 20000,
    num_communities: int = 10,
    decay_rate: float = 0.01,
    seed: int = 0,
    p_preference: float = 0.8,
) -> TemporalGraph:
    """Planted-preference temporal graph.

    Each event picks a source uniformly. With probability ``p_preference``
    the destination is drawn from the source's past interactions with
    members of its own community, weighted by ``exp(-decay_rate * age)``
    (a uniform community member if there are none); otherwise it is a
    uniform node. Event times follow a unit-rate Poisson process.
    """
    if min(num_nodes, num_edges, num_communities) <= 0 or decay_rate <= 0:
        raise ValueError("synthetic graph parameters must be positive")
    if num_nodes < 2:
        raise ValueError("need at least 2 nodes")
    rng = np.random.default_rng(seed)
    community = rng.permutation(np.arange(num_nodes) % num_communities)
    members = [np.flatnonzero(community == c) for c in range(num_communities)]
    hist_nbr = [[] for _ in range(num_nodes)]
    hist_t = [[] for _ in range(num_nodes)]
    gaps = rng.exponential(1.0, size=num_edges)
    times = np.cumsum(gaps)
    src = rng.integers(num_nodes, size=num_edges)
    coin = rng.random(num_edges)
    dst = np.empty(num_edges, dtype=np.int64)
    for i in range(num_edges):
        u = int(src[i])
        t = times[i]
        if coin[i] < p_preference:
            nb = np.asarray(hist_nbr[u], dtype=np.int64)
            ok = community[nb] == community[u] if len(nb) else np.zeros(0, bool)
            if ok.any():
                age = t - np.asarray(hist_t[u])[ok]
                w = np.exp(-decay_rate * (age - age.min()))
                v = int(nb[ok][rng.choice(len(w), p=w / w.sum())])
            else:
                pool = members[community[u]]
                pool = pool[pool != u] if len(pool) > 1 else np.flatnonzero(np.arange(num_nodes) != u)
                v = int(rng.choice(pool))
        else:
            v = int(rng.integers(num_nodes - 1))
            v += v >= u
        dst[i] = v
        hist_nbr[u].append(v)
        hist_t[u].append(t)
        hist_nbr[v].append(u)
        hist_t[v].append(t)
    g = TemporalGraph(num_nodes, src, dst, times - times[0], time_origin=0.0, time_scale=1.0)
    g.community = _readonly(community.copy())
    return g
