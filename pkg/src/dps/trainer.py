"""Training and evaluation: link prediction, ablations, sweeps and node classification."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fusion_model import MODES, DpsModel
from .gas import GasConfig, GasModel, pretrain_gas
from .graph_store import ChronoSplit, TemporalGraph, sample_negatives
from .metrics import EvalReport, roc_auc
from .samplers import GasSampler, TdsSampler, UniformSampler
from .tds import DecayRates, fit_all

log = logging.getLogger(__name__)

SEARCH_SPACE = {
    "batch_size": (100, 150, 200, 250),
    "dropout": (0.0, 0.1, 0.2, 0.3),
    "layers": (1, 2),
    "heads": (1, 2, 4),
    "neighbors": (10, 20, 30, 40),
}
SWEEP_AXES = {"neighbors": "neighbors", "batch_size": "batch_size", "dropout": "dropout",
              "heads": "heads", "layers": "layers"}
PROBE_SIZE = 1000


@dataclass
class TrainConfig:
    batch_size: int = 200
    dropout: float = 0.1
    layers: int = 2
    heads: int = 2
    neighbors: int = 20
    lr: float = 1e-3
    weight_decay: float = 1e-5
    patience: int = 3
    max_epochs: int = 50
    seed: int = 0
    sampler_mode: str = "DPS"
    d_node: int = 64
    d_time: int = 64
    gas_max_epochs: int = 10
    tds_budget: int = 100
    off_grid: bool = False

    def __post_init__(self):
        if self.sampler_mode not in MODES:
            raise ValueError(f"sampler_mode must be one of {MODES}, got {self.sampler_mode!r}")
        if not self.off_grid:
            bad = {k: getattr(self, k) for k, grid in SEARCH_SPACE.items() if getattr(self, k) not in grid}
            if bad:
                raise ValueError(f"values outside the search space {bad}; set off_grid=True to override")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    def gas_config(self) -> GasConfig:
        return GasConfig(d_node=self.d_node, d_time=self.d_time, neighbors=self.neighbors,
                         batch_size=self.batch_size, lr=self.lr, weight_decay=self.weight_decay,
                         max_epochs=self.gas_max_epochs, seed=self.seed)


# ---------------------------------------------------------------------------
# loss and loops


def link_loss(p_pos: Tensor, p_neg: Tensor) -> Tensor:
    """Mean of ``-log p_pos - log(1 - p_neg)`` with probabilities clamped to [1e-7, 1 - 1e-7]."""
    p_pos = ad.clip(p_pos, 1e-7, 1 - 1e-7)
    p_neg = ad.clip(p_neg, 1e-7, 1 - 1e-7)
    per_pair = ad.add(ad.log(p_pos), ad.log(ad.sub(1.0, p_neg)))
    return ad.mul(ad.mean(per_pair), -1.0)


def iterate_batches(ids: np.ndarray, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(ids)
    for a in range(0, len(perm), batch_size):
        yield perm[a:a + batch_size]


def predict_in_batches(fn, src, dst, times, batch_size: int = 500) -> np.ndarray:
    out = []
    with ad.no_grad():
        for a in range(0, len(src), batch_size):
            out.append(np.asarray(fn(src[a:a + batch_size], dst[a:a + batch_size], times[a:a + batch_size]),
                                  dtype=np.float64))
    return np.concatenate(out) if out else np.zeros(0)


def run_early_stopping(train_epoch, validate, get_state, set_state, *, patience: int, max_epochs: int,
                       progress=None) -> dict:
    """Train until the validation score fails to improve for ``patience`` epochs.

    The state of the best epoch is restored before returning.
    """
    best, best_epoch, best_state = -math.inf, -1, get_state()
    history = []
    stale = 0
    for epoch in range(max_epochs):
        loss = train_epoch(epoch)
        score = float(validate())
        history.append(score)
        if progress:
            progress(epoch, loss, score)
        if score > best:
            best, best_epoch, best_state, stale = score, epoch, get_state(), 0
        else:
            stale += 1
            if stale >= patience:
                break
    set_state(best_state)
    return {"best_score": best, "best_epoch": best_epoch, "epochs": len(history), "val_history": history}


# ---------------------------------------------------------------------------
# samplers and evaluation


def prepare_samplers(g: TemporalGraph, split: ChronoSplit, cfg: TrainConfig, progress=None):
    """Fit whatever the sampler mode needs: decay rates, a pretrained GAS model, both or neither."""
    rates = gas = None
    if cfg.sampler_mode in ("DPS", "TDS_only", "no_fusion"):
        rates = fit_all(g, split, budget=cfg.tds_budget, seed=cfg.seed)
    if cfg.sampler_mode in ("DPS", "GAS_only", "no_fusion"):
        gas, _ = pretrain_gas(g, split, cfg.gas_config(), progress=progress)
    return rates, gas


def make_samplers(mode: str, rates: DecayRates | None, gas: GasModel | None) -> list:
    if mode == "uniform":
        return [UniformSampler(), UniformSampler()]
    out = []
    if mode in ("DPS", "TDS_only", "no_fusion"):
        if rates is None:
            raise ValueError(f"mode {mode} needs fitted decay rates")
        out.append(TdsSampler(rates))
    if mode in ("DPS", "GAS_only", "no_fusion"):
        if gas is None:
            raise ValueError(f"mode {mode} needs a pretrained GAS model")
        out.append(GasSampler(gas))
    return out


class LinkPredictor:
    """A DPS model bound to its samplers; inference draws come from a fixed seed."""

    def __init__(self, model: DpsModel, samplers, eval_seed: int = 0):
        self.model = model
        self.samplers = samplers
        self.eval_seed = eval_seed

    def scorer(self, g):
        rng = np.random.default_rng([self.eval_seed, 7])

        def fn(s, d, t):
            return self.model.predict(g, s, d, t, self.samplers, rng=rng).data

        return fn

    def embeddings(self, g, nodes, times, batch_size: int = 500) -> np.ndarray:
        rng = np.random.default_rng([self.eval_seed, 8])
        out = []
        with ad.no_grad():
            for a in range(0, len(nodes), batch_size):
                h = self.model.node_embedding(g, nodes[a:a + batch_size], times[a:a + batch_size],
                                              self.samplers, rng=rng)
                out.append(h.data.astype(np.float64))
        d = self.model.hyper["d_node"]
        return np.concatenate(out) if out else np.zeros((0, d))


def fixed_negatives(g: TemporalGraph, ids: np.ndarray, seed: int, salt: int) -> np.ndarray:
    return sample_negatives(g, g.src[ids], g.dst[ids], np.random.default_rng([seed, salt]))


def evaluate_links(scorer, g: TemporalGraph, ids: np.ndarray, negatives: np.ndarray,
                   batch_size: int = 500, **extra) -> EvalReport:
    """Accuracy at 0.5 and AUC for positives ``ids`` paired one-to-one with ``negatives``."""
    if len(ids) == 0:
        raise ValueError("evaluation needs at least one positive edge")
    pos = predict_in_batches(scorer, g.src[ids], g.dst[ids], g.ts[ids], batch_size)
    neg = predict_in_batches(scorer, g.src[ids], negatives, g.ts[ids], batch_size)
    return EvalReport.from_scores(pos, neg, **extra)


# ---------------------------------------------------------------------------
# DPS training


def train_dps(g: TemporalGraph, split: ChronoSplit, rates: DecayRates | None, gas: GasModel | None,
              cfg: TrainConfig, progress=None) -> tuple[DpsModel, EvalReport]:
    """Train DPS (or an ablation) with early stopping on validation AUC; report test metrics."""
    if len(split.train) == 0:
        raise ValueError("cannot train on an empty training set")
    model = DpsModel(g.num_nodes, g.feature_dim, d_node=cfg.d_node, d_time=cfg.d_time, layers=cfg.layers,
                     heads=cfg.heads, neighbors=cfg.neighbors, dropout=cfg.dropout, mode=cfg.sampler_mode,
                     seed=cfg.seed)
    samplers = make_samplers(cfg.sampler_mode, rates, gas)
    predictor = LinkPredictor(model, samplers, cfg.seed)
    params = list(model.parameters().values())
    opt = ad.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 6])

    val = split.val if len(split.val) else split.train[-max(1, len(split.train) // 10):]
    val_neg = fixed_negatives(g, val, cfg.seed, 9)
    probe = split.train[np.linspace(0, len(split.train) - 1, min(PROBE_SIZE, len(split.train))).astype(int)]
    probe_neg = fixed_negatives(g, probe, cfg.seed, 10)

    def probe_loss():
        fn = predictor.scorer(g)
        pos = predict_in_batches(fn, g.src[probe], g.dst[probe], g.ts[probe])
        neg = predict_in_batches(fn, g.src[probe], probe_neg, g.ts[probe])
        pos, neg = np.clip(pos, 1e-7, 1 - 1e-7), np.clip(neg, 1e-7, 1 - 1e-7)
        return float(np.mean(-np.log(pos) - np.log(1 - neg)))

    probes = [probe_loss()]
    losses = []

    def train_epoch(epoch):
        total, n = 0.0, 0
        for batch in iterate_batches(split.train, cfg.batch_size, rng):
            src, dst, t = g.src[batch], g.dst[batch], g.ts[batch]
            neg = sample_negatives(g, src, dst, rng)
            B = len(batch)
            p = model.predict(g, np.concatenate([src, src]), np.concatenate([dst, neg]), np.concatenate([t, t]),
                              samplers, train=True, rng=rng)
            loss = link_loss(ad.slice(p, 0, B, axis=0), ad.slice(p, B, 2 * B, axis=0))
            ad.backward(loss)
            opt.step()
            total += float(loss.data) * B
            n += B
        losses.append(total / n)
        probes.append(probe_loss())
        return losses[-1]

    def validate():
        return evaluate_links(predictor.scorer(g), g, val, val_neg).auc

    result = run_early_stopping(train_epoch, validate, model.state_dict, model.load_state_dict,
                                patience=cfg.patience, max_epochs=cfg.max_epochs, progress=progress)
    report = evaluate_test(predictor, g, split, cfg.seed)
    report.loss_history = losses
    report.probe_loss = probes
    report.val_auc_history = result["val_history"]
    report.epochs = result["epochs"]
    report.best_epoch = result["best_epoch"]
    report.val_auc = result["best_score"]
    return model, report


def evaluate_test(predictor: LinkPredictor, g: TemporalGraph, split: ChronoSplit, seed: int) -> EvalReport:
    ids = split.test if len(split.test) else split.val
    report = evaluate_links(predictor.scorer(g), g, ids, fixed_negatives(g, ids, seed, 11))
    report.mode = predictor.model.mode
    return report


def run_mode(g, split, cfg: TrainConfig, rates=None, gas=None, progress=None):
    """Train one sampler mode, fitting any missing sampler first."""
    need_rates = cfg.sampler_mode in ("DPS", "TDS_only", "no_fusion") and rates is None
    need_gas = cfg.sampler_mode in ("DPS", "GAS_only", "no_fusion") and gas is None
    if need_rates:
        rates = fit_all(g, split, budget=cfg.tds_budget, seed=cfg.seed)
    if need_gas:
        gas, _ = pretrain_gas(g, split, cfg.gas_config())
    use_rates = rates if cfg.sampler_mode in ("DPS", "TDS_only", "no_fusion") else None
    use_gas = gas if cfg.sampler_mode in ("DPS", "GAS_only", "no_fusion") else None
    return train_dps(g, split, use_rates, use_gas, cfg, progress=progress)


def ablation_run(g: TemporalGraph, split: ChronoSplit, cfg: TrainConfig, rates=None, gas=None,
                 modes=MODES, progress=None) -> dict[str, EvalReport]:
    """One report per sampler mode; decay rates and GAS are fitted once and shared."""
    if rates is None and any(m in ("DPS", "TDS_only", "no_fusion") for m in modes):
        rates = fit_all(g, split, budget=cfg.tds_budget, seed=cfg.seed)
    if gas is None and any(m in ("DPS", "GAS_only", "no_fusion") for m in modes):
        gas, _ = pretrain_gas(g, split, cfg.gas_config())
    table = {}
    for mode in modes:
        _, report = run_mode(g, split, replace(cfg, sampler_mode=mode), rates, gas, progress=progress)
        table[mode] = report
        log.info("ablation %s: acc %.4f auc %.4f", mode, report.accuracy, report.auc)
    return table


def sweep(g: TemporalGraph, split: ChronoSplit, cfg: TrainConfig, axis: str, values=None, rates=None,
          gas=None, workers: int = 1) -> list[dict]:
    """Metric against one hyper-parameter; everything else stays at ``cfg``."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"sweep axis must be one of {sorted(SWEEP_AXES)}, got {axis!r}")
    values = list(values) if values is not None else list(SEARCH_SPACE[axis])
    if rates is None and cfg.sampler_mode in ("DPS", "TDS_only", "no_fusion"):
        rates = fit_all(g, split, budget=cfg.tds_budget, seed=cfg.seed)

    def one(value):
        c = replace(cfg, **{SWEEP_AXES[axis]: value})
        # GAS depends on neighbours/batch size, so it is pretrained per setting unless supplied
        with ad.use_profile("train"):
            _, rep = run_mode(g, split, c, rates, gas)
        return {"axis": axis, "value": value, "accuracy": rep.accuracy, "auc": rep.auc, "epochs": rep.epochs,
                "seed": cfg.seed}

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, values))
    return [one(v) for v in values]


# ---------------------------------------------------------------------------
# node classification


@dataclass
class ClassifierConfig:
    batch_size: int = 200
    lr: float = 1e-3
    weight_decay: float = 1e-5
    patience: int = 10
    max_epochs: int = 200
    seed: int = 0


class NodeClassifierHead:
    """Three-layer perceptron with widths 80, 10 and 1."""

    WIDTHS = (80, 10, 1)

    def __init__(self, d_in: int, seed: int = 0):
        rng = np.random.default_rng([seed, 12])
        dims = (d_in,) + self.WIDTHS
        self.weights = [ad.parameter(ad.glorot_init((a, b), rng), f"clf.W{i}") for i, (a, b) in enumerate(zip(dims, dims[1:]))]
        self.biases = [ad.parameter(np.zeros(b), f"clf.b{i}") for i, b in enumerate(self.WIDTHS)]

    def parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.weights + self.biases}

    def __call__(self, x) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.weights[0].dtype))
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.add(ad.matmul(h, w), b)
            h = ad.relu(h) if i < len(self.weights) - 1 else ad.sigmoid(h)
        return ad.reshape(h, (h.shape[0],))

    def predict(self, x) -> np.ndarray:
        with ad.no_grad():
            return self(x).data.astype(np.float64)


def balanced_batches(y: np.ndarray, batch_size: int, rng: np.random.Generator):
    """Batches with equal positives and negatives; positives are resampled with replacement."""
    pos = np.flatnonzero(y == 1)
    neg = rng.permutation(np.flatnonzero(y == 0))
    half = max(1, batch_size // 2)
    for a in range(0, len(neg), half):
        nb = neg[a:a + half]
        pb = rng.choice(pos, size=len(nb), replace=True)
        yield np.concatenate([pb, nb])


def chrono_label_split(n: int, ratios=(0.70, 0.15, 0.15)):
    a = int(math.floor(ratios[0] * n + 1e-9))
    b = int(math.floor((ratios[0] + ratios[1]) * n + 1e-9))
    idx = np.arange(n)
    return idx[:a], idx[a:b], idx[b:]


def fit_classifier(X: np.ndarray, y: np.ndarray, cfg: ClassifierConfig | None = None,
                   parts=None) -> tuple[NodeClassifierHead, EvalReport]:
    """Train the MLP head on fixed features with chronological train/val/test parts."""
    cfg = cfg or ClassifierConfig()
    y = np.asarray(y, dtype=np.int64)
    tr, va, te = parts if parts is not None else chrono_label_split(len(y))
    for name, part in (("training", tr), ("validation", va), ("test", te)):
        if len(np.unique(y[part])) < 2:
            raise ValueError(f"{name} labels contain a single class; node classification needs both")
    head = NodeClassifierHead(X.shape[1], cfg.seed)
    params = list(head.parameters().values())
    opt = ad.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 13])
    Xd = np.asarray(X, dtype=ad.default_dtype())
    losses = []

    def train_epoch(epoch):
        total, n = 0.0, 0
        for batch in balanced_batches(y[tr], cfg.batch_size, rng):
            rows = tr[batch]
            p = ad.clip(head(Xd[rows]), 1e-7, 1 - 1e-7)
            t = y[rows].astype(Xd.dtype)
            loss = ad.mul(ad.mean(ad.add(ad.mul(ad.log(p), t), ad.mul(ad.log(ad.sub(1.0, p)), 1 - t))), -1.0)
            ad.backward(loss)
            opt.step()
            total += float(loss.data) * len(rows)
            n += len(rows)
        losses.append(total / max(n, 1))
        return losses[-1]

    def auc_of(part):
        p = head.predict(Xd[part])
        return roc_auc(p[y[part] == 1], p[y[part] == 0])

    def get_state():
        return {k: v.data.copy() for k, v in head.parameters().items()}

    def set_state(state):
        for k, v in head.parameters().items():
            v.data = state[k].copy()

    result = run_early_stopping(train_epoch, lambda: auc_of(va), get_state, set_state,
                                patience=cfg.patience, max_epochs=cfg.max_epochs)
    p = head.predict(Xd[te])
    report = EvalReport.from_scores(p[y[te] == 1], p[y[te] == 0], loss_history=losses,
                                    val_auc_history=result["val_history"], epochs=result["epochs"],
                                    best_epoch=result["best_epoch"], val_auc=result["best_score"],
                                    mode="node_classification")
    return head, report


def train_node_classifier(predictor: LinkPredictor, g: TemporalGraph, labels, cfg: ClassifierConfig | None = None):
    """Classify label events from frozen temporal embeddings of the user at the event time."""
    nodes, times, y = labels
    X = predictor.embeddings(g, np.asarray(nodes), np.asarray(times, dtype=np.float64))
    return fit_classifier(X, y, cfg)
