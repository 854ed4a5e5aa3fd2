"""Link-prediction metrics and the evaluation report."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

CSV_FIELDS = ("command", "dataset", "mode", "accuracy", "auc", "epochs", "seed")


def roc_auc(pos, neg) -> float:
    """Probability that a positive outscores a negative, ties counting one half (rank form)."""
    pos = np.asarray(pos, dtype=np.float64).ravel()
    neg = np.asarray(neg, dtype=np.float64).ravel()
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC needs at least one positive and one negative score")
    ranks = rankdata(np.concatenate([pos, neg]))
    n_pos, n_neg = len(pos), len(neg)
    return float((ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def accuracy(pos, neg, threshold: float = 0.5) -> float:
    pos = np.asarray(pos).ravel()
    neg = np.asarray(neg).ravel()
    correct = np.sum(pos >= threshold) + np.sum(neg < threshold)
    return float(correct / (len(pos) + len(neg)))


@dataclass
class EvalReport:
    accuracy: float
    auc: float
    n_pos: int
    n_neg: int
    loss_history: list = field(default_factory=list)
    val_auc_history: list = field(default_factory=list)
    probe_loss: list = field(default_factory=list)
    epochs: int = 0
    best_epoch: int = -1
    val_auc: float = float("nan")
    mode: str = ""

    def __post_init__(self):
        for name in ("accuracy", "auc"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    @classmethod
    def from_scores(cls, pos, neg, **extra) -> "EvalReport":
        return cls(accuracy(pos, neg), roc_auc(pos, neg), len(pos), len(neg), **extra)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)

    def csv_row(self, command: str, dataset: str, seed: int) -> dict:
        return {"command": command, "dataset": dataset, "mode": self.mode, "accuracy": f"{self.accuracy:.6f}",
                "auc": f"{self.auc:.6f}", "epochs": self.epochs, "seed": seed}
