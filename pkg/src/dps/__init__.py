"""Temporal link prediction with dynamic neighbour preference sampling."""

from .graph_store import TemporalGraph, chrono_split, load_dataset, synth_generate
from .tds import fit_all
from .gas import GasConfig, pretrain_gas
from .fusion_model import DpsModel, MODES
from .trainer import TrainConfig, ablation_run, train_dps

__version__ = "0.1.0"

__all__ = ["TemporalGraph", "chrono_split", "load_dataset", "synth_generate", "fit_all", "GasConfig",
           "pretrain_gas", "DpsModel", "MODES", "TrainConfig", "ablation_run", "train_dps", "__version__"]
