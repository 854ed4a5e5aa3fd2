"""Command-line entry point: ``dps <command> ...``.

Every command writes ``config.json`` (its fully resolved options) into
``--out``. Passing that file back with ``--config`` repeats the run.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import plotting
from .checkpoint import CheckpointError, load_checkpoint, profile_for_dtype, save_checkpoint
from .fusion_model import MODES
from .gas import GasConfig, GasModel, pretrain_gas
from .graph_store import (EdgeListFormatError, EdgeListParseError, SplitError, chrono_split, load_dataset,
                          load_labels, save_dataset, summary_stats, synth_generate)
from .metrics import CSV_FIELDS
from .tds import fit_all, write_rates
from .trainer import (SWEEP_AXES, ClassifierConfig, LinkPredictor, TrainConfig, ablation_run, evaluate_test,
                      make_samplers, sweep, train_dps, train_node_classifier)

log = logging.getLogger("dps")

TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}
# options that only steer the process, not the result
NON_RESULT = {"config", "out", "verbose"}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config handling


def resolve(args: argparse.Namespace, explicit: set) -> dict:
    """Merge ``--config`` (JSON) under explicit command-line flags; reject unknown keys."""
    opts = dict(vars(args))
    file_cfg = {}
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
    cmd = file_cfg.pop("command", args.command)
    if cmd != args.command:
        raise ConfigError(f"config was written for '{cmd}', not '{args.command}'")
    train_block = file_cfg.pop("train", {})
    unknown = set(file_cfg) - set(opts)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    bad_train = set(train_block) - TRAIN_FIELDS
    if bad_train:
        raise ConfigError(f"unknown training options: {sorted(bad_train)}")
    for k, v in file_cfg.items():
        if k not in explicit:
            opts[k] = v
    opts["train"] = train_block
    return opts


def train_config(opts: dict) -> TrainConfig:
    cfg = dict(opts.get("train", {}))
    for k in ("seed", "sampler_mode", "max_epochs", "layers", "neighbors", "batch_size", "dropout", "heads",
              "lr", "d_node", "d_time", "gas_max_epochs", "off_grid"):
        if opts.get(k) is not None:
            cfg[k] = opts[k]
    try:
        tc = TrainConfig.from_dict(cfg)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    opts["train"] = asdict(tc)
    return tc


def write_config(out: Path, opts: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {k: v for k, v in opts.items() if k not in NON_RESULT}
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))


def write_metrics(path: Path, rows: list[dict]) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        w.writerows(rows)
    return path


def _dataset(opts) -> tuple:
    if not opts.get("data"):
        raise ConfigError("a dataset path is required")
    path = Path(opts["data"])
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    g = load_dataset(path, has_features=opts.get("features", False),
                     time_unit_divisor=opts.get("time_divisor") or 86400.0)
    return g, chrono_split(g), path.stem if path.is_file() else path.name


def _progress(tag):
    def report(epoch, loss, score):
        log.info("%s epoch %d: loss %.4f, val AUC %.4f", tag, epoch + 1, loss, score)
    return report


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(opts, out: Path) -> int:
    path = Path(opts["data"])
    if not path.exists():
        raise FileNotFoundError(f"edge list not found: {path}")
    g = load_dataset(path, has_features=opts["features"], time_unit_divisor=opts["time_divisor"])
    stats = summary_stats(g)
    save_dataset(g, out / "dataset", stats)
    with open(out / "stats.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(stats))
        w.writeheader()
        w.writerow(stats)
    plotting.plot_timeline(g, out / "timeline.png")
    print(json.dumps(stats, indent=2))
    return 0


def cmd_synth(opts, out: Path) -> int:
    g = synth_generate(opts["nodes"], opts["edges"], opts["communities"], opts["decay"], opts["seed"])
    stats = summary_stats(g)
    save_dataset(g, out / "dataset", stats)
    np.savetxt(out / "communities.txt", g.community, fmt="%d")
    print(json.dumps(stats, indent=2))
    return 0


def cmd_fit_tds(opts, out: Path) -> int:
    g, split, _ = _dataset(opts)
    rates = fit_all(g, split, budget=opts["budget"], seed=opts["seed"])
    write_rates(rates, out / "rates.txt", g.node_names)
    (out / "rates.json").write_text(json.dumps({k: np.asarray(v).tolist() for k, v in rates.to_params().items()}))
    plotting.plot_decay_rates(rates, out / "decay_rates.png")
    print(f"fitted {int(rates.fitted.sum())} of {g.num_nodes} nodes; fallback rate {rates.fallback_lambda:.6g}")
    return 0


def _load_rates_json(path):
    from .tds import DecayRates

    return DecayRates.from_params({k: np.asarray(v) for k, v in json.loads(Path(path).read_text()).items()})


def _save_gas(path: Path, gas: GasModel) -> None:
    from .checkpoint import _pack

    path.write_text(json.dumps({"hyper": gas.hyper, "dtype": str(gas.node_table.dtype),
                                "state": _pack(gas.state_dict())}))


def _load_gas(path) -> GasModel:
    from .checkpoint import _unpack

    doc = json.loads(Path(path).read_text())
    h = doc["hyper"]
    with ad.use_profile(profile_for_dtype(doc.get("dtype", "float32"))):
        gas = GasModel(h["num_nodes"], h["feature_dim"], h["d_node"], h["d_time"], seed=h.get("seed", 0))
        gas.load_state_dict(_unpack(doc["state"]))
    return gas


def cmd_pretrain_gas(opts, out: Path) -> int:
    g, split, _ = _dataset(opts)
    tc = train_config(opts)
    with ad.use_profile(opts["profile"]):
        gas, info = pretrain_gas(g, split, tc.gas_config(), progress=_progress("gas"))
    _save_gas(out / "gas.json", gas)
    (out / "gas_info.json").write_text(json.dumps(info, indent=2, default=float))
    print(f"GAS pretrained: best validation AUC {info['best_score']:.4f} after {info['epochs']} epochs")
    return 0


def _samplers_for(opts, g, split, tc):
    """Load sampler files when given, otherwise fit what the mode needs."""
    from .trainer import prepare_samplers

    rates = _load_rates_json(opts["rates"]) if opts.get("rates") else None
    gas = _load_gas(opts["gas"]) if opts.get("gas") else None
    need_rates = tc.sampler_mode in ("DPS", "TDS_only", "no_fusion")
    need_gas = tc.sampler_mode in ("DPS", "GAS_only", "no_fusion")
    if (need_rates and rates is None) or (need_gas and gas is None):
        fitted_rates, fitted_gas = prepare_samplers(g, split, tc, progress=_progress("gas"))
        rates = rates if rates is not None else fitted_rates
        gas = gas if gas is not None else fitted_gas
    return (rates if need_rates else None), (gas if need_gas else None)


def cmd_train(opts, out: Path) -> int:
    g, split, name = _dataset(opts)
    tc = train_config(opts)
    with ad.use_profile(opts["profile"]):
        t0 = time.perf_counter()
        rates, gas = _samplers_for(opts, g, split, tc)
        model, report = train_dps(g, split, rates, gas, tc, progress=_progress(tc.sampler_mode))
        elapsed = time.perf_counter() - t0
    save_checkpoint(out / "model.json", model, rates, gas, config=opts, dataset_fingerprint=g.fingerprint())
    write_metrics(out / "metrics.csv", [report.csv_row("train", name, tc.seed)])
    (out / "report.json").write_text(report.to_json())
    plotting.plot_training(report, out / "training.png", title=f"{name} ({tc.sampler_mode})")
    print(f"{tc.sampler_mode}: test accuracy {report.accuracy:.4f}, AUC {report.auc:.4f} "
          f"({report.epochs} epochs, {elapsed:.1f}s)")
    return 0


def cmd_evaluate(opts, out: Path) -> int:
    g, split, name = _dataset(opts)
    model, rates, gas, manifest = load_checkpoint(opts["checkpoint"], expect_fingerprint=g.fingerprint())
    seed = manifest.get("config", {}).get("train", {}).get("seed", opts["seed"])
    with ad.use_profile(profile_for_dtype(manifest["dtype"])):
        predictor = LinkPredictor(model, make_samplers(model.mode, rates, gas), seed)
        report = evaluate_test(predictor, g, split, seed)
    write_metrics(out / "metrics.csv", [report.csv_row("evaluate", name, seed)])
    (out / "report.json").write_text(report.to_json())
    print(f"{model.mode}: test accuracy {report.accuracy:.4f}, AUC {report.auc:.4f}")
    return 0


def cmd_ablate(opts, out: Path) -> int:
    g, split, name = _dataset(opts)
    tc = train_config(opts)
    rates = _load_rates_json(opts["rates"]) if opts.get("rates") else None
    gas = _load_gas(opts["gas"]) if opts.get("gas") else None
    with ad.use_profile(opts["profile"]):
        table = ablation_run(g, split, tc, rates, gas, progress=_progress("ablate"))
    write_metrics(out / "metrics.csv", [r.csv_row("ablate", name, tc.seed) for r in table.values()])
    (out / "report.json").write_text(json.dumps({m: r.to_dict() for m, r in table.items()}, indent=2))
    plotting.plot_ablation(table, out / "ablation.png", title=f"Sampler ablation on {name}")
    for m, r in table.items():
        print(f"{m:10s} accuracy {r.accuracy:.4f}  AUC {r.auc:.4f}")
    return 0


def cmd_sweep(opts, out: Path) -> int:
    g, split, name = _dataset(opts)
    tc = train_config(opts)
    values = [_num(v) for v in opts["values"].split(",")] if opts.get("values") else None
    workers = 1 if opts["deterministic"] else opts["workers"]
    rows = sweep(g, split, tc, opts["axis"], values, workers=workers)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["axis", "value", "accuracy", "auc", "epochs", "seed"])
        w.writeheader()
        w.writerows(rows)
    plotting.plot_sweep(rows, out / f"sweep_{opts['axis']}.png")
    for r in rows:
        print(f"{r['axis']}={r['value']}: accuracy {r['accuracy']:.4f}  AUC {r['auc']:.4f}")
    return 0


def _num(s: str):
    s = s.strip()
    try:
        return int(s)
    except ValueError:
        return float(s)


def cmd_embed(opts, out: Path) -> int:
    g, split, _ = _dataset(opts)
    model, rates, gas, manifest = load_checkpoint(opts["checkpoint"], expect_fingerprint=g.fingerprint())
    q = np.loadtxt(opts["queries"], delimiter=",", ndmin=2, comments=("#", "%"))
    if q.shape[1] != 2:
        raise ConfigError("queries file needs two columns: node_id,time")
    nodes, times = q[:, 0].astype(np.int64), q[:, 1]
    if np.any((nodes < 0) | (nodes >= g.num_nodes)):
        raise ConfigError("query node id outside the dataset")
    seed = manifest.get("config", {}).get("train", {}).get("seed", opts["seed"])
    with ad.use_profile(profile_for_dtype(manifest["dtype"])):
        h = LinkPredictor(model, make_samplers(model.mode, rates, gas), seed).embeddings(g, nodes, times)
    with open(out / "embeddings.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "t"] + [f"h_{i + 1}" for i in range(h.shape[1])])
        for u, t, row in zip(nodes, times, h):
            w.writerow([int(u), repr(float(t))] + [repr(float(x)) for x in row])
    print(f"wrote {len(nodes)} embeddings of dimension {h.shape[1]}")
    return 0


def cmd_classify(opts, out: Path) -> int:
    g, split, name = _dataset(opts)
    model, rates, gas, manifest = load_checkpoint(opts["checkpoint"], expect_fingerprint=g.fingerprint())
    labels = load_labels(opts["labels"], g)
    seed = opts["seed"]
    with ad.use_profile(profile_for_dtype(manifest["dtype"])):
        predictor = LinkPredictor(model, make_samplers(model.mode, rates, gas), seed)
        _, report = train_node_classifier(predictor, g, labels, ClassifierConfig(seed=seed))
    write_metrics(out / "metrics.csv", [report.csv_row("classify", name, seed)])
    (out / "report.json").write_text(report.to_json())
    print(f"node classification: test AUC {report.auc:.4f}")
    return 0


def cmd_gradcheck(opts, out: Path) -> int:
    from .gradcheck import run_suite

    results = run_suite(seed=opts["seed"], tol=opts["tol"])
    with open(out / "gradcheck.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case", "rel_error", "n_params", "seconds", "passed"])
        for r in results:
            w.writerow([r.name, f"{r.rel_error:.3e}", r.n_params, f"{r.seconds:.3f}", int(r.passed)])
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:40s} {r.rel_error:.2e}")
    print(f"{len(results) - len(failed)}/{len(results)} cases passed")
    return 1 if failed else 0


COMMANDS = {
    "ingest": cmd_ingest, "synth": cmd_synth, "fit-tds": cmd_fit_tds, "pretrain-gas": cmd_pretrain_gas,
    "train": cmd_train, "evaluate": cmd_evaluate, "ablate": cmd_ablate, "sweep": cmd_sweep,
    "embed": cmd_embed, "gradcheck": cmd_gradcheck, "classify": cmd_classify,
}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dps", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON file of options (a written config.json works)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--deterministic", action="store_true", help="sequential execution only")
        sp.add_argument("--out", default="runs/out", help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")
        if data:
            sp.add_argument("data", nargs="?", help="dataset directory (from ingest/synth) or raw edge list")
            sp.add_argument("--features", action="store_true", help="raw edge list carries feature columns")
            sp.add_argument("--time-divisor", type=float, default=86400.0,
                            help="raw timestamps are divided by this (default: seconds to days)")

    def model_opts(sp):
        sp.add_argument("--mode", dest="sampler_mode", choices=MODES)
        sp.add_argument("--epochs", dest="max_epochs", type=int)
        sp.add_argument("--gas-epochs", dest="gas_max_epochs", type=int)
        sp.add_argument("--layers", type=int)
        sp.add_argument("--neighbors", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--dropout", type=float)
        sp.add_argument("--heads", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--d-node", type=int)
        sp.add_argument("--d-time", type=int)
        sp.add_argument("--off-grid", action="store_const", const=True, default=None,
                        help="allow values outside the search space")
        sp.add_argument("--profile", choices=("train", "test"), default="train",
                        help="train: float32; test: float64 with finiteness checks")
        sp.add_argument("--rates", help="rates.json from fit-tds")
        sp.add_argument("--gas", help="gas.json from pretrain-gas")

    sp = sub.add_parser("ingest", help="edge list to internal dataset plus summary statistics")
    common(sp)
    sp = sub.add_parser("synth", help="planted-preference synthetic dataset")
    common(sp, data=False)
    sp.add_argument("--nodes", type=int, default=500)
    sp.add_argument("--edges", type=int, default=20000)
    sp.add_argument("--communities", type=int, default=10)
    sp.add_argument("--decay", type=float, default=0.01)
    sp = sub.add_parser("fit-tds", help="fit per-node decay rates")
    common(sp)
    sp.add_argument("--budget", type=int, default=100, help="repetition events per node")
    sp = sub.add_parser("pretrain-gas", help="pretrain the attention sampler")
    common(sp)
    model_opts(sp)
    for name, text in (("train", "train DPS or an ablation variant"), ("ablate", "all five sampler variants")):
        sp = sub.add_parser(name, help=text)
        common(sp)
        model_opts(sp)
    sp = sub.add_parser("sweep", help="metric against one hyper-parameter")
    common(sp)
    model_opts(sp)
    sp.add_argument("--axis", choices=sorted(SWEEP_AXES), required=False, default="neighbors")
    sp.add_argument("--values", help="comma-separated settings (default: the whole search grid)")
    sp.add_argument("--workers", type=int, default=1)
    sp = sub.add_parser("evaluate", help="test metrics of a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp = sub.add_parser("embed", help="temporal embeddings at (node, time) queries")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--queries", required=True, help="CSV of node_id,time")
    sp = sub.add_parser("classify", help="node classification from frozen embeddings")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--labels", required=True, help="CSV of node_id,time,label")
    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(sp, data=False)
    sp.add_argument("--tol", type=float, default=1e-4)
    return p


def _explicit(argv) -> set:
    """Option names the user actually typed: parse again with every default suppressed."""
    quiet = build_parser()
    for sp in quiet._subparsers._group_actions[0].choices.values():  # noqa: SLF001
        for action in sp._actions:  # noqa: SLF001
            action.default = argparse.SUPPRESS
    return set(vars(quiet.parse_args(argv)))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        opts = resolve(args, _explicit(argv))
        out = Path(opts["out"])
        if args.command in ("pretrain-gas", "train", "ablate", "sweep"):
            train_config(opts)
        write_config(out, opts)
        return COMMANDS[args.command](opts, out)
    except (ConfigError, CheckpointError, FileNotFoundError, EdgeListParseError, EdgeListFormatError, SplitError,
            ValueError, KeyError) as e:
        print(f"dps {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
