import csv
import json

import numpy as np
import pytest

from dps import autodiff as ad
from dps import plotting
from dps.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from dps.cli import main
from dps.graph_store import chrono_split, synth_generate
from dps.metrics import EvalReport
from dps.trainer import LinkPredictor, TrainConfig, evaluate_test, make_samplers, run_mode
from dps.tds import fit_all

TINY_FLAGS = ["--layers", "1", "--neighbors", "5", "--d-node", "8", "--d-time", "4", "--epochs", "1",
              "--gas-epochs", "1", "--batch-size", "100", "--off-grid"]


@pytest.fixture(scope="module")
def trained():
    g = synth_generate(40, 600, 4, seed=1)
    sp = chrono_split(g)
    cfg = TrainConfig(layers=1, neighbors=5, d_node=8, d_time=4, max_epochs=1, gas_max_epochs=1,
                      batch_size=100, off_grid=True)
    with ad.use_profile("train"):
        from dps.gas import pretrain_gas

        rates = fit_all(g, sp)
        gas, _ = pretrain_gas(g, sp, cfg.gas_config())
        model, rep = run_mode(g, sp, cfg, rates, gas)
    return g, sp, model, rates, gas, rep


def test_checkpoint_preserves_metrics_exactly(tmp_path, trained):
    g, sp, model, rates, gas, rep = trained
    path = save_checkpoint(tmp_path / "m.json", model, rates, gas, dataset_fingerprint=g.fingerprint())
    m2, r2, g2, manifest = load_checkpoint(path, expect_fingerprint=g.fingerprint())
    assert manifest["dtype"] == "float32" and m2.node_table.dtype == np.float32
    for k, v in model.state_dict().items():
        assert np.array_equal(v, m2.state_dict()[k])
    assert np.array_equal(r2.lam, rates.lam)
    with ad.use_profile("train"):
        again = evaluate_test(LinkPredictor(m2, make_samplers(m2.mode, r2, g2), 0), g, sp, 0)
    assert again.auc == rep.auc and again.accuracy == rep.accuracy


def test_checkpoint_rejects_other_dataset_and_bad_files(tmp_path, trained):
    g, _, model, *_ = trained
    path = save_checkpoint(tmp_path / "m.json", model, dataset_fingerprint=g.fingerprint())
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expect_fingerprint="something else")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.json")
    doc = json.loads(path.read_text())
    doc["manifest"]["format_version"] = 99
    (tmp_path / "v.json").write_text(json.dumps(doc))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "v.json")


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_cli_pipeline(tmp_path, capsys):
    data = tmp_path / "syn"
    assert main(["synth", "--nodes", "40", "--edges", "600", "--communities", "4", "--out", str(data)]) == 0
    ds = str(data / "dataset")
    assert main(["fit-tds", ds, "--out", str(tmp_path / "tds")]) == 0
    assert (tmp_path / "tds" / "rates.txt").exists() and (tmp_path / "tds" / "decay_rates.png").exists()
    run = tmp_path / "run"
    assert main(["train", ds, "--out", str(run), *TINY_FLAGS]) == 0
    row = read_csv(run / "metrics.csv")[0]
    assert row["mode"] == "DPS" and (run / "training.png").exists()
    ev = tmp_path / "ev"
    assert main(["evaluate", ds, "--checkpoint", str(run / "model.json"), "--out", str(ev)]) == 0
    assert read_csv(ev / "metrics.csv")[0]["auc"] == row["auc"]
    q = tmp_path / "q.csv"
    q.write_text("0,0.5\n3,0.9\n")
    assert main(["embed", ds, "--checkpoint", str(run / "model.json"), "--queries", str(q),
                 "--out", str(tmp_path / "emb")]) == 0
    emb = read_csv(tmp_path / "emb" / "embeddings.csv")
    assert len(emb) == 2 and len(emb[0]) == 2 + 8


def test_cli_config_replay(tmp_path):
    data = tmp_path / "syn"
    main(["synth", "--nodes", "40", "--edges", "600", "--communities", "4", "--out", str(data)])
    ds = str(data / "dataset")
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", ds, "--out", str(a), *TINY_FLAGS, "--mode", "TDS_only"]) == 0
    assert main(["train", "--config", str(a / "config.json"), "--out", str(b)]) == 0
    assert read_csv(a / "metrics.csv") == read_csv(b / "metrics.csv")


def test_cli_errors(tmp_path, capsys):
    assert main(["train", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2
    assert "not found" in capsys.readouterr().err
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["fit-tds", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "unknown config keys" in capsys.readouterr().err
    data = tmp_path / "syn"
    main(["synth", "--nodes", "40", "--edges", "600", "--out", str(data)])
    assert main(["train", str(data / "dataset"), "--neighbors", "7", "--out", str(tmp_path / "o")]) == 2
    assert "search space" in capsys.readouterr().err


def test_plots_are_written(tmp_path, trained):
    g, _, _, rates, _, rep = trained
    assert plotting.plot_training(rep, tmp_path / "t.png").stat().st_size > 0
    reps = {"DPS": rep, "uniform": EvalReport(0.6, 0.7, 1, 1)}
    assert plotting.plot_ablation(reps, tmp_path / "a.png").exists()
    rows = [{"axis": "neighbors", "value": v, "auc": a} for v, a in ((10, 0.8), (20, 0.85))]
    assert plotting.plot_sweep(rows, tmp_path / "s.png").exists()
    assert plotting.plot_decay_rates(rates, tmp_path / "d.png").exists()
    assert plotting.plot_timeline(g, tmp_path / "tl.png").exists()
    with pytest.raises(ValueError):
        plotting.plot_sweep([], tmp_path / "x.png")
