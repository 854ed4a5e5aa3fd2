import numpy as np
import pytest

from dps import autodiff as ad
from dps.fusion_model import MODES
from dps.graph_store import chrono_split, synth_generate
from dps.trainer import (ClassifierConfig, TrainConfig, ablation_run, balanced_batches, chrono_label_split,
                         fit_classifier, iterate_batches, link_loss, run_early_stopping, run_mode, sweep)

TINY = dict(layers=1, neighbors=5, d_node=8, d_time=4, max_epochs=2, gas_max_epochs=1, batch_size=100,
            off_grid=True)


@pytest.fixture(scope="module")
def data():
    g = synth_generate(40, 600, 4, seed=1)
    return g, chrono_split(g)


def test_config_search_space_enforced():
    with pytest.raises(ValueError):
        TrainConfig(neighbors=7)
    assert TrainConfig(neighbors=7, off_grid=True).neighbors == 7
    with pytest.raises(ValueError):
        TrainConfig(sampler_mode="mystery")
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 0.1})
    gc = TrainConfig(neighbors=10).gas_config()
    assert gc.neighbors == 10 and gc.d_node == 64


def test_link_loss_value():
    with ad.use_profile("test"):
        loss = link_loss(ad.Tensor(np.array([0.8, 0.5])), ad.Tensor(np.array([0.2, 0.5])))
    assert float(loss.data) == pytest.approx(np.mean([-2 * np.log(0.8), -2 * np.log(0.5)]))


def test_link_loss_is_finite_at_saturation():
    with ad.use_profile("test"):
        loss = link_loss(ad.Tensor(np.array([0.0])), ad.Tensor(np.array([1.0])))
    assert np.isfinite(float(loss.data))


def test_iterate_batches_is_a_permutation():
    ids = np.arange(23)
    batches = list(iterate_batches(ids, 5, np.random.default_rng(0)))
    assert [len(b) for b in batches] == [5, 5, 5, 5, 3]
    assert sorted(np.concatenate(batches).tolist()) == list(range(23))


def test_early_stopping_restores_best_state():
    scores = iter([0.5, 0.7, 0.6, 0.65, 0.9])
    state = {"epoch": -1}

    out = run_early_stopping(lambda e: state.update(epoch=e) or 0.0, lambda: next(scores),
                             lambda: dict(state), lambda s: state.update(s), patience=2, max_epochs=10)
    assert out["best_epoch"] == 1 and out["epochs"] == 4 and state["epoch"] == 1


@pytest.mark.parametrize("mode", MODES)
def test_each_mode_trains(data, mode):
    g, sp = data
    with ad.use_profile("train"):
        _, rep = run_mode(g, sp, TrainConfig(sampler_mode=mode, **TINY))
    assert 0 <= rep.auc <= 1 and rep.mode == mode
    assert len(rep.probe_loss) == rep.epochs + 1 and len(rep.val_auc_history) == rep.epochs


def test_training_is_deterministic(data):
    g, sp = data
    cfg = TrainConfig(**TINY)
    with ad.use_profile("train"):
        m1, r1 = run_mode(g, sp, cfg)
        m2, r2 = run_mode(g, sp, cfg)
    assert r1.to_dict() == r2.to_dict()
    for k, v in m1.state_dict().items():
        assert np.array_equal(v, m2.state_dict()[k])


def test_ablation_isolates_samplers(data):
    g, sp = data
    cfg = TrainConfig(**TINY)
    with ad.use_profile("train"):
        from dps.tds import fit_all
        from dps.gas import pretrain_gas

        rates = fit_all(g, sp)
        gas, _ = pretrain_gas(g, sp, cfg.gas_config())
        rates.reads = 0
        before = gas.score_calls
        table = ablation_run(g, sp, cfg, rates, gas, modes=("TDS_only",))
        assert gas.score_calls == before and rates.reads > 0
        rates.reads = 0
        table.update(ablation_run(g, sp, cfg, rates, gas, modes=("GAS_only",)))
        assert rates.reads == 0 and gas.score_calls > before
    assert set(table) == {"TDS_only", "GAS_only"}


def test_sweep_rows(data):
    g, sp = data
    with ad.use_profile("train"):
        rows = sweep(g, sp, TrainConfig(**TINY), "neighbors", [3, 5])
    assert [r["value"] for r in rows] == [3, 5]
    with pytest.raises(ValueError):
        sweep(g, sp, TrainConfig(**TINY), "lr")


def test_balanced_batches_and_label_split():
    y = np.array([1] + [0] * 9)
    for b in balanced_batches(y, 4, np.random.default_rng(0)):
        assert y[b].sum() * 2 == len(b)
    tr, va, te = chrono_label_split(20)
    assert (len(tr), len(va), len(te)) == (14, 3, 3)


def test_classifier_learns_separable_labels():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(400, 6))
    y = (X[:, 0] + 0.3 * X[:, 1] > 0.8).astype(int)
    with ad.use_profile("train"):
        _, rep = fit_classifier(X, y, ClassifierConfig(max_epochs=40, lr=1e-2))
    assert rep.auc > 0.9


def test_classifier_rejects_single_class():
    with pytest.raises(ValueError, match="single class"):
        fit_classifier(np.zeros((30, 2)), np.zeros(30, int))


def test_first_epoch_lowers_probe_loss(data):
    g, sp = data
    with ad.use_profile("train"):
        _, rep = run_mode(g, sp, TrainConfig(**{**TINY, "lr": 0.01, "max_epochs": 1}))
    assert rep.probe_loss[1] < rep.probe_loss[0]


def test_identical_features_give_chance_auc():
    y = np.tile([0, 1, 0, 0], 25)
    with ad.use_profile("train"):
        _, rep = fit_classifier(np.ones((100, 4)), y, ClassifierConfig(max_epochs=3))
    assert rep.auc == 0.5
