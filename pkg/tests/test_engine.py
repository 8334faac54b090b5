import inspect

import numpy as np
import pytest

from fedforge import config as cfgmod
from fedforge import experiment as ex
from fedforge.aggregation import AggregatorConfig
from fedforge.analytics import records_to_csv
from fedforge.datasets import Trigger
from fedforge.engine import (AggregationError, Federation, FederationConfig, MaliciousClient, ClientState,
                             local_train_benign, local_train_malicious, run_round, sample_clients, stream)
from fedforge.model import ModelSpec, init_model


def small_cfg(**changes):
    base = {"dataset.per_class": 40, "dataset.test_per_class": 10, "federation.pretrain_rounds": 3,
            "federation.attack_rounds": 4, "federation.persistence_rounds": 3, "attack.e_delta": 5,
            "federation.fraction": 0.5, "partition.clients": 6}
    base.update(changes)
    return cfgmod.load("paper-toy").replace(**base)


def simulate(cfg):
    train, test = ex.load_data(cfg)
    return ex.simulate(cfg, train, test)


@pytest.fixture(scope="module")
def client_data(toy_data):
    train, _ = toy_data
    return train.subset(np.arange(0, 400, 5))


@pytest.fixture(scope="module")
def global_model():
    return init_model(ModelSpec("mlp", (16, 16, 1), 10, hidden=16), np.random.default_rng(0))


def test_config_validation():
    for bad in (dict(fraction=0.0), dict(fraction=1.5), dict(attack_start=5, attack_end=3),
                dict(attack_end=200), dict(malicious_ids=(20,))):
        with pytest.raises(ValueError):
            FederationConfig(**bad)


def test_sample_clients():
    assert sample_clients(0, FederationConfig(fraction=1.0)) == list(range(20))
    cfg = FederationConfig(fraction=0.1)
    assert len(sample_clients(3, cfg)) == 2
    assert sample_clients(7, cfg) == sample_clients(7, cfg)
    picks = {tuple(sample_clients(r, cfg)) for r in range(30)}
    assert len(picks) > 1


def test_expected_attacker_selections_over_window():
    counts = []
    for seed in range(400):
        cfg = FederationConfig(fraction=0.1, rounds=50, attack_start=0, attack_end=50, seed=seed)
        counts.append(sum(0 in sample_clients(r, cfg) for r in range(50)))
    assert np.mean(counts) == pytest.approx(5.0, abs=0.3)


def test_streams_are_independent():
    a = stream(1, "sampling").integers(1 << 30, size=4)
    b = stream(1, "train").integers(1 << 30, size=4)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, stream(1, "sampling").integers(1 << 30, size=4))


@pytest.mark.parametrize("epochs,lr", [(0, 0.1), (2, 0.0)])
def test_zero_delta_without_training(global_model, client_data, epochs, lr):
    before = global_model.params.copy()
    up = local_train_benign(global_model, client_data, epochs, lr, 16, np.random.default_rng(0), client_id=4)
    assert np.all(up.delta == 0) and up.n_k == len(client_data) and up.client_id == 4
    assert np.array_equal(global_model.params, before)


def test_malicious_without_poison_equals_benign(global_model, client_data):
    benign = local_train_benign(global_model, client_data, 1, 0.1, 16, np.random.default_rng(3))
    trig = Trigger.top_left((16, 16, 1), 0, patch=3)
    zero_frac = local_train_malicious(global_model, client_data, trig, 1, 0.1, 0.0, 16, np.random.default_rng(3))
    empty = Trigger(trig.pattern, np.zeros_like(trig.mask), 0)
    zero_mask = local_train_malicious(global_model, client_data, empty, 1, 0.1, 0.3, 16, np.random.default_rng(3))
    assert np.array_equal(benign.delta, zero_frac.delta)
    assert np.array_equal(benign.delta, zero_mask.delta)


def _federation(model, data, agg, clients=1, fraction=1.0, epochs=1):
    fed = FederationConfig(clients=clients, fraction=fraction, rounds=3, attack_start=0, attack_end=0,
                           benign_epochs=epochs, batch_size=16, seed=5)
    parts = np.array_split(np.arange(len(data)), clients)
    return Federation(model=model, train=data, test=data, clients=[ClientState(i, p) for i, p in enumerate(parts)],
                      fed=fed, agg=agg)


def test_single_client_fedavg_moves_global_by_its_delta(global_model, client_data):
    fedn = _federation(global_model, client_data, AggregatorConfig())
    expected = local_train_benign(global_model, client_data, 1, 0.1, 16, stream(5, "train", 0, 0))
    run_round(fedn)
    assert np.array_equal(fedn.model.params, global_model.params + expected.delta)


def test_zero_updates_conserve_parameters(global_model, client_data):
    fedn = _federation(global_model, client_data, AggregatorConfig(), clients=4, epochs=0)
    for _ in range(3):
        rec = run_round(fedn)
        assert rec.update_norm == 0.0
    assert np.array_equal(fedn.model.params, global_model.params)


def test_aggregation_error_names_round(global_model, client_data):
    fedn = _federation(global_model, client_data, AggregatorConfig(rule="krum", f=2), clients=4)
    with pytest.raises(AggregationError) as err:
        run_round(fedn)
    assert err.value.round == 0 and "round 0" in str(err.value)


def test_attacker_interface_is_black_box():
    params = list(inspect.signature(MaliciousClient.attack).parameters)
    assert params == ["self", "broadcast", "rnd"]
    with pytest.raises(ValueError):
        MaliciousClient(0, None, Trigger.top_left((8, 8, 1), 0), FederationConfig(), mode="boost")


def test_attack_only_inside_window():
    cfg = small_cfg()
    fedn = simulate(cfg)
    start, end = cfg.federation.window
    flagged = [r.round for r in fedn.records if r.malicious_selected]
    chosen = [r.round for r in fedn.records if 0 in r.selected]
    assert flagged == [r for r in chosen if start <= r < end]
    assert len(fedn.attackers[0].traces) == len(flagged)
    for r in fedn.records:
        if not r.malicious_selected:
            assert np.isnan(r.mean_C) and r.path_update_norms == []


def test_replay_is_identical():
    cfg = small_cfg()
    a, b = simulate(cfg), simulate(cfg)
    assert records_to_csv(a.records, timing=False) == records_to_csv(b.records, timing=False)
    assert np.array_equal(a.model.params, b.model.params)


def test_benign_run_improves_accuracy():
    cfg = small_cfg(**{"attack.enabled": False, "federation.pretrain_rounds": 30, "federation.attack_rounds": 0,
                       "federation.persistence_rounds": 0, "federation.fraction": 0.1,
                       "partition.clients": 20})
    fedn = simulate(cfg)
    assert not fedn.attackers
    assert fedn.records[-1].mta >= fedn.records[0].mta
    assert fedn.records[-1].mta >= 0.9


def test_malicious_update_outgrows_benign_without_fusion():
    cfg = cfgmod.load("paper-toy").replace(**{"fusion.enabled": False})
    train, test = ex.load_data(cfg)
    fedn = ex.build_federation(cfg, train, test)
    start, _ = cfg.federation.window
    while fedn.round < start:
        run_round(fedn)
    attacker = fedn.attackers[0]
    mal = attacker.attack(fedn.model.copy(), start).update
    benign = [local_train_benign(fedn.model, fedn.client_data(c), cfg.federation.benign_epochs, cfg.federation.lr,
                                 cfg.federation.batch_size, stream(cfg.seed, "train", c, start)).delta
              for c in range(1, cfg.partition.clients)]
    assert np.linalg.norm(mal.delta) > np.median([np.linalg.norm(d) for d in benign])
