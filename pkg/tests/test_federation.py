import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedc2a import classifier as C
from fedc2a.data import synthesize_corpus
from fedc2a.errors import AggregationError, PartitionError, RoundError
from fedc2a.federation import (
    CSV_COLUMNS,
    Client,
    ClientPartition,
    ClientUpdate,
    FedConfig,
    client_rng,
    dirichlet_partition,
    fedavg_aggregate,
    fedavg_weights,
    group_partition,
    init_federation,
    largest_remainder,
    local_train,
    run_experiment,
    run_round,
    sample_clients,
    write_round_csv,
)
from fedc2a.metrics import comm_cost, trainable_count
from fedc2a.model import ModelConfig, init_backbone
from fedc2a.tensor import AdamW, Tape, Tensor

from _util import tiny_config, tiny_spec


def _check_cover(parts, n):
    allidx = np.concatenate([p.indices for p in parts])
    assert len(allidx) == n and np.array_equal(np.sort(allidx), np.arange(n))
    assert all(len(p.indices) > 0 for p in parts)


def test_largest_remainder_sums():
    counts = largest_remainder(np.array([0.5, 0.3, 0.2]), 7)
    assert counts.sum() == 7 and counts.tolist() == [4, 2, 1]


@settings(max_examples=40, deadline=None)
@given(
    st.integers(0, 10_000),
    st.integers(2, 9),
    st.floats(0.01, 100.0),
    st.integers(2, 6),
)
def test_dirichlet_partition_disjoint_and_covering(seed, K, beta, n_classes):
    labels = np.random.default_rng(seed).integers(0, n_classes, size=60)
    parts = dirichlet_partition(labels, K, beta, seed)
    assert [p.client_id for p in parts] == list(range(K))
    _check_cover(parts, len(labels))


def test_dirichlet_partition_deterministic():
    labels = np.repeat(np.arange(4), 50)
    a = dirichlet_partition(labels, 5, 0.5, 3)
    b = dirichlet_partition(labels, 5, 0.5, 3)
    assert all(np.array_equal(x.indices, y.indices) for x, y in zip(a, b))


def test_dirichlet_partition_errors():
    labels = np.zeros(4, dtype=int)
    with pytest.raises(PartitionError):
        dirichlet_partition(labels, 5, 1.0, 0)
    with pytest.raises(PartitionError):
        dirichlet_partition(labels, 1, 1.0, 0)
    with pytest.raises(PartitionError):
        dirichlet_partition(labels, 2, 0.0, 0)


def _class_hist(labels, part):
    return np.bincount(labels[part.indices], minlength=10) / len(part.indices)


def test_dirichlet_large_beta_is_near_iid():
    labels = np.repeat(np.arange(10), 1000)
    tvd = [
        0.5 * np.abs(_class_hist(labels, p) - 0.1).sum()
        for seed in range(10)
        for p in dirichlet_partition(labels, 4, 1e4, seed)
    ]
    assert max(tvd) < 0.05


def test_dirichlet_small_beta_concentrates_classes():
    # with as many clients as classes every class lands on roughly one client
    labels = np.repeat(np.arange(10), 1000)
    top = [_class_hist(labels, p).max() for seed in range(10) for p in dirichlet_partition(labels, 10, 0.01, seed)]
    assert np.median(top) >= 0.80


def test_group_partition_layout():
    groups = np.repeat(np.arange(5), 400)
    labels = np.tile(np.arange(4), 500)
    parts = group_partition(labels, groups, 100, 5, 1.0, 0)
    _check_cover(parts, len(labels))
    per_group = np.bincount([p.group for p in parts])
    assert per_group.tolist() == [20] * 5
    for p in parts:
        assert np.all(groups[p.indices] == p.group)


def test_group_partition_errors():
    groups = np.repeat(np.arange(5), 10)
    with pytest.raises(PartitionError):
        group_partition(np.zeros(50, dtype=int), groups, 3, 5, 1.0, 0)


# -- aggregation ----------------------------------------------------------------


def test_fedavg_two_clients():
    assert np.allclose(fedavg_weights([60, 40]), [0.6, 0.4], atol=0)
    out = fedavg_aggregate([({"w": np.array([1.0])}, 60), ({"w": np.array([2.0])}, 40)])
    assert abs(out["w"][0] - 1.4) < 1e-15


def test_fedavg_identical_is_identity():
    rng = np.random.default_rng(0)
    p = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}
    out = fedavg_aggregate([(p, n) for n in (7, 3, 11)])
    assert all(np.array_equal(out[k], p[k]) for k in p)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 1000), min_size=1, max_size=12))
def test_fedavg_weights_sum_to_one(sizes):
    w = fedavg_weights(sizes)
    assert abs(w.sum() - 1) < 1e-12 and np.all(w > 0)


def test_fedavg_matches_weighted_mean_oracle():
    rng = np.random.default_rng(1)
    ups = [({"a": rng.normal(size=(4, 3)), "b": rng.normal(size=5)}, int(rng.integers(1, 100))) for _ in range(5)]
    out = fedavg_aggregate(ups)
    total = sum(n for _, n in ups)
    for k in ("a", "b"):
        oracle = sum(p[k] * (n / total) for p, n in ups)
        assert np.max(np.abs(out[k] - oracle)) < 1e-12


def test_fedavg_schema_mismatch():
    with pytest.raises(AggregationError):
        fedavg_aggregate([({"a": np.zeros(2)}, 1), ({"b": np.zeros(2)}, 1)])
    with pytest.raises(AggregationError):
        fedavg_aggregate([({"a": np.zeros(2)}, 1), ({"a": np.zeros(3)}, 1)])
    with pytest.raises(AggregationError):
        fedavg_aggregate([])


# -- rounds -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def setup():
    spec = tiny_spec()
    corpus = synthesize_corpus(spec)
    cfg = tiny_config(vocab_size=spec.vocab_size, max_seq_len=spec.seq_len, n_classes=spec.n_classes)
    backbone = init_backbone(cfg.with_mode("full"), 0)
    return cfg, corpus, backbone


def _state(setup, mode="c2a", K=4, **fed_kw):
    cfg, corpus, backbone = setup
    fed = FedConfig(**{"n_clients": K, "fraction": 0.5, "batch_size": 8, "lr": 5e-3, "rounds": 3, **fed_kw})
    parts = dirichlet_partition(corpus.train.labels, K, 1.0, 0)
    return init_federation(cfg.with_mode(mode), fed, backbone, corpus.train, corpus.test, parts)


def test_sample_clients(setup):
    state = _state(setup, K=8, fraction=0.25)
    ids = sample_clients(state, 1)
    assert len(ids) == 2 and len(set(ids)) == 2
    assert ids == sample_clients(state, 1)
    assert sample_clients(_state(setup, K=8, fraction=1.0), 3) == list(range(8))


def test_sample_count_at_paper_scale(setup):
    cfg, corpus, backbone = setup
    parts = [ClientPartition(i, np.array([i])) for i in range(100)]
    state = init_federation(cfg, FedConfig(n_clients=100), backbone, corpus.train, corpus.test, parts)
    for r in range(1, 6):
        ids = sample_clients(state, r)
        assert len(ids) == 25 == len(set(ids))


def test_zero_epochs_returns_global(setup):
    state = _state(setup, local_epochs=0)
    client = state.clients[0]
    u = client.local_train(state.global_params, state.template, state.cfg, state.fed, 1)
    assert all(np.array_equal(u.params[k], state.global_params[k]) for k in state.global_params)
    assert u.losses == []


def test_local_training_reduces_loss(setup):
    cfg, corpus, backbone = setup
    state = _state(setup, mode="adapter", local_epochs=50, batch_size=16, lr=1e-2)
    client = Client(0, corpus.train)
    u = client.local_train(state.global_params, state.template, state.cfg, state.fed, 1)
    per_epoch = len(u.losses) // 50
    assert np.mean(u.losses[-per_epoch:]) < np.mean(u.losses[:per_epoch])


def test_client_data_is_private(setup):
    state = _state(setup)
    assert not hasattr(state.clients[0], "data") and not hasattr(state.clients[0], "tokens")


def test_poisoned_client_aborts(setup):
    state = _state(setup)
    bad = {k: v.copy() for k, v in state.global_params.items()}
    bad["head.bias"][:] = np.nan
    u = state.clients[0].local_train(bad, state.template, state.cfg, state.fed, 1)
    assert u.aborted and u.params == {} and "non-finite" in u.error


def test_aborted_clients_excluded(setup, monkeypatch):
    state = _state(setup, fraction=1.0)
    original = Client.local_train

    def flaky(self, *args):
        if self.client_id == 2:
            return ClientUpdate(self.client_id, {}, len(self), [], aborted=True, error="boom")
        return original(self, *args)

    monkeypatch.setattr(Client, "local_train", flaky)
    log = run_round(state)
    assert log.aborted == [2] and 2 not in log.cka_drift
    assert log.bytes_up == 3 * state.n_trainable * 8 and log.bytes_down == 4 * state.n_trainable * 8

    def dead(self, *args):
        return ClientUpdate(self.client_id, {}, len(self), [], aborted=True)

    monkeypatch.setattr(Client, "local_train", dead)
    with pytest.raises(RoundError):
        run_round(state)


def test_one_client_round_equals_local_result(setup):
    cfg, corpus, backbone = setup
    fed = FedConfig(n_clients=1, fraction=1.0, batch_size=8, lr=5e-3)
    state = init_federation(cfg, fed, backbone, corpus.train, corpus.test, [ClientPartition(0, np.arange(40))])
    theta = dict(state.global_params)
    u = local_train(corpus.train.subset(np.arange(40)), 0, theta, state.template, cfg, fed, 1)
    run_round(state)
    assert all(np.array_equal(state.global_params[k], u.params[k]) for k in theta)


def _centralized_losses(cfg, template, data, fed, rounds):
    """Plain training loop: each round is one epoch with a fresh optimizer."""
    params = dict(template)
    trainable = {k: Tensor(template[k].data.copy(), requires_grad=True) for k in C.trainable_names(template)}
    params.update(trainable)
    means = []
    for r in range(1, rounds + 1):
        opt = AdamW(trainable, lr=fed.lr, weight_decay=fed.weight_decay)
        order = client_rng(fed.seed, 0, r).permutation(len(data))
        losses = []
        for s in range(0, len(data), fed.batch_size):
            idx = order[s : s + fed.batch_size]
            opt.zero_grad()
            with Tape() as tape:
                loss = C.loss(params, cfg, data.tokens[idx], data.labels[idx])
            tape.backward(loss)
            opt.step()
            losses.append(loss.item())
        means.append(float(np.mean(losses)))
    return means, {k: t.data for k, t in trainable.items()}


def test_single_client_federation_matches_centralized(setup):
    cfg, corpus, backbone = setup
    data = corpus.train.subset(np.arange(48))
    fed = FedConfig(n_clients=1, fraction=1.0, local_epochs=1, batch_size=16, lr=5e-3, rounds=20)
    state = init_federation(cfg, fed, backbone, data, corpus.test, [ClientPartition(0, np.arange(48))])
    result = run_experiment(state)
    fed_losses = [log.client_losses[0] for log in result.logs]
    oracle, final = _centralized_losses(cfg, state.template, data, fed, 20)
    assert np.max(np.abs(np.array(fed_losses) - oracle)) < 1e-12
    assert all(np.max(np.abs(result.final_params[k] - final[k])) < 1e-12 for k in final)


def test_zero_rounds_has_only_initial_row(setup, tmp_path):
    state = _state(setup)
    result = run_experiment(state, rounds=0)
    write_round_csv(result, tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert len(rows) == 2 and rows[1][:2] == ["0", "AGG"]


def test_csv_schema_and_bytes(setup, tmp_path):
    state = _state(setup)
    result = run_experiment(state)
    write_round_csv(result, tmp_path / "r.csv")
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    agg = [r for r in rows if r["client_id"] == "AGG"]
    assert [int(r["round"]) for r in agg] == [0, 1, 2, 3]
    per = trainable_count(state.cfg) * 8
    for r in agg[1:]:
        assert int(r["bytes_up"]) + int(r["bytes_down"]) == 2 * 2 * per
        assert 0.0 <= float(r["test_acc"]) <= 1.0 and 0.0 <= float(r["cka_drift"]) <= 1.0
    for r in rows:
        if r["client_id"] != "AGG":
            assert r["test_acc"] == "" and float(r["loss"]) > 0


def test_rerun_is_identical(setup, tmp_path):
    paths = []
    for i in range(2):
        result = run_experiment(_state(setup))
        paths.append(tmp_path / f"{i}.csv")
        write_round_csv(result, paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_worker_count_does_not_change_results(setup, tmp_path):
    a = run_experiment(_state(setup, rounds=2, workers=1))
    b = run_experiment(_state(setup, rounds=2, workers=2))
    write_round_csv(a, tmp_path / "a.csv")
    write_round_csv(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_stop_at_target(setup):
    result = run_experiment(_state(setup, rounds=5), stop_at=0.0)
    assert len(result.logs) == 1


def test_bad_fraction(setup):
    with pytest.raises(ValueError):
        _state(setup, fraction=0.0)


def test_c2a_moves_fewer_bytes_than_adapter():
    cfg = ModelConfig()
    assert comm_cost(cfg) < comm_cost(cfg.with_mode("adapter"))
