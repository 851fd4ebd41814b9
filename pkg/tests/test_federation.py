from dataclasses import replace

import numpy as np
import pytest

from fedbucket import costing
from fedbucket.data import make_synthetic
from fedbucket.errors import CorruptPayloadError, InputError
from fedbucket.federation import (
    CALIBRATION_ROUND, PretrainConfig, RoundConfig, ServerState, _aggregate, _client_work,
    _decode_client, _make_codec, calibrate_codebooks, calibration_round, make_partition,
    prepare_initial_model, run_experiment, run_round, sample_clients)
from fedbucket.model import LocalTrainConfig, ModelSpec, init_model
from fedbucket.rng import derive_seed

SPEC = ModelSpec.mlp([8, 6, 3])


@pytest.fixture(scope="module")
def data():
    return make_synthetic(3, 60, 8, 0.5, seed=1), make_synthetic(3, 30, 8, 0.5, seed=2)


def _cfg(**kw):
    base = dict(total_clients=6, sampled_per_round=3, rounds=4, levels=16, refresh_period=2,
                local=LocalTrainConfig(epochs=1, learning_rate=0.05, batch_size=5), seed=3)
    base.update(kw)
    return RoundConfig(**base)


def test_sampling_is_pure_and_sorted():
    a = sample_clients(100, 10, 7, 1)
    assert a == sample_clients(100, 10, 7, 1)
    assert list(a) == sorted(set(a)) and len(a) == 10
    assert sample_clients(5, 5, 0, 0) == (0, 1, 2, 3, 4)
    with pytest.raises(InputError):
        sample_clients(3, 4, 0, 0)


def test_sampling_frequency_is_uniform():
    counts = np.zeros(100)
    for k in range(10_000):
        counts[list(sample_clients(100, 10, k, 0))] += 1
    freq = counts / 10_000
    sigma = np.sqrt(0.1 * 0.9 / 10_000)
    assert np.all(np.abs(freq - 0.1) <= 3 * sigma)


def test_aggregate_is_the_plain_mean():
    out = _aggregate([[np.array([1.0, 3.0])], [np.array([3.0, 5.0])]], [1.0, 1.0])
    assert out[0].tolist() == [2.0, 4.0]
    weighted = _aggregate([[np.array([0.0])], [np.array([3.0])]], [1.0, 2.0])
    assert weighted[0].tolist() == [2.0]


def test_zero_learning_rate_keeps_model(data):
    train, _ = data
    cfg = _cfg(quantiser="none", total_clients=1, sampled_per_round=1, rounds=1,
               local=LocalTrainConfig(learning_rate=0.0))
    res = run_experiment(cfg, SPEC, train)
    assert res.final_params.same_as(res.initial_params)


def test_config_validation():
    with pytest.raises(InputError):
        _cfg(quantiser="topk")
    with pytest.raises(InputError):
        _cfg(sampled_per_round=7)
    with pytest.raises(InputError):
        _cfg(boundary_bits=8)
    with pytest.raises(InputError):
        _cfg(levels=0)


def test_calibration_round_accounting(data):
    train, _ = data
    cfg = _cfg()
    partition = make_partition(train, cfg.total_clients, None, cfg.seed)
    update, cost = calibration_round(init_model(SPEC, 0), cfg, partition, train)
    d = SPEC.total_dim
    assert cost.round == CALIBRATION_ROUND and cost.clients == 1
    assert cost.uplink_index_bits == 32 * d and cost.downlink_bits == 32 * d
    assert cost.baseline_bits == 0 and cost.wire_consistent
    quantised = replace(cfg, downlink_levels=16)
    assert calibration_round(init_model(SPEC, 0), quantised, partition, train)[1].downlink_bits == 0


@pytest.mark.parametrize("quantiser", ["none", "bu", "bq", "qsgd"])
@pytest.mark.parametrize("downlink", [None, 8])
def test_every_round_is_wire_consistent(data, quantiser, downlink):
    train, test = data
    cfg = _cfg(quantiser=quantiser, downlink_levels=downlink, downlink_refresh_period=3)
    res = run_experiment(cfg, SPEC, train, test)
    assert len(res.records) == 4
    assert all(r.wire_consistent for r in res.ledger)
    assert [r.refresh for r in res.records] == ([quantiser in ("bu", "bq") and k % 2 == 0
                                                for k in range(4)])
    assert res.summary["final_test_accuracy"] == res.records[-1].test_accuracy


def test_model_scope_sends_one_table(data):
    train, _ = data
    cfg = _cfg(quantiser="bu", codebook_scope="model")
    res = run_experiment(cfg, SPEC, train)
    first = res.records[0].cost
    assert first.uplink_codebook_bits_actual == 16 * 16
    assert first.uplink_codebook_bits == costing.round_total(SPEC, cfg.cost_config()).uplink - first.uplink_index_bits


def test_threads_do_not_change_results(data):
    train, test = data
    for q in ("bu", "qsgd"):
        a = run_experiment(_cfg(quantiser=q, workers=1), SPEC, train, test)
        b = run_experiment(_cfg(quantiser=q, workers=3), SPEC, train, test)
        assert a.final_params.same_as(b.final_params)
        assert [r.cost for r in a.records] == [r.cost for r in b.records]


def test_stale_codebook_is_rejected(data):
    train, _ = data
    cfg = _cfg(quantiser="bu")
    params = init_model(SPEC, 0)
    partition = make_partition(train, cfg.total_clients, None, cfg.seed)
    update, _ = calibration_round(params, cfg, partition, train)
    old = _make_codec(calibrate_codebooks(update, "bu", 16), 16, 0)
    new = _make_codec(calibrate_codebooks(update, "bu", 16, margin=2.0), 16, 0)
    shard = train.subset(partition.assignments[0])
    msg = _client_work(ServerState(params, uplink=old), cfg, shard, 0, 0, True)
    assert len(_decode_client(msg, cfg, SPEC, old)) == 2
    with pytest.raises(CorruptPayloadError):
        _decode_client(msg, cfg, SPEC, new)


def test_bucketed_round_needs_codebooks(data):
    train, _ = data
    cfg = _cfg(quantiser="bu")
    partition = make_partition(train, cfg.total_clients, None, cfg.seed)
    with pytest.raises(InputError):
        run_round(ServerState(init_model(SPEC, 0)), cfg, partition, train)


def test_zero_range_layer_falls_back():
    cbs = calibrate_codebooks([np.zeros(4), np.array([0.0, 1.0])], "bu", 8)
    assert cbs[0].lo < 0 < cbs[0].hi and cbs[1].lo == 0.0


def test_bq_ignores_margin():
    v = [np.random.default_rng(0).standard_normal(100)]
    assert calibrate_codebooks(v, "bq", 8, margin=1.0) == calibrate_codebooks(v, "bq", 8, margin=3.0)
    wide = calibrate_codebooks(v, "bu", 8, margin=3.0)[0]
    assert wide.hi - wide.lo == pytest.approx(3 * np.ptp(v[0]))


def test_pretraining_keeps_split_even_without_epochs(data):
    train, _ = data
    trained, fed = prepare_initial_model(_cfg(pretrain=PretrainConfig(3, 0.5)), SPEC, train)
    scratch, fed0 = prepare_initial_model(_cfg(pretrain=PretrainConfig(0, 0.5)), SPEC, train)
    assert len(fed) == len(fed0) == 90
    assert np.array_equal(fed.labels, fed0.labels)
    assert scratch.same_as(init_model(SPEC, derive_seed(3, "init")))
    assert not trained.same_as(scratch)


def test_zero_rounds(data):
    train, test = data
    res = run_experiment(_cfg(rounds=0), SPEC, train, test)
    assert res.records == [] and len(res.ledger) == 0
    assert res.summary["final_test_accuracy"] == res.initial_test[1]


def test_summary_totals(data):
    train, test = data
    res = run_experiment(_cfg(quantiser="bu"), SPEC, train, test)
    s = res.summary
    assert s["total_bits_actual"] == res.ledger.total_actual()
    assert s["calibration_bits"] == 2 * 32 * SPEC.total_dim
    assert len(s["accuracy_vs_bits"]) == 4
    bits = [b for b, _ in s["accuracy_vs_bits"]]
    assert bits == sorted(bits)
