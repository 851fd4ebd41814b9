"""Round orchestration: sampling, local training, per-layer update coding,
mid-point decoding, averaging, codebook refresh and bit accounting.

Every client message goes through the real wire format, and the ledger's
per-client figures are computed independently from the cost formulas, so
``RoundCost.wire_consistent`` is a genuine check rather than a tautology.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import costing
from .costing import CostLedger, RoundCost
from .data import Dataset, Partition, partition_dirichlet, partition_iid, split_pretrain
from .errors import CorruptPayloadError, DegenerateRangeError, InputError
from .model import (LocalTrainConfig, ModelSpec, Parameters, Update, apply_update, compute_update,
                    evaluate, init_model, local_train)
from .quant import (Codebook, QuantisedLayerUpdate, UpdateStats, bq_codebook, bu_codebook,
                    decode_with_table, encode, index_width, qsgd_decode, qsgd_encode, update_stats)
from .rng import child_rng, derive_seed

log = logging.getLogger(__name__)

QUANTISERS = ("none", "bu", "bq", "qsgd")
BUCKETED = ("bu", "bq")
FALLBACK_HALF_RANGE = 1e-6
CALIBRATION_ROUND = -1


@dataclass(frozen=True)
class PretrainConfig:
    """Central pre-training on a held-out split.

    ``epochs=0`` keeps the split (clients see the same data) but leaves the
    initial model untouched, which is the matching from-scratch control.
    """

    epochs: int = 5
    fraction: float = 0.5
    learning_rate: float | None = None
    batch_size: int | None = None


@dataclass(frozen=True)
class RoundConfig:
    total_clients: int = 100
    sampled_per_round: int = 10
    rounds: int = 10
    quantiser: str = "bu"
    levels: int = 64
    refresh_period: int = 10
    boundary_bits: int = 16
    codebook_scope: str = "layer"
    margin: float = 1.0
    downlink_levels: int | None = None
    downlink_refresh_period: int = 10
    pretrain: PretrainConfig | None = None
    local: LocalTrainConfig = field(default_factory=LocalTrainConfig)
    weighted: bool = False
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.quantiser not in QUANTISERS:
            raise InputError(f"quantiser must be one of {QUANTISERS}, got {self.quantiser!r}")
        if self.total_clients < 1:
            raise InputError("total_clients must be >= 1")
        if not 1 <= self.sampled_per_round <= self.total_clients:
            raise InputError("sampled_per_round must be in [1, total_clients]")
        if self.rounds < 0:
            raise InputError("rounds must be >= 0")
        if self.levels < 1:
            raise InputError("levels must be >= 1")
        if self.refresh_period < 1 or self.downlink_refresh_period < 1:
            raise InputError("refresh periods must be >= 1")
        if self.downlink_levels is not None and self.downlink_levels < 1:
            raise InputError("downlink_levels must be >= 1")
        if self.boundary_bits not in (16, 32, 64):
            raise InputError("boundary_bits must be 16, 32 or 64 in simulation")
        if self.codebook_scope not in ("layer", "model"):
            raise InputError("codebook_scope must be 'layer' or 'model'")
        if not self.margin > 0:
            raise InputError("margin must be > 0")
        if self.workers < 1:
            raise InputError("workers must be >= 1")

    def cost_config(self) -> costing.CostConfig:
        return costing.CostConfig(
            levels=self.levels, refresh_period=self.refresh_period,
            boundary_bits=self.boundary_bits, downlink_levels=self.downlink_levels,
            downlink_refresh_period=self.downlink_refresh_period,
            codebook_scope=self.codebook_scope)


@dataclass(frozen=True)
class _LinkCodec:
    """Codebooks in force on one link, plus their wire-precision reconstruction tables."""

    codebooks: tuple[Codebook, ...]
    tables: tuple[np.ndarray, ...]
    since: int

    @property
    def digest(self) -> str:
        return "".join(cb.digest() for cb in self.codebooks)

    def levels(self) -> tuple[int, ...]:
        return tuple(cb.levels for cb in self.codebooks)


@dataclass(frozen=True)
class ServerState:
    params: Parameters
    round: int = 0
    uplink: _LinkCodec | None = None
    downlink: _LinkCodec | None = None
    last_aggregate: Update | None = None


@dataclass(frozen=True)
class RoundRecord:
    round: int
    sampled: tuple[int, ...]
    train_loss: float
    train_accuracy: float
    test_loss: float | None
    test_accuracy: float | None
    cost: RoundCost
    layer_stats: tuple[UpdateStats, ...]
    refresh: bool


@dataclass(frozen=True)
class _ClientMessage:
    client: int
    payloads: tuple[bytes, ...]
    wire_bits: int
    digest: str | None
    samples: int


# --------------------------------------------------------------------------- sampling / codebooks

def sample_clients(total: int, count: int, round_index: int, seed: int) -> tuple[int, ...]:
    """Uniform sample without replacement, a pure function of ``(seed, round)``; sorted."""
    if count > total:
        raise InputError(f"cannot sample {count} of {total} clients")
    if count < 0:
        raise InputError("count must be >= 0")
    rng = child_rng(seed, "sample", round_index)
    return tuple(sorted(int(i) for i in rng.choice(total, size=count, replace=False)))


def _layer_codebook(values: np.ndarray, kind: str, levels: int, margin: float) -> Codebook:
    try:
        if kind == "bu":
            lo, hi = float(values.min()), float(values.max())
            centre, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * margin
            return bu_codebook(centre - half, centre + half, levels)
        return bq_codebook(values, levels)
    except DegenerateRangeError:
        log.info("zero-range calibration layer, using +/-%g", FALLBACK_HALF_RANGE)
        return bu_codebook(-FALLBACK_HALF_RANGE, FALLBACK_HALF_RANGE, levels)


def calibrate_codebooks(update: Update | Sequence[np.ndarray], kind: str, levels: int,
                        margin: float = 1.0, scope: str = "layer") -> tuple[Codebook, ...]:
    """Per-layer codebooks from a calibration update.

    BU spans the layer's ``[min, max]`` widened about its centre by ``margin``;
    BQ uses the layer's empirical quantiles (``margin`` is ignored). With
    ``scope="model"`` one codebook is built from all layers pooled and shared.
    """
    if kind not in BUCKETED:
        raise InputError(f"codebooks exist only for {BUCKETED}, not {kind!r}")
    layers = update.per_layer if isinstance(update, Update) else tuple(update)
    layers = [np.asarray(v, dtype=np.float64).reshape(-1) for v in layers]
    if scope == "model":
        shared = _layer_codebook(np.concatenate(layers), kind, levels, margin)
        return (shared,) * len(layers)
    return tuple(_layer_codebook(v, kind, levels, margin) for v in layers)


def _make_codec(codebooks: tuple[Codebook, ...], boundary_bits: int, since: int) -> _LinkCodec:
    tables = tuple(costing.wire_round(cb.midpoints, boundary_bits) for cb in codebooks)
    return _LinkCodec(codebooks, tables, since)


def _codebook_bits(codec: _LinkCodec, boundary_bits: int, scope: str) -> int:
    levels = codec.levels()
    return boundary_bits * (levels[0] if scope == "model" else sum(levels))


# --------------------------------------------------------------------------- client side

def _raw_payload(values: np.ndarray) -> bytes:
    return np.asarray(values, dtype="<f4").tobytes()


def _encode_client(update: Update, cfg: RoundConfig, codec: _LinkCodec | None, attach: bool,
                   qsgd_seed: int) -> tuple[tuple[bytes, ...], int]:
    payloads, bits = [], 0
    for li, vec in enumerate(update.per_layer):
        if cfg.quantiser == "none":
            raw = _raw_payload(vec)
            payloads.append(raw)
            bits += len(raw) * 8
        elif cfg.quantiser == "qsgd":
            q = qsgd_encode(vec, cfg.levels, child_rng(qsgd_seed, "qsgd", li))
            p = costing.encode_qsgd_payload(q)
            payloads.append(p.data)
            bits += p.wire_bits
        else:
            q = encode(vec, codec.codebooks[li])
            send_table = attach and (cfg.codebook_scope == "layer" or li == 0)
            p = costing.encode_layer_payload(
                q, codec.tables[li] if send_table else None, cfg.boundary_bits)
            payloads.append(p.data)
            bits += p.wire_bits
    return tuple(payloads), bits


def _client_work(state: ServerState, cfg: RoundConfig, shard: Dataset, client: int,
                 round_index: int, attach: bool) -> _ClientMessage:
    local_cfg = replace(cfg.local, seed=derive_seed(cfg.seed, "local", round_index, client))
    trained = local_train(state.params, shard.features, shard.labels, local_cfg)
    update = compute_update(trained, state.params)
    payloads, bits = _encode_client(update, cfg, state.uplink, attach,
                                    derive_seed(cfg.seed, "qsgd", round_index, client))
    digest = state.uplink.digest if state.uplink is not None else None
    return _ClientMessage(client, payloads, bits, digest, len(shard))


# --------------------------------------------------------------------------- server side

def _decode_client(msg: _ClientMessage, cfg: RoundConfig, spec: ModelSpec,
                   codec: _LinkCodec | None) -> list[np.ndarray]:
    if cfg.quantiser in BUCKETED and msg.digest != codec.digest:
        raise CorruptPayloadError(f"client {msg.client} encoded with a stale codebook")
    out = []
    for li, (data, d) in enumerate(zip(msg.payloads, spec.layer_dims)):
        if cfg.quantiser == "none":
            vec = np.frombuffer(data, dtype="<f4").astype(np.float64)
        elif cfg.quantiser == "qsgd":
            vec = qsgd_decode(costing.decode_qsgd_payload(data), cfg.levels)
        else:
            q, echoed = costing.decode_layer_payload(data, cfg.boundary_bits)
            table = codec.tables[li]
            if echoed is not None and not np.array_equal(echoed, table):
                raise CorruptPayloadError(f"client {msg.client} layer {li}: codebook mismatch")
            vec = decode_with_table(q, table)
        if vec.size != d:
            raise CorruptPayloadError(f"client {msg.client} layer {li}: {vec.size} values, expected {d}")
        out.append(vec)
    return out


def _uplink_index_bits(cfg: RoundConfig, spec: ModelSpec, codec: _LinkCodec | None) -> int:
    dims = spec.layer_dims
    if cfg.quantiser == "none":
        return costing.FLOAT_BITS * sum(dims)
    if cfg.quantiser == "qsgd":
        mw = costing.qsgd_magnitude_width(cfg.levels)
        return sum(d * (1 + mw) + costing.FLOAT_BITS for d in dims)
    return sum(d * index_width(L) for d, L in zip(dims, codec.levels()))


def _aggregate(decoded: list[list[np.ndarray]], weights: list[float]) -> list[np.ndarray]:
    """Weighted mean, accumulated in client order so results never depend on scheduling."""
    acc = [np.zeros_like(v) for v in decoded[0]]
    for vecs, w in zip(decoded, weights):
        for a, v in zip(acc, vecs):
            a += w * v
    total = float(sum(weights))
    return [a / total for a in acc]


def _downlink(state: ServerState, cfg: RoundConfig, spec: ModelSpec, mean: list[np.ndarray],
              k: int):
    """Return ``(applied update layers, codec, per-client bits, amortised bits, wire bits)``."""
    if cfg.downlink_levels is None:
        bits = sum(len(_raw_payload(v)) * 8 for v in state.params.per_layer)
        return mean, None, bits, Fraction(bits), bits
    kind = cfg.quantiser if cfg.quantiser in BUCKETED else "bu"
    codec = state.downlink
    refresh = codec is None or k % cfg.downlink_refresh_period == 0
    if refresh:
        cbs = calibrate_codebooks(mean, kind, cfg.downlink_levels, cfg.margin, cfg.codebook_scope)
        codec = _make_codec(cbs, cfg.boundary_bits, k)
    applied, wire = [], 0
    for li, vec in enumerate(mean):
        send_table = refresh and (cfg.codebook_scope == "layer" or li == 0)
        p = costing.encode_layer_payload(encode(vec, codec.codebooks[li]),
                                         codec.tables[li] if send_table else None, cfg.boundary_bits)
        wire += p.wire_bits
        q, _ = costing.decode_layer_payload(p.data, cfg.boundary_bits)
        applied.append(decode_with_table(q, codec.tables[li]))
    index_bits = sum(d * index_width(L) for d, L in zip(spec.layer_dims, codec.levels()))
    cb_bits = _codebook_bits(codec, cfg.boundary_bits, cfg.codebook_scope)
    actual = index_bits + (cb_bits if refresh else 0)
    amortised = index_bits + Fraction(cb_bits, cfg.downlink_refresh_period)
    return applied, codec, actual, amortised, wire


def run_round(state: ServerState, cfg: RoundConfig, partition: Partition, train: Dataset,
              test: Dataset | None = None) -> tuple[ServerState, RoundRecord]:
    """Execute one communication round and return the next state and its record."""
    if cfg.rounds and state.round >= cfg.rounds:
        raise InputError(f"round {state.round} is past the configured {cfg.rounds} rounds")
    if partition.clients != cfg.total_clients:
        raise InputError(f"partition has {partition.clients} clients, config {cfg.total_clients}")
    spec = state.params.spec
    k = state.round
    bucketed = cfg.quantiser in BUCKETED
    if bucketed and state.uplink is None:
        raise InputError("bucketed quantiser needs calibrated codebooks (see calibrate_codebooks)")

    uplink = state.uplink
    refresh = bucketed and k % cfg.refresh_period == 0
    if refresh and k > uplink.since:
        source = state.last_aggregate
        cbs = calibrate_codebooks(source, cfg.quantiser, cfg.levels, cfg.margin, cfg.codebook_scope)
        uplink = _make_codec(cbs, cfg.boundary_bits, k)
        state = replace(state, uplink=uplink)

    sampled = sample_clients(cfg.total_clients, cfg.sampled_per_round, k, cfg.seed)
    shards = [train.subset(partition.assignments[c]) for c in sampled]

    def work(i):
        return _client_work(state, cfg, shards[i], sampled[i], k, refresh)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            messages = list(pool.map(work, range(len(sampled))))
    else:
        messages = [work(i) for i in range(len(sampled))]

    decoded = [_decode_client(m, cfg, spec, uplink) for m in messages]
    weights = [float(m.samples) if cfg.weighted else 1.0 for m in messages]
    mean = _aggregate(decoded, weights)
    applied, down_codec, down_bits, down_amortised, down_wire = _downlink(state, cfg, spec, mean, k)

    aggregate = Update(spec, tuple(np.asarray(v, dtype=np.float32) for v in applied))
    new_params = apply_update(state.params, aggregate, 1.0)

    index_bits = _uplink_index_bits(cfg, spec, uplink)
    if bucketed:
        cb_bits = _codebook_bits(uplink, cfg.boundary_bits, cfg.codebook_scope)
        cb_amortised = Fraction(cb_bits, cfg.refresh_period)
        cb_actual = cb_bits if refresh else 0
    else:
        cb_amortised, cb_actual = Fraction(0), 0
    n = len(sampled)
    cost = RoundCost(
        round=k, clients=n, uplink_index_bits=index_bits,
        uplink_codebook_bits=cb_amortised, uplink_codebook_bits_actual=cb_actual,
        downlink_bits=down_bits, downlink_bits_amortised=down_amortised,
        baseline_bits=2 * costing.FLOAT_BITS * spec.total_dim,
        wire_uplink_bits=sum(m.wire_bits for m in messages),
        wire_downlink_bits=n * down_wire, refresh=refresh)

    train_loss, train_acc = evaluate(new_params, train.features, train.labels)
    test_loss = test_acc = None
    if test is not None:
        test_loss, test_acc = evaluate(new_params, test.features, test.labels)
    stats = tuple(update_stats(v) for v in mean)
    record = RoundRecord(k, sampled, train_loss, train_acc, test_loss, test_acc, cost, stats, refresh)
    new_state = ServerState(new_params, k + 1, uplink, down_codec, Update(
        spec, tuple(np.asarray(v, dtype=np.float32) for v in mean)))
    return new_state, record


# --------------------------------------------------------------------------- experiments

@dataclass
class ExperimentResult:
    records: list[RoundRecord]
    ledger: CostLedger
    initial_params: Parameters
    final_params: Parameters
    initial_test: tuple[float, float] | None
    calibration_stats: tuple[UpdateStats, ...] | None
    summary: dict


def calibration_round(params: Parameters, cfg: RoundConfig, partition: Partition,
                      train: Dataset) -> tuple[Update, RoundCost]:
    """One sampled client sends a full-precision update to seed the codebooks."""
    client = int(child_rng(cfg.seed, "calibration").integers(cfg.total_clients))
    shard = train.subset(partition.assignments[client])
    local_cfg = replace(cfg.local, seed=derive_seed(cfg.seed, "local", CALIBRATION_ROUND, client))
    update = compute_update(local_train(params, shard.features, shard.labels, local_cfg), params)
    wire = sum(len(_raw_payload(v)) * 8 for v in update.per_layer)
    d = params.spec.total_dim
    down = costing.FLOAT_BITS * d if cfg.downlink_levels is None else 0
    cost = RoundCost(
        round=CALIBRATION_ROUND, clients=1, uplink_index_bits=costing.FLOAT_BITS * d,
        uplink_codebook_bits=Fraction(0), uplink_codebook_bits_actual=0,
        downlink_bits=down, downlink_bits_amortised=Fraction(down), baseline_bits=0,
        wire_uplink_bits=wire, wire_downlink_bits=down)
    return update, cost


def prepare_initial_model(cfg: RoundConfig, spec: ModelSpec, dataset: Dataset
                          ) -> tuple[Parameters, Dataset]:
    """Initial global model and the data left for the federation."""
    params = init_model(spec, derive_seed(cfg.seed, "init"))
    if cfg.pretrain is None:
        return params, dataset
    pre, fed = split_pretrain(dataset, cfg.pretrain.fraction, derive_seed(cfg.seed, "pretrain-split"))
    if cfg.pretrain.epochs > 0:
        pcfg = LocalTrainConfig(
            epochs=cfg.pretrain.epochs,
            learning_rate=cfg.pretrain.learning_rate or cfg.local.learning_rate,
            batch_size=cfg.pretrain.batch_size or cfg.local.batch_size,
            seed=derive_seed(cfg.seed, "pretrain"))
        params = local_train(params, pre.features, pre.labels, pcfg)
    return params, fed


def make_partition(dataset: Dataset, clients: int, alpha: float | None, seed: int) -> Partition:
    pseed = derive_seed(seed, "partition")
    if alpha is None:
        return partition_iid(dataset, clients, pseed)
    return partition_dirichlet(dataset, clients, alpha, pseed)


def run_experiment(cfg: RoundConfig, spec: ModelSpec, dataset: Dataset,
                   test: Dataset | None = None, alpha: float | None = None,
                   on_round=None) -> ExperimentResult:
    """Optional pre-training, calibration (bucketed quantisers), then ``cfg.rounds`` rounds."""
    params, fed = prepare_initial_model(cfg, spec, dataset)
    partition = make_partition(fed, cfg.total_clients, alpha, cfg.seed)
    initial_test = evaluate(params, test.features, test.labels) if test is not None else None

    ledger = CostLedger()
    state = ServerState(params)
    calib_stats = None
    if cfg.rounds > 0 and cfg.quantiser in BUCKETED:
        calib, calib_cost = calibration_round(params, cfg, partition, fed)
        ledger.append(calib_cost)
        calib_stats = tuple(update_stats(v) for v in calib.per_layer)
        cbs = calibrate_codebooks(calib, cfg.quantiser, cfg.levels, cfg.margin, cfg.codebook_scope)
        state = replace(state, uplink=_make_codec(cbs, cfg.boundary_bits, 0))

    records = []
    for _ in range(cfg.rounds):
        state, rec = run_round(state, cfg, partition, fed, test)
        ledger.append(rec.cost)
        records.append(rec)
        if on_round is not None:
            on_round(rec)
    summary = summarise(cfg, spec, records, ledger, initial_test)
    return ExperimentResult(records, ledger, params, state.params, initial_test, calib_stats, summary)


def summarise(cfg: RoundConfig, spec: ModelSpec, records: list[RoundRecord], ledger: CostLedger,
              initial_test: tuple[float, float] | None) -> dict:
    out: dict = {
        "rounds": len(records),
        "quantiser": cfg.quantiser,
        "levels": cfg.levels,
        "model_dim": spec.total_dim,
        "initial_test_loss": initial_test[0] if initial_test else None,
        "initial_test_accuracy": initial_test[1] if initial_test else None,
    }
    if not records:
        out.update(final_test_accuracy=out["initial_test_accuracy"],
                   final_test_loss=out["initial_test_loss"])
        return out
    last = records[-1]
    client_rounds = sum(r.cost.clients for r in records)
    amortised = ledger.total_amortised()
    curve, cum = [], Fraction(0)
    for r in records:
        cum += r.cost.per_client_amortised
        curve.append([float(cum), r.test_accuracy])
    out.update(
        final_train_accuracy=last.train_accuracy,
        final_train_loss=last.train_loss,
        final_test_accuracy=last.test_accuracy,
        final_test_loss=last.test_loss,
        total_bits_actual=ledger.total_actual(),
        calibration_bits=sum(r.ledger_uplink_bits + r.ledger_downlink_bits
                             for r in ledger if r.round == CALIBRATION_ROUND),
        total_bits_amortised=math.ceil(amortised),
        baseline_bits=ledger.total_baseline(),
        bits_per_client_round=float(sum(
            (r.cost.clients * r.cost.per_client_amortised for r in records), Fraction(0)) / client_rounds),
        reduction_percent=costing.format_percent(ledger.reduction_vs_baseline()),
        accuracy_vs_bits=curve,
    )
    return out
