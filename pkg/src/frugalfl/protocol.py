"""Federated server/client simulation: FedAvg, adapter-only FedAvg, decoupled PFL.

Clients are keyed by integer ids starting at 1. Selected clients train in id
order and aggregation consumes their results in that same order, which keeps
every run bit-reproducible under a seed.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .energy import EnergyLedger, GridProfile, HardwareProfile
from .errors import PrivacyViolation, ProtocolError, UsageError
from .metrics import MetricReport, metric_report
from .model import (
    FROZEN,
    PERSONAL,
    SHARED,
    Dataset,
    LoraAdapter,
    ModelSpec,
    ParameterSet,
    adapters_to_params,
    forward,
    gradient,
    init_lora,
    init_params,
    loss,
    sgd_step,
    trainable_parameter_count,
)
from .report import build_report
from .workload import INIT_STREAM, LORA_STREAM, SAMPLING_STREAM, build_workload, client_stream, stream

FEDAVG_FULL = "fedavg-full"
FEDAVG_ADAPTERS = "fedavg-adapters"
DECOUPLED = "decoupled"
RULES = (FEDAVG_FULL, FEDAVG_ADAPTERS, DECOUPLED)
STRATEGY_RULES = {"fedavg-full": FEDAVG_FULL, "fedavg-lora": FEDAVG_ADAPTERS, "pfl-decoupled": DECOUPLED}
PAYLOAD_MODES = {FEDAVG_FULL: "full", FEDAVG_ADAPTERS: "adapter-only", DECOUPLED: "decoupled"}
LAYOUTS = {FEDAVG_FULL: "full", FEDAVG_ADAPTERS: "adapter", DECOUPLED: "decoupled"}


@dataclass(frozen=True)
class LocalOptimizer:
    lr: float = 0.05
    epochs: int = 1
    batch_size: int | None = 32


@dataclass(frozen=True)
class Payload:
    """What travels over the simulated network: layers, adapters, or both."""

    params: ParameterSet | None = None
    adapters: tuple | None = None

    @property
    def parameter_count(self) -> int:
        n = self.params.size if self.params is not None else 0
        return n + sum(a.parameter_count for a in self.adapters or ())

    def manifest(self) -> list[dict]:
        layers = list(self.params or ()) + list(adapters_to_params(self.adapters or ()))
        return [{"name": l.name, "role": l.role, "shape": list(l.shape)} for l in layers]


@dataclass
class ClientState:
    client_id: int
    local_train: Dataset
    local_val: Dataset
    personal_params: ParameterSet
    optimizer: LocalOptimizer
    rng: np.random.Generator
    # shared layers this client currently holds (decoupled rule)
    shared_view: ParameterSet | None = None
    holds_base: bool = False


@dataclass
class ServerState:
    global_params: ParameterSet
    global_adapters: list | None
    rng: np.random.Generator
    round_index: int = 0
    best_val_f1: float = -math.inf
    best_round: int = 0
    rounds_since_improvement: int = 0

    def __post_init__(self):
        if self.global_params.role_size(PERSONAL):
            raise PrivacyViolation("server state may not hold personal-role layers")


@dataclass(frozen=True)
class RoundSettings:
    spec: ModelSpec
    bytes_per_param: float = 4.0
    quantized_base_broadcast: bool = False
    quantized_bytes_per_param: float = 0.5
    broadcast_to_unselected: bool = False
    forward_s_per_kparam_sample: float = 1e-6
    backward_factor: float = 2.0


@dataclass
class RoundRecord:
    round_index: int
    selected_clients: list
    upload_bytes: dict
    download_bytes: dict
    upload_manifest: list
    aggregate_val_metrics: MetricReport
    client_val_metrics: dict
    client_mean_accuracy: float
    wall_duration_s: float
    energy_entries: list
    energy_wh: float
    gco2e: float
    adapter_product_gap: float | None = None

    @property
    def total_upload_bytes(self) -> int:
        return sum(self.upload_bytes.values())

    @property
    def total_download_bytes(self) -> int:
        return sum(self.download_bytes.values())

    def to_dict(self) -> dict:
        return {
            "round_index": self.round_index,
            "selected_clients": list(self.selected_clients),
            "upload_bytes": {str(k): v for k, v in self.upload_bytes.items()},
            "download_bytes": {str(k): v for k, v in self.download_bytes.items()},
            "upload_manifest": self.upload_manifest,
            "aggregate_val_metrics": self.aggregate_val_metrics.to_dict(),
            "client_val_metrics": {str(k): m.to_dict() for k, m in self.client_val_metrics.items()},
            "client_mean_accuracy": self.client_mean_accuracy,
            "wall_duration_s": self.wall_duration_s,
            "energy_entries": list(self.energy_entries),
            "energy_wh": self.energy_wh,
            "gco2e": self.gco2e,
            "adapter_product_gap": self.adapter_product_gap,
        }


def sample_clients(client_count: int, fraction: float, rng) -> list[int]:
    """Uniform draw without replacement of round-half-up(fraction * count) ids, sorted."""
    if not 0 < fraction <= 1:
        raise UsageError("client fraction must lie in (0, 1]")
    # rounding to 9 places absorbs binary noise such as 0.35 * 10 = 3.4999...
    m = max(1, int(math.floor(round(fraction * client_count, 9) + 0.5)))
    ids = np.arange(1, client_count + 1)
    if m == client_count:
        return ids.tolist()
    return sorted(int(i) for i in rng.choice(ids, size=m, replace=False))


def _check_payload(received: Payload, rule: str) -> None:
    if rule not in RULES:
        raise ProtocolError(f"unknown aggregation rule {rule!r}")
    if received.params is None:
        raise ProtocolError(f"{rule} payload carries no layers")
    roles = set(received.params.roles.values())
    if rule == FEDAVG_ADAPTERS:
        if roles - {FROZEN} or not received.adapters:
            raise ProtocolError("fedavg-adapters expects a frozen base plus adapters")
        return
    if received.adapters:
        raise ProtocolError(f"{rule} payload must not carry adapters")
    if roles - {SHARED}:
        raise ProtocolError(f"{rule} payload must hold shared layers only, got roles {sorted(roles)}")


def local_train(client: ClientState, received: Payload, rule: str, spec: ModelSpec):
    """Mini-batch SGD on the client's shard.

    Returns ``(upload, sample_count, local_metrics)``. Under the decoupled rule
    the personal head is updated on ``client`` and left out of ``upload``.
    """
    _check_payload(received, rule)
    opt = client.optimizer
    data = client.local_train
    n = len(data)
    batch = n if not opt.batch_size else min(opt.batch_size, n)
    adapters = list(received.adapters) if rule == FEDAVG_ADAPTERS else None
    params = received.params
    if rule == DECOUPLED:
        params = params.merge(client.personal_params)
    processed = 0
    for _ in range(opt.epochs):
        order = None if batch >= n else client.rng.permutation(n)
        for start in range(0, n, batch):
            part = data if order is None else data.subset(order[start:start + batch])
            layer_grads, adapter_grads = gradient(params, spec, part, adapters)
            if rule == FEDAVG_ADAPTERS:
                adapters = sgd_step(adapters, adapter_grads, opt.lr)
            else:
                params = sgd_step(params, layer_grads, opt.lr)
            processed += len(part)
    metrics = {"train_loss": loss(params, spec, data, adapters), "samples_processed": processed}
    if rule == FEDAVG_ADAPTERS:
        return Payload(adapters=tuple(adapters)), n, metrics
    if rule == DECOUPLED:
        client.personal_params = params.select(PERSONAL)
        shared = params.select(SHARED)
        client.shared_view = shared
        return Payload(params=shared), n, metrics
    return Payload(params=params), n, metrics


def _weights(counts: Sequence[int]) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0):
        raise UsageError("sample counts must be non-negative")
    total = counts.sum()
    if total <= 0:
        raise UsageError("aggregation needs a positive total sample count")
    return counts / total


def _weighted_mean(arrays, w: np.ndarray) -> np.ndarray:
    # offsets from the first array keep identical inputs bit-exact
    base = arrays[0]
    acc = np.array(base, dtype=np.float64)
    for wk, arr in zip(w[1:], arrays[1:]):
        acc += wk * (arr - base)
    # the first weight is implicit: base + sum_k w_k (x_k - base) = sum_k w_k x_k
    return acc


def fedavg_aggregate(payloads: Sequence[tuple[ParameterSet, int]]) -> ParameterSet:
    """Layerwise mean weighted by n_k / sum(n)."""
    if not payloads:
        raise UsageError("nothing to aggregate")
    ref = payloads[0][0]
    for params, _ in payloads[1:]:
        if params.names != ref.names or any(
            params.layer(l.name).shape != l.shape or params.layer(l.name).role != l.role for l in ref
        ):
            raise ProtocolError("payloads disagree on layer names, shapes or roles")
    w = _weights([n for _, n in payloads])
    return ref.replace({
        layer.name: _weighted_mean([params[layer.name] for params, _ in payloads], w) for layer in ref
    })


def aggregate_adapters(payloads: Sequence[tuple[Sequence[LoraAdapter], int]]) -> list[LoraAdapter]:
    """Weighted mean of the A factors and, separately, of the B factors."""
    if not payloads:
        raise UsageError("nothing to aggregate")
    ref = list(payloads[0][0])
    for adapters, _ in payloads[1:]:
        adapters = list(adapters)
        if len(adapters) != len(ref):
            raise ProtocolError("clients sent different numbers of adapters")
        for a, r in zip(adapters, ref):
            if a.rank != r.rank:
                raise ProtocolError(f"rank mismatch on {r.target_layer!r}: {a.rank} vs {r.rank}")
            if a.target_layer != r.target_layer or a.a_matrix.shape != r.a_matrix.shape or \
                    a.b_matrix.shape != r.b_matrix.shape or a.scaling != r.scaling:
                raise ProtocolError(f"adapter mismatch on {r.target_layer!r}")
    w = _weights([n for _, n in payloads])
    out = []
    for j, r in enumerate(ref):
        a = _weighted_mean([list(ads)[j].a_matrix for ads, _ in payloads], w)
        b = _weighted_mean([list(ads)[j].b_matrix for ads, _ in payloads], w)
        out.append(r.with_factors(a, b))
    return out


def adapter_product_gap(payloads, aggregated: Sequence[LoraAdapter]) -> float:
    """Frobenius gap between the mean of client updates and the update of the mean factors."""
    w = _weights([n for _, n in payloads])
    gap = 0.0
    for j, agg in enumerate(aggregated):
        mean_delta = sum(wk * list(adapters)[j].delta() for wk, (adapters, _) in zip(w, payloads))
        gap += float(np.linalg.norm(mean_delta - agg.delta()))
    return gap


def aggregate_decoupled(payloads: Sequence[tuple[ParameterSet, int]]) -> ParameterSet:
    for params, _ in payloads:
        roles = set(params.roles.values())
        if PERSONAL in roles:
            raise PrivacyViolation("personal-role layer reached the server")
        if roles - {SHARED}:
            raise ProtocolError(f"decoupled payloads must be shared-only, got {sorted(roles)}")
    return fedavg_aggregate(payloads)


def _n_bytes(n_params: int, bytes_per_param: float) -> int:
    return int(math.ceil(n_params * bytes_per_param))


def _broadcast(server: ServerState, client: ClientState, rule: str, settings: RoundSettings):
    """Payload sent to a selected client and its download size in bytes."""
    bpp = settings.bytes_per_param
    if rule == FEDAVG_ADAPTERS:
        payload = Payload(server.global_params, tuple(server.global_adapters))
        n_bytes = _n_bytes(sum(a.parameter_count for a in server.global_adapters), bpp)
        if not client.holds_base:
            base_bpp = settings.quantized_bytes_per_param if settings.quantized_base_broadcast else bpp
            n_bytes += _n_bytes(server.global_params.size, base_bpp)
            client.holds_base = True
        return payload, n_bytes
    if rule == DECOUPLED:
        client.shared_view = server.global_params
    return Payload(server.global_params), _n_bytes(server.global_params.size, bpp)


def client_model(server: ServerState, client: ClientState, rule: str):
    """(params, adapters) a client would predict with right now."""
    if rule == FEDAVG_ADAPTERS:
        return server.global_params, server.global_adapters
    if rule == DECOUPLED:
        return client.shared_view.merge(client.personal_params), None
    return server.global_params, None


def evaluate_clients(server: ServerState, clients: dict, rule: str, spec: ModelSpec):
    """Per-client validation metrics plus metrics over the pooled predictions."""
    scores, labels, per_client = [], [], {}
    for cid in sorted(clients):
        client = clients[cid]
        if len(client.local_val) == 0:
            continue
        params, adapters = client_model(server, client, rule)
        s = forward(params, spec, client.local_val.features, adapters)
        per_client[cid] = metric_report(s, client.local_val.labels)
        scores.append(s)
        labels.append(client.local_val.labels)
    pooled = metric_report(np.concatenate(scores), np.concatenate(labels))
    mean_acc = float(np.mean([m.accuracy for m in per_client.values()]))
    return pooled, per_client, mean_acc


def compute_seconds(settings: RoundSettings, samples: int, n_params: int, training: bool) -> float:
    passes = 1.0 + settings.backward_factor if training else 1.0
    return samples * (n_params / 1000.0) * settings.forward_s_per_kparam_sample * passes


def run_round(server: ServerState, clients: dict, rule: str, fraction: float,
              ledger: EnergyLedger, settings: RoundSettings) -> RoundRecord:
    """Sample, broadcast, train locally, aggregate, evaluate everyone, account energy."""
    spec = settings.spec
    r = server.round_index + 1
    ids = sorted(clients)
    selected = [ids[i - 1] for i in sample_clients(len(ids), fraction, server.rng)]
    n_model = spec.parameter_count + sum(a.parameter_count for a in server.global_adapters or ())
    first_entry = len(ledger)
    upload, download, results, manifest = {}, {}, [], []
    duration = 0.0
    for cid in selected:
        client = clients[cid]
        received, download[cid] = _broadcast(server, client, rule, settings)
        payload, n, local = local_train(client, received, rule, spec)
        upload[cid] = _n_bytes(payload.parameter_count, settings.bytes_per_param)
        results.append((payload, n))
        for item in payload.manifest():
            if item not in manifest:
                manifest.append(item)
        seconds = compute_seconds(settings, local["samples_processed"], n_model, training=True)
        ledger.record_compute("training", seconds, r)
        duration += seconds

    gap = None
    if rule == FEDAVG_ADAPTERS:
        pairs = [(p.adapters, n) for p, n in results]
        server.global_adapters = aggregate_adapters(pairs)
        gap = adapter_product_gap(pairs, server.global_adapters)
    elif rule == DECOUPLED:
        server.global_params = aggregate_decoupled([(p.params, n) for p, n in results])
        if settings.broadcast_to_unselected:
            for cid in ids:
                clients[cid].shared_view = server.global_params
                if cid not in selected:
                    download[cid] = _n_bytes(server.global_params.size, settings.bytes_per_param)
    else:
        server.global_params = fedavg_aggregate([(p.params, n) for p, n in results])
    if server.global_params.role_size(PERSONAL):
        raise PrivacyViolation("server state gained personal-role layers")

    pooled, per_client, mean_acc = evaluate_clients(server, clients, rule, spec)
    n_val = sum(len(clients[c].local_val) for c in ids)
    seconds = compute_seconds(settings, n_val, n_model, training=False)
    ledger.record_compute("inference", seconds, r)
    duration += seconds
    ledger.record_transfer(sum(upload.values()) + sum(download.values()), r)

    server.round_index = r
    entries = list(range(first_entry, len(ledger)))
    return RoundRecord(
        round_index=r,
        selected_clients=selected,
        upload_bytes=upload,
        download_bytes=dict(sorted(download.items())),
        upload_manifest=manifest,
        aggregate_val_metrics=pooled,
        client_val_metrics=per_client,
        client_mean_accuracy=mean_acc,
        wall_duration_s=duration,
        energy_entries=entries,
        energy_wh=sum(ledger.records[i].energy_wh for i in entries),
        gco2e=sum(ledger.records[i].total_gco2e for i in entries),
        adapter_product_gap=gap,
    )


def update_early_stopping(server: ServerState, val_f1: float, patience: int | None) -> bool:
    """Track the best validation F1; True once ``patience`` rounds pass without a strict gain."""
    if val_f1 > server.best_val_f1:
        server.best_val_f1 = val_f1
        server.best_round = server.round_index
        server.rounds_since_improvement = 0
    else:
        server.rounds_since_improvement += 1
    return patience is not None and server.rounds_since_improvement >= patience


def round_settings(config, spec: ModelSpec) -> RoundSettings:
    c = config.cost
    return RoundSettings(
        spec=spec,
        bytes_per_param=c.bytes_per_param,
        quantized_base_broadcast=c.quantized_base_broadcast,
        quantized_bytes_per_param=c.quantized_bytes_per_param,
        broadcast_to_unselected=config.protocol.broadcast_to_unselected,
        forward_s_per_kparam_sample=c.forward_s_per_kparam_sample,
        backward_factor=c.backward_factor,
    )


def make_ledger(config) -> EnergyLedger:
    return EnergyLedger(
        hardware=HardwareProfile(**config.hardware.model_dump()),
        grid=GridProfile(**config.grid.model_dump()),
        comm_j_per_byte=config.cost.comm_j_per_byte,
    )


def setup_federation(config, workload):
    """Initial server and client states for a federated strategy."""
    rule = STRATEGY_RULES[config.strategy]
    spec = workload.spec
    init = init_params(spec, stream(config.seed, INIT_STREAM), LAYOUTS[rule])
    adapters = None
    if rule == FEDAVG_ADAPTERS:
        adapters = init_lora(spec, config.lora.rank, config.lora.scaling, stream(config.seed, LORA_STREAM))
    o = config.optimizer
    optimizer = LocalOptimizer(o.lr, o.epochs, o.batch_size)
    clients = {}
    for cid in sorted(workload.client_train):
        clients[cid] = ClientState(
            client_id=cid,
            local_train=workload.client_train[cid],
            local_val=workload.client_val[cid],
            personal_params=init.select(PERSONAL),
            optimizer=optimizer,
            rng=client_stream(config.seed, cid),
            shared_view=init.select(SHARED) if rule == DECOUPLED else None,
        )
    server = ServerState(init.exclude(PERSONAL), adapters, stream(config.seed, SAMPLING_STREAM))
    return rule, server, clients


def run_experiment(config):
    """Run a federated strategy end to end and return its ExperimentReport."""
    if config.strategy not in STRATEGY_RULES:
        raise UsageError(f"{config.strategy!r} is not a federated strategy")
    started = time.perf_counter()
    workload = build_workload(config)
    rule, server, clients = setup_federation(config, workload)
    settings = round_settings(config, workload.spec)
    ledger = make_ledger(config)
    records = []
    stopped = False
    while server.round_index < config.rounds:
        record = run_round(server, clients, rule, config.client_fraction, ledger, settings)
        records.append(record)
        if update_early_stopping(server, record.aggregate_val_metrics.f1, config.patience):
            stopped = True
            break
    state = {
        "rule": rule,
        "server": server,
        "clients": clients,
        "global_params": server.global_params,
        "global_adapters": server.global_adapters,
        "personal_params": {cid: c.personal_params for cid, c in clients.items()},
    }
    return build_report(
        config, records, ledger,
        stopped_early=stopped,
        best_round=server.best_round,
        best_val_f1=server.best_val_f1,
        per_client_upload_params=_upload_params(server, rule),
        wall_clock_s=time.perf_counter() - started,
        final_state=state,
        workload=workload,
    )


def _upload_params(server: ServerState, rule: str) -> int:
    return trainable_parameter_count(server.global_params, PAYLOAD_MODES[rule], server.global_adapters)
