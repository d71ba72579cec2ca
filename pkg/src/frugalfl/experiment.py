"""Strategy dispatch, including the centralized reference trainer."""

from __future__ import annotations

import time

from .metrics import metric_report
from .model import forward, gradient, init_params, sgd_step
from .protocol import (
    STRATEGY_RULES,
    RoundRecord,
    ServerState,
    compute_seconds,
    make_ledger,
    round_settings,
    run_experiment,
    update_early_stopping,
)
from .report import ExperimentReport, build_report
from .workload import INIT_STREAM, SAMPLING_STREAM, build_workload, client_stream, stream


def run_centralized(config) -> ExperimentReport:
    """Mini-batch SGD on the pooled training set, one epoch per round.

    Shuffling draws from client 1's stream, so a one-client, full-participation
    fedavg-full run with the same seed follows exactly the same trajectory.
    The raw training data upload to the server is charged in round 1.
    """
    started = time.perf_counter()
    workload = build_workload(config)
    spec = workload.spec
    settings = round_settings(config, spec)
    ledger = make_ledger(config)
    params = init_params(spec, stream(config.seed, INIT_STREAM), "full")
    server = ServerState(params, None, stream(config.seed, SAMPLING_STREAM))
    rng = client_stream(config.seed, 1)
    data, val = workload.train, workload.val
    opt = config.optimizer
    n = len(data)
    batch = n if not opt.batch_size else min(opt.batch_size, n)
    raw_bytes = int(n * (spec.input_dim + 1) * config.cost.bytes_per_param)
    records = []
    stopped = False
    while server.round_index < config.rounds:
        r = server.round_index + 1
        first = len(ledger)
        processed = 0
        for _ in range(opt.epochs):
            order = None if batch >= n else rng.permutation(n)
            for start in range(0, n, batch):
                part = data if order is None else data.subset(order[start:start + batch])
                grads, _ = gradient(params, spec, part)
                params = sgd_step(params, grads, opt.lr)
                processed += len(part)
        server.global_params = params
        train_s = compute_seconds(settings, processed, spec.parameter_count, training=True)
        ledger.record_compute("training", train_s, r)
        pooled = metric_report(forward(params, spec, val.features), val.labels)
        eval_s = compute_seconds(settings, len(val), spec.parameter_count, training=False)
        ledger.record_compute("inference", eval_s, r)
        upload = raw_bytes if r == 1 else 0
        ledger.record_transfer(upload, r)
        server.round_index = r
        entries = list(range(first, len(ledger)))
        records.append(RoundRecord(
            round_index=r,
            selected_clients=[1],
            upload_bytes={1: upload},
            download_bytes={1: 0},
            upload_manifest=[{"name": "raw_training_data", "role": "raw-data", "shape": [n, spec.input_dim + 1]}] if r == 1 else [],
            aggregate_val_metrics=pooled,
            client_val_metrics={1: pooled},
            client_mean_accuracy=pooled.accuracy,
            wall_duration_s=train_s + eval_s,
            energy_entries=entries,
            energy_wh=sum(ledger.records[i].energy_wh for i in entries),
            gco2e=sum(ledger.records[i].total_gco2e for i in entries),
        ))
        if update_early_stopping(server, pooled.f1, config.patience):
            stopped = True
            break
    return build_report(
        config, records, ledger,
        stopped_early=stopped,
        best_round=server.best_round,
        best_val_f1=server.best_val_f1,
        per_client_upload_params=0,
        wall_clock_s=time.perf_counter() - started,
        final_state={"global_params": params},
        workload=workload,
    )


def run(config) -> ExperimentReport:
    if config.strategy == "centralized":
        return run_centralized(config)
    if config.strategy in STRATEGY_RULES:
        return run_experiment(config)
    raise ValueError(f"unknown strategy {config.strategy!r}")
