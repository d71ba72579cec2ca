"""Headline acceptance criteria, one test per criterion.

Each test prints a PASS/FAIL line in the "acceptance criteria" section of the
pytest terminal summary (see conftest.py).
"""

import dataclasses

import numpy as np
import pytest

from frugalfl import protocol
from frugalfl.config import ExperimentConfig, config_from_dict
from frugalfl.data import (
    SyntheticTaskSpec,
    dirichlet_label_skew,
    domain_partition,
    generate_synthetic,
    iid_partition,
)
from frugalfl.energy import GridProfile, operational_emissions
from frugalfl.experiment import run, run_centralized
from frugalfl.metrics import f1, log_loss, roc_auc
from frugalfl.model import (
    PERSONAL,
    Dataset,
    ModelSpec,
    gradient,
    init_lora,
    init_params,
    sgd_step,
)
from frugalfl.protocol import FEDAVG_FULL, ClientState, LocalOptimizer, Payload, fedavg_aggregate, local_train
from frugalfl.report import body_json, compare
from frugalfl.workload import INIT_STREAM, stream

from oracles import (
    adapter_fd,
    best_linear_accuracies,
    layer_fd,
    naive_f1,
    naive_log_loss,
    relative_error,
    trapezoid_auc,
)

acceptance = pytest.mark.acceptance


def _config(**doc):
    return config_from_dict(doc)


@acceptance("emission conversions 570/240/200 Wh -> 24.0/10.1/8.4 g within 0.5 g")
def test_emission_conversions():
    grid = GridProfile(42.0, 1.0)
    for wh, printed in [(570, 24.0), (240, 10.1), (200, 8.4)]:
        assert abs(operational_emissions(wh, grid) - printed) <= 0.5


@acceptance("centralized equivalence after 20 rounds within 1e-10")
def test_centralized_equivalence():
    common = dict(seed=11, rounds=20, client_count=1, client_fraction=1.0, patience=None,
                  partition={"mode": "iid"}, optimizer={"lr": 0.2, "epochs": 1, "batch_size": None},
                  task={"samples_per_domain": 100, "feature_dim": 8}, model={"hidden": [16, 8]})
    fed = run(_config(strategy="fedavg-full", **common))
    cen = run_centralized(_config(strategy="centralized", **common))
    assert fed.final_state["global_params"].size <= 5000
    assert len(fed.rounds) == len(cen.rounds) == 20
    assert fed.final_state["global_params"].max_abs_diff(cen.final_state["global_params"]) <= 1e-10


@acceptance("IID single-step equivalence with 10 equal clients within 1e-10")
def test_iid_single_step():
    rng = np.random.default_rng(5)
    spec = ModelSpec((6, 10, 5, 1), head_boundary=2)
    params = init_params(spec, rng, "full")
    shards = [Dataset(rng.normal(size=(8, 6)), rng.integers(0, 2, 8)) for _ in range(10)]
    results = []
    for cid, shard in enumerate(shards, start=1):
        client = ClientState(cid, shard, shard, params.select(PERSONAL), LocalOptimizer(0.3, 1, None),
                             np.random.default_rng(cid))
        payload, n, _ = local_train(client, Payload(params), FEDAVG_FULL, spec)
        results.append((payload.params, n))
    grads, _ = gradient(params, spec, Dataset.concat(shards))
    assert fedavg_aggregate(results).max_abs_diff(sgd_step(params, grads, 0.3)) <= 1e-10


@acceptance("gradient checks on every trainable parameter, relative error <= 1e-5")
def test_gradient_checks():
    rng = np.random.default_rng(9)
    data = Dataset(rng.normal(size=(7, 4)), np.array([0, 1, 1, 0, 1, 0, 1]))
    spec = ModelSpec((4, 5, 3, 1), "tanh", head_boundary=2,
                     adapter_targets=("dense0.weight", "dense1.weight", "dense2.weight"))
    for layout in ("full", "decoupled"):
        params = init_params(spec, rng, layout)
        grads, _ = gradient(params, spec, data)
        assert grads.size == params.size
        for g in grads:
            assert relative_error(g.values, layer_fd(params, spec, data, g.name)).max() <= 1e-5, g.name
    # the 1-wide output layer only admits rank 1
    for rank, targets in ((2, ("dense0.weight", "dense1.weight")), (1, spec.adapter_targets)):
        lspec = dataclasses.replace(spec, adapter_targets=targets)
        base = init_params(lspec, rng, "adapter")
        adapters = [a.with_factors(a.a_matrix, rng.normal(scale=0.3, size=a.b_matrix.shape))
                    for a in init_lora(lspec, rank, 4.0, rng)]
        layer_grads, adapter_grads = gradient(base, lspec, data, adapters)
        assert layer_grads.size == 0
        for j, g in enumerate(adapter_grads):
            assert relative_error(g.a_matrix, adapter_fd(base, lspec, data, adapters, j, "a")).max() <= 1e-5
            assert relative_error(g.b_matrix, adapter_fd(base, lspec, data, adapters, j, "b")).max() <= 1e-5


@acceptance("adapter payload accounting is exact per round and in the comparison table")
def test_adapter_payload_accounting():
    common = dict(seed=2, rounds=6, patience=None, task={"samples_per_domain": 300},
                  lora={"rank": 8, "targets": ["dense0.weight", "dense1.weight"]})
    lora = run(_config(strategy="fedavg-lora", **common))
    full = run(_config(strategy="fedavg-full", **common))
    spec = protocol.build_workload(_config(strategy="fedavg-lora", **common)).spec
    per_client = sum(8 * (d_in + d_out) for d_out, d_in in map(spec.weight_shape, spec.adapter_targets))
    assert per_client == 8 * (16 + 64) + 8 * (64 + 64)
    for record in lora.rounds:
        assert record.total_upload_bytes == len(record.selected_clients) * per_client * 4
        assert all(b == per_client * 4 for b in record.upload_bytes.values())
    rows = compare([full, lora], baseline="fedavg-full")
    assert rows[1]["payload_ratio"] == per_client / spec.parameter_count


@acceptance("privacy shape: no personal layers uploaded, frozen base bit-identical over 20 rounds")
def test_privacy_shape():
    common = dict(seed=4, rounds=20, patience=None, task={"samples_per_domain": 200})
    pfl = run(_config(strategy="pfl-decoupled", **common))
    assert len(pfl.rounds) == 20
    personal = {n for p in pfl.final_state["personal_params"].values() for n in p.names}
    assert personal
    for record in pfl.rounds:
        for item in record.upload_manifest:
            assert item["role"] == "shared" and item["name"] not in personal
    assert pfl.final_state["global_params"].role_size(PERSONAL) == 0

    cfg = _config(strategy="fedavg-lora", **common)
    lora = run(cfg)
    assert len(lora.rounds) == 20
    initial = init_params(protocol.build_workload(cfg).spec, stream(cfg.seed, INIT_STREAM), "adapter")
    assert lora.final_state["global_params"].equal(initial)


def _inverted_config(strategy, seed):
    return _config(
        strategy=strategy, seed=seed, rounds=20, client_count=10, client_fraction=0.5, patience=None,
        partition={"mode": "domain"},
        task={"samples_per_domain": 200, "feature_dim": 2, "label_rule": "inverted-head",
              "noise_sigma": 1e-9, "domain_separation": 0.0},
        model={"hidden": [16, 16], "head_boundary": 2},
        optimizer={"lr": 0.1, "epochs": 2, "batch_size": 16},
    )


@acceptance("personalization benefit on the inverted-head task over 5 seeds")
def test_personalization_benefit():
    task = _inverted_config("pfl-decoupled", 0).task
    data = generate_synthetic(SyntheticTaskSpec(samples_per_domain=task.samples_per_domain, feature_dim=2,
                                                label_rule="inverted-head", noise_sigma=task.noise_sigma,
                                                domain_separation=0.0, seed=0))
    per_domain, _, best_shared = best_linear_accuracies(data.features, data.labels, data.domain_tags)
    # oracle: each domain is perfectly separable on its own, no single boundary serves both
    assert min(per_domain.values()) == 1.0 and best_shared <= 0.75
    pfl_acc, full_acc = [], []
    for seed in range(5):
        pfl_acc.append(run(_inverted_config("pfl-decoupled", seed)).final["client_mean_accuracy"])
        full_acc.append(run(_inverted_config("fedavg-full", seed)).final["pooled"]["accuracy"])
    assert np.mean(pfl_acc) >= 0.95
    assert np.mean(full_acc) <= 0.75
    assert max(full_acc) <= best_shared + 1e-12


@acceptance("partitioner suite: coverage, Dirichlet uniform limit and skew ordering")
def test_partitioner_suite():
    rng = np.random.default_rng(2024)
    for trial in range(100):
        n = int(rng.integers(20, 400))
        k = int(rng.integers(1, 6)) * 2
        domains = np.where(rng.random(n) < 0.5, "A", "B")
        domains[:k], domains[k:2 * k] = "A", "B"
        labels = rng.integers(0, 2, n)
        labels[:2 * k:2], labels[1:2 * k:2] = 0, 1
        data = Dataset(np.zeros((n, 2)), labels, domains)
        kind = trial % 4
        if kind == 0:
            plan = iid_partition(data, k, trial)
        elif kind == 1:
            plan = domain_partition(data, k, seed=trial)
        else:
            plan = dirichlet_label_skew(data, k, float(rng.choice([0.05, 1.0, 100.0])), trial,
                                        within_domains=kind == 3)
        plan.check(n)
        assert sorted(np.concatenate(list(plan.assignments.values())).tolist()) == list(range(n))

    skewed = Dataset(np.zeros((2000, 2)), np.r_[np.zeros(1200, int), np.ones(800, int)])
    share = np.array([0.6, 0.4])
    devs = []
    for seed in range(20):
        plan = dirichlet_label_skew(skewed, 10, 1e6, seed)
        for c in plan.client_ids:
            h = np.asarray(plan.label_histograms[c], dtype=float)
            devs.append(np.max(np.abs(h / h.sum() - share) / share))
    assert np.median(devs) <= 0.05

    balanced = Dataset(np.zeros((1000, 2)), np.arange(1000) % 2)

    def max_label_share(alpha, seed):
        plan = dirichlet_label_skew(balanced, 10, alpha, seed)
        h = np.array([plan.label_histograms[c] for c in plan.client_ids], dtype=float)
        return float(np.mean(h.max(axis=0) / h.sum(axis=0)))

    low = np.mean([max_label_share(0.1, s) for s in range(20)])
    high = np.mean([max_label_share(100.0, s) for s in range(20)])
    assert low > high


@acceptance("metric oracles: AUC, log loss and F1 within 1e-12 on 200 instances")
def test_metric_oracles():
    rng = np.random.default_rng(77)
    for i in range(200):
        n = int(rng.integers(2, 60))
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        # half the instances use coarse scores so ties are exercised
        scores = rng.random(n) if i % 2 else rng.integers(0, 5, n) / 4.0
        assert abs(roc_auc(scores, labels) - trapezoid_auc(scores, labels)) <= 1e-12
        assert abs(log_loss(scores, labels) - naive_log_loss(scores, labels)) <= 1e-12
        assert abs(f1(scores, labels) - naive_f1(scores, labels)) <= 1e-12


@acceptance("early stopping halts at round 7 with patience 5")
def test_early_stopping(monkeypatch):
    schedule = [0.5, 0.6, 0.6, 0.55, 0.6, 0.4, 0.6] + [0.99] * 13
    real = protocol.run_round

    def scripted(server, *args, **kwargs):
        record = real(server, *args, **kwargs)
        record.aggregate_val_metrics = dataclasses.replace(
            record.aggregate_val_metrics, f1=schedule[record.round_index - 1])
        return record

    monkeypatch.setattr(protocol, "run_round", scripted)
    report = run(_config(strategy="fedavg-full", rounds=20, patience=5, task={"samples_per_domain": 100}))
    assert len(report.rounds) == 7
    assert report.stop["stopped_early"] and report.stop["best_round"] == 2


@acceptance("reference-default config gives byte-identical report bodies")
def test_determinism():
    for strategy in ("fedavg-lora", "fedavg-full", "pfl-decoupled", "centralized"):
        cfg = ExperimentConfig(strategy=strategy, seed=2025)
        assert (cfg.rounds, cfg.client_count, cfg.client_fraction) == (20, 10, 0.5)
        assert (cfg.lora.rank, cfg.lora.scaling, cfg.partition.alpha) == (8, 32.0, 1.0)
        first, second = run(cfg), run(cfg)
        assert body_json(first) == body_json(second)
