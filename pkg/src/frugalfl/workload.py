"""Turns an ExperimentConfig into data shards, a model spec and seeded streams."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import (
    PartitionPlan,
    SyntheticTaskSpec,
    dirichlet_label_skew,
    domain_partition,
    generate_synthetic,
    iid_partition,
    stratified_split_indices,
)
from .model import Dataset, ModelSpec

# stream keys for keyed child generators
SPLIT_STREAM = 1
PARTITION_STREAM = 2
VAL_PARTITION_STREAM = 3
INIT_STREAM = 4
LORA_STREAM = 5
SAMPLING_STREAM = 6
CLIENT_STREAM_BASE = 1000


def stream(seed: int, key: int) -> np.random.Generator:
    """Independent generator for one purpose, derived from the experiment seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))


def client_stream(seed: int, client_id: int) -> np.random.Generator:
    return stream(seed, CLIENT_STREAM_BASE + client_id)


@dataclass
class Workload:
    spec: ModelSpec
    train: Dataset
    val: Dataset
    plan: PartitionPlan | None
    val_plan: PartitionPlan | None
    client_train: dict
    client_val: dict


def task_spec(config) -> SyntheticTaskSpec:
    t = config.task
    return SyntheticTaskSpec(
        samples_per_domain=t.samples_per_domain,
        feature_dim=t.feature_dim,
        domain_separation=t.domain_separation,
        label_rule=t.label_rule,
        noise_sigma=t.noise_sigma,
        seed=config.task_seed,
        margin=t.margin,
    )


def model_spec(config) -> ModelSpec:
    return ModelSpec(
        architecture=config.architecture,
        activation=config.model.activation,
        head_boundary=config.model.head_boundary,
        adapter_targets=tuple(config.lora.targets) if config.strategy == "fedavg-lora" else (),
    )


def partition(data: Dataset, mode: str, client_count: int, alpha: float, rng) -> PartitionPlan:
    if mode == "iid":
        return iid_partition(data, client_count, rng)
    if mode == "domain":
        return domain_partition(data, client_count, seed=rng)
    if mode == "dirichlet":
        return dirichlet_label_skew(data, client_count, alpha, rng)
    if mode == "both":
        return dirichlet_label_skew(data, client_count, alpha, rng, within_domains=True)
    raise ValueError(f"unknown partition mode {mode!r}")


def build_workload(config) -> Workload:
    """Generate the task, split it 80/20 and shard both halves across clients.

    Training data follows the configured partition mode. Validation data is
    sharded by domain when the mode involves domains, IID otherwise, so each
    client evaluates on data from its own source.
    """
    data = generate_synthetic(task_spec(config))
    train_idx, val_idx = stratified_split_indices(data.labels, config.partition.train_fraction,
                                                  stream(config.seed, SPLIT_STREAM))
    train, val = data.subset(train_idx), data.subset(val_idx)
    spec = model_spec(config)
    if config.strategy == "centralized":
        return Workload(spec, train, val, None, None, {1: train}, {1: val})
    k = config.client_count
    plan = partition(train, config.partition.mode, k, config.partition.alpha,
                     stream(config.seed, PARTITION_STREAM))
    val_mode = "domain" if config.partition.mode in ("domain", "both") else "iid"
    val_plan = partition(val, val_mode, k, config.partition.alpha, stream(config.seed, VAL_PARTITION_STREAM))
    return Workload(
        spec, train, val, plan, val_plan,
        {c: train.subset(idx) for c, idx in plan.assignments.items()},
        {c: val.subset(idx) for c, idx in val_plan.assignments.items()},
    )
