"""Experiment configuration: parsing, defaults and validation.

Accepts TOML or JSON. Defaults reproduce the reference federated setup:
20 rounds, 10 clients, half of them sampled per round, LoRA rank 8 with
scaling 32, Dirichlet alpha 1 on top of the two-domain split, patience 5.
"""

from __future__ import annotations

import json
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

STRATEGIES = ("centralized", "fedavg-full", "fedavg-lora", "pfl-decoupled")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class LoraConfig(_Section):
    rank: int = Field(8, ge=1)
    scaling: float = Field(32.0, gt=0)
    targets: list[str] = ["dense1.weight"]


class OptimizerConfig(_Section):
    lr: float = Field(0.05, gt=0)
    epochs: int = Field(1, ge=0)
    # None trains full-batch
    batch_size: Optional[int] = Field(32, ge=1)


class PartitionConfig(_Section):
    mode: Literal["iid", "domain", "dirichlet", "both"] = "both"
    alpha: float = Field(1.0, gt=0)
    train_fraction: float = Field(0.8, gt=0, lt=1)


class TaskConfig(_Section):
    samples_per_domain: int = Field(2000, ge=2)
    feature_dim: int = Field(16, ge=2)
    domain_separation: float = 1.0
    label_rule: Literal["aligned", "inverted-head"] = "aligned"
    noise_sigma: float = Field(0.5, gt=0)
    margin: float = Field(0.5, ge=0)
    # None: reuse the experiment seed
    seed: Optional[int] = None


class ModelConfig(_Section):
    hidden: list[int] = [64, 64]
    activation: Literal["tanh", "relu"] = "tanh"
    head_boundary: int = Field(2, ge=0)


class HardwareConfig(_Section):
    tdp_watts: float = Field(150.0, gt=0)
    utilization: float = Field(1.0, ge=0, le=1)
    overhead_multiplier: float = Field(1.0, ge=1)
    lifetime_hours: float = Field(43800.0, gt=0)
    embodied_gco2e: float = Field(0.0, ge=0)


class GridConfig(_Section):
    carbon_intensity_g_per_kwh: float = Field(42.0, ge=0)
    pue: float = Field(1.0, ge=1)


class CostConfig(_Section):
    forward_s_per_kparam_sample: float = Field(1e-6, ge=0)
    backward_factor: float = Field(2.0, ge=0)
    comm_j_per_byte: float = Field(0.0, ge=0)
    bytes_per_param: float = Field(4.0, gt=0)
    quantized_base_broadcast: bool = False
    quantized_bytes_per_param: float = Field(0.5, gt=0)


class ProtocolConfig(_Section):
    broadcast_to_unselected: bool = False


class LifecycleConfig(_Section):
    pretraining_gco2e: float = Field(0.0, ge=0)
    share_fraction: float = Field(0.001, ge=0, le=1)


class ExperimentConfig(_Section):
    strategy: Literal["centralized", "fedavg-full", "fedavg-lora", "pfl-decoupled"]
    seed: int = 0
    rounds: int = Field(20, ge=1)
    client_count: int = Field(10, ge=1)
    client_fraction: float = Field(0.5, gt=0, le=1)
    # None disables early stopping
    patience: Optional[int] = Field(5, ge=1)
    lora: LoraConfig = LoraConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    partition: PartitionConfig = PartitionConfig()
    task: TaskConfig = TaskConfig()
    model: ModelConfig = ModelConfig()
    hardware: HardwareConfig = HardwareConfig()
    grid: GridConfig = GridConfig()
    cost: CostConfig = CostConfig()
    protocol: ProtocolConfig = ProtocolConfig()
    lifecycle: LifecycleConfig = LifecycleConfig()

    @model_validator(mode="after")
    def _cross_checks(self):
        arch = self.architecture
        n_dense = len(arch) - 1
        if self.partition.mode in ("domain", "both") and self.strategy != "centralized" and self.client_count % 2:
            raise ValueError("client_count: domain partitioning needs an even client count")
        if not 0 <= self.model.head_boundary <= n_dense:
            raise ValueError(f"model.head_boundary: must lie in [0, {n_dense}]")
        if self.strategy == "pfl-decoupled" and not 0 < self.model.head_boundary < n_dense:
            raise ValueError(f"model.head_boundary: pfl-decoupled needs a value in [1, {n_dense - 1}]")
        if any(h < 1 for h in self.model.hidden):
            raise ValueError("model.hidden: layer widths must be >= 1")
        weights = {f"dense{i}.weight": (arch[i + 1], arch[i]) for i in range(n_dense)}
        for t in self.lora.targets:
            if t not in weights:
                raise ValueError(f"lora.targets: {t!r} is not one of {sorted(weights)}")
            if self.strategy == "fedavg-lora" and self.lora.rank > min(weights[t]):
                raise ValueError(f"lora.rank: {self.lora.rank} exceeds min dims of {t} {weights[t]}")
        if self.strategy == "fedavg-lora" and not self.lora.targets:
            raise ValueError("lora.targets: fedavg-lora needs at least one target")
        return self

    @property
    def architecture(self) -> tuple[int, ...]:
        return (self.task.feature_dim, *self.model.hidden, 1)

    @property
    def task_seed(self) -> int:
        return self.seed if self.task.seed is None else self.task.seed

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")


def _format_errors(err: ValidationError) -> ConfigError:
    problems = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"])
        msg = e["msg"]
        if not path and msg.startswith("Value error, "):
            # cross-field errors carry "<path>: <message>"
            path, _, msg = msg[len("Value error, "):].partition(": ")
        problems.append((path, msg))
    if len(problems) == 1:
        return ConfigError(problems[0][1], path=problems[0][0] or None)
    return ConfigError("; ".join(f"{p}: {m}" for p, m in problems), path=problems[0][0] or None)


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a table/object")
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as err:
        raise _format_errors(err) from None


def parse_config(text: str, fmt: str | None = None) -> ExperimentConfig:
    """Parse TOML or JSON. ``fmt`` is "toml", "json" or None to sniff."""
    if fmt is None:
        fmt = "json" if text.lstrip().startswith("{") else "toml"
    if fmt == "json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as err:
            raise ConfigError(f"invalid JSON: {err.msg}", line=err.lineno) from None
    elif fmt == "toml":
        try:
            doc = tomllib.loads(text)
        except tomllib.TOMLDecodeError as err:
            line = getattr(err, "lineno", None)
            raise ConfigError(f"invalid TOML: {err}", line=line) from None
    else:
        raise ConfigError(f"unknown config format {fmt!r}")
    return config_from_dict(doc)


def dump_config(config: ExperimentConfig) -> str:
    """Resolved config as canonical JSON (re-parses to an equal config)."""
    return json.dumps(config.to_dict(), sort_keys=True, indent=2)
