"""Operational and embodied energy/emission accounting.

Energy is in Wh and emissions in grams CO2-equivalent throughout.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .errors import ConfigError, UsageError

PHASES = ("training", "inference", "communication", "idle")
LEDGER_CSV_COLUMNS = ("phase", "round", "duration_s", "energy_wh", "operational_g", "embodied_g")


@dataclass(frozen=True)
class HardwareProfile:
    # defaults: one NVIDIA A10 (150 W board power), no embodied data
    tdp_watts: float = 150.0
    utilization: float = 1.0
    overhead_multiplier: float = 1.0
    lifetime_hours: float = 5 * 365 * 24.0
    embodied_gco2e: float = 0.0

    def __post_init__(self):
        if not self.tdp_watts > 0:
            raise ConfigError("must be > 0", "hardware.tdp_watts")
        if not 0 <= self.utilization <= 1:
            raise ConfigError("must lie in [0, 1]", "hardware.utilization")
        if not self.overhead_multiplier >= 1:
            raise ConfigError("must be >= 1", "hardware.overhead_multiplier")
        if not self.lifetime_hours > 0:
            raise ConfigError("must be > 0", "hardware.lifetime_hours")
        if not self.embodied_gco2e >= 0:
            raise ConfigError("must be >= 0", "hardware.embodied_gco2e")


@dataclass(frozen=True)
class GridProfile:
    # Paris-region intensity, PUE 1
    carbon_intensity_g_per_kwh: float = 42.0
    pue: float = 1.0

    def __post_init__(self):
        if not self.carbon_intensity_g_per_kwh >= 0:
            raise ConfigError("must be >= 0", "grid.carbon_intensity_g_per_kwh")
        if not self.pue >= 1:
            raise ConfigError("must be >= 1", "grid.pue")


def operational_energy(hw: HardwareProfile, duration_s: float) -> float:
    if duration_s < 0:
        raise UsageError("duration must be non-negative")
    return hw.tdp_watts * hw.utilization * (duration_s / 3600.0) * hw.overhead_multiplier


def operational_emissions(energy_wh: float, grid: GridProfile) -> float:
    if energy_wh < 0:
        raise UsageError("energy must be non-negative")
    return energy_wh * (grid.carbon_intensity_g_per_kwh / 1000.0) * grid.pue


def embodied_amortized(hw: HardwareProfile, usage_hours: float) -> float:
    if usage_hours < 0:
        raise UsageError("usage must be non-negative")
    return hw.embodied_gco2e * (usage_hours / hw.lifetime_hours)


def comm_energy(n_bytes: float, j_per_byte: float) -> float:
    if n_bytes < 0 or j_per_byte < 0:
        raise UsageError("bytes and J/byte must be non-negative")
    return n_bytes * j_per_byte / 3600.0


def linear_extrapolate(measured_wh: float, measured_n: float, target_n: float) -> float:
    """Scale a measurement taken on ``measured_n`` units to ``target_n`` units."""
    if measured_n < 1 or target_n < 1:
        raise UsageError("unit counts must be >= 1")
    return measured_wh * target_n / measured_n


def amortized_pretraining_share(total_pretrain_gco2e: float, share_fraction: float) -> float:
    if not 0 <= share_fraction <= 1:
        raise UsageError("share_fraction must lie in [0, 1]")
    return total_pretrain_gco2e * share_fraction


@dataclass(frozen=True)
class EnergyRecord:
    phase: str
    duration_s: float
    energy_wh: float
    operational_gco2e: float
    embodied_gco2e: float
    round_index: int | None = None

    def __post_init__(self):
        if self.phase not in PHASES:
            raise UsageError(f"unknown phase {self.phase!r}")
        for name in ("duration_s", "energy_wh", "operational_gco2e", "embodied_gco2e"):
            if getattr(self, name) < 0:
                raise UsageError(f"{name} must be non-negative")

    @property
    def total_gco2e(self) -> float:
        return self.operational_gco2e + self.embodied_gco2e


@dataclass
class EnergyLedger:
    """Append-only list of energy records priced with one hardware and grid profile."""

    hardware: HardwareProfile = field(default_factory=HardwareProfile)
    grid: GridProfile = field(default_factory=GridProfile)
    comm_j_per_byte: float = 0.0
    records: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def record_compute(self, phase: str, duration_s: float, round_index: int | None = None) -> int:
        """Price ``duration_s`` of device time; returns the new record's index."""
        wh = operational_energy(self.hardware, duration_s)
        rec = EnergyRecord(
            phase,
            duration_s,
            wh,
            operational_emissions(wh, self.grid),
            embodied_amortized(self.hardware, duration_s / 3600.0),
            round_index,
        )
        self.records.append(rec)
        return len(self.records) - 1

    def record_transfer(self, n_bytes: int, round_index: int | None = None) -> int:
        wh = comm_energy(n_bytes, self.comm_j_per_byte)
        self.records.append(
            EnergyRecord("communication", 0.0, wh, operational_emissions(wh, self.grid), 0.0, round_index)
        )
        return len(self.records) - 1

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LEDGER_CSV_COLUMNS)
        for r in self.records:
            writer.writerow([
                r.phase, "" if r.round_index is None else r.round_index,
                f"{r.duration_s:.6g}", f"{r.energy_wh:.6g}",
                f"{r.operational_gco2e:.6g}", f"{r.embodied_gco2e:.6g}",
            ])
        return buf.getvalue()


def _zero_totals() -> dict:
    return {"duration_s": 0.0, "energy_wh": 0.0, "operational_gco2e": 0.0, "embodied_gco2e": 0.0, "gco2e": 0.0}


def summarize(ledger_or_records) -> dict:
    """Per-phase and grand totals; always contains every phase."""
    records = getattr(ledger_or_records, "records", ledger_or_records)
    phases = {p: _zero_totals() for p in PHASES}
    grand = _zero_totals()
    for r in records:
        for bucket in (phases[r.phase], grand):
            bucket["duration_s"] += r.duration_s
            bucket["energy_wh"] += r.energy_wh
            bucket["operational_gco2e"] += r.operational_gco2e
            bucket["embodied_gco2e"] += r.embodied_gco2e
            bucket["gco2e"] += r.total_gco2e
    return {"phases": phases, "total": grand}


def comparison_row(strategy: str, accuracy: float, summary: dict) -> dict:
    """One (strategy, accuracy, Wh, gCO2e) row of the strategy summary table."""
    return {
        "strategy": strategy,
        "accuracy": accuracy,
        "energy_wh": summary["total"]["energy_wh"],
        "gco2e": summary["total"]["gco2e"],
    }
