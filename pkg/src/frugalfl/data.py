"""Synthetic two-domain task and client partitioners."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, PartitionError, StratificationError, UsageError
from .model import Dataset, as_rng

LABEL_RULES = ("aligned", "inverted-head")
DOMAINS = ("A", "B")
PLAN_SCHEMA = "frugalfl.partition/1"


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Two Gaussian domains sharing one label direction.

    Feature 0 carries the label with a margin, feature 1 carries the domain
    shift. Under ``inverted-head`` domain B flips the sign of the label
    direction, so no single head can serve both domains.
    """

    samples_per_domain: int = 2000
    feature_dim: int = 16
    domain_separation: float = 1.0
    label_rule: str = "aligned"
    noise_sigma: float = 0.5
    seed: int = 0
    margin: float = 0.5

    def __post_init__(self):
        if self.samples_per_domain < 2:
            raise ConfigError("must be >= 2", "task.samples_per_domain")
        if self.feature_dim < 2:
            raise ConfigError("must be >= 2", "task.feature_dim")
        if not self.noise_sigma > 0:
            raise ConfigError("must be > 0", "task.noise_sigma")
        if self.label_rule not in LABEL_RULES:
            raise ConfigError(f"must be one of {LABEL_RULES}", "task.label_rule")
        if self.margin < 0:
            raise ConfigError("must be >= 0", "task.margin")


def generate_synthetic(spec: SyntheticTaskSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    n, d = spec.samples_per_domain, spec.feature_dim
    feats, labels, tags = [], [], []
    for k, domain in enumerate(DOMAINS):
        y = np.zeros(n, dtype=np.int64)
        y[n // 2:] = 1
        y = rng.permutation(y)
        x = rng.standard_normal((n, d))
        flip = -1.0 if (spec.label_rule == "inverted-head" and domain == "B") else 1.0
        x[:, 0] = flip * (2 * y - 1) * (spec.margin + np.abs(x[:, 0]))
        x[:, 1] += (0.5 if k == 0 else -0.5) * spec.domain_separation
        x += spec.noise_sigma * rng.standard_normal((n, d))
        feats.append(x)
        labels.append(y)
        tags.append(np.full(n, domain))
    return Dataset(np.concatenate(feats), np.concatenate(labels), np.concatenate(tags))


def stratified_split_indices(labels, train_fraction: float, seed) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < train_fraction < 1:
        raise UsageError("train_fraction must lie in (0, 1)")
    labels = np.asarray(labels)
    rng = as_rng(seed)
    train = []
    for value in np.unique(labels):
        idx = np.flatnonzero(labels == value)
        if idx.size < 2:
            raise StratificationError(f"label {value} has {idx.size} sample(s); need >= 2")
        n_train = int(np.floor(train_fraction * idx.size + 0.5))
        n_train = min(max(n_train, 1), idx.size - 1)
        train.append(rng.permutation(idx)[:n_train])
    train_idx = np.sort(np.concatenate(train))
    val_idx = np.setdiff1d(np.arange(labels.size), train_idx)
    return train_idx, val_idx


def stratified_split(data: Dataset, train_fraction: float, seed) -> tuple[Dataset, Dataset]:
    train_idx, val_idx = stratified_split_indices(data.labels, train_fraction, seed)
    return data.subset(train_idx), data.subset(val_idx)


@dataclass(frozen=True)
class PartitionPlan:
    assignments: dict
    client_count: int
    label_histograms: dict
    domain_histograms: dict

    @classmethod
    def build(cls, assignments: dict, data: Dataset) -> PartitionPlan:
        assignments = {int(c): np.sort(np.asarray(idx, dtype=np.int64)) for c, idx in sorted(assignments.items())}
        label_h, domain_h = {}, {}
        domains = sorted(set(data.domain_tags.tolist()))
        for cid, idx in assignments.items():
            label_h[cid] = np.bincount(data.labels[idx], minlength=2).tolist()
            tags = data.domain_tags[idx]
            domain_h[cid] = {d: int(np.sum(tags == d)) for d in domains}
        return cls(assignments, len(assignments), label_h, domain_h)

    @property
    def client_ids(self) -> list[int]:
        return list(self.assignments)

    def sizes(self) -> dict:
        return {c: int(idx.size) for c, idx in self.assignments.items()}

    def check(self, n_samples: int) -> None:
        """Raise PartitionError unless the shards are disjoint and cover ``range(n_samples)``."""
        allidx = np.concatenate(list(self.assignments.values())) if self.assignments else np.array([], int)
        if np.unique(allidx).size != allidx.size:
            raise PartitionError("client shards overlap")
        if allidx.size != n_samples or not np.array_equal(np.sort(allidx), np.arange(n_samples)):
            raise PartitionError("client shards do not cover the dataset")

    def to_json(self) -> str:
        doc = {
            "schema": PLAN_SCHEMA,
            "client_count": self.client_count,
            "assignments": {str(c): idx.tolist() for c, idx in self.assignments.items()},
            "label_histograms": {str(c): h for c, h in self.label_histograms.items()},
            "domain_histograms": {str(c): h for c, h in self.domain_histograms.items()},
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> PartitionPlan:
        doc = json.loads(text)
        if doc.get("schema") != PLAN_SCHEMA:
            raise PartitionError(f"unsupported partition schema {doc.get('schema')!r}")
        return cls(
            {int(c): np.asarray(v, dtype=np.int64) for c, v in sorted(doc["assignments"].items(), key=lambda kv: int(kv[0]))},
            int(doc["client_count"]),
            {int(c): list(v) for c, v in doc["label_histograms"].items()},
            {int(c): dict(v) for c, v in doc["domain_histograms"].items()},
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, PartitionPlan):
            return NotImplemented
        return (
            self.client_count == other.client_count
            and list(self.assignments) == list(other.assignments)
            and all(np.array_equal(self.assignments[c], other.assignments[c]) for c in self.assignments)
            and self.label_histograms == other.label_histograms
            and self.domain_histograms == other.domain_histograms
        )


def iid_partition(data: Dataset, client_count: int, seed) -> PartitionPlan:
    if client_count < 1 or len(data) < client_count:
        raise PartitionError(f"cannot split {len(data)} samples over {client_count} clients")
    perm = as_rng(seed).permutation(len(data))
    parts = np.array_split(perm, client_count)
    return PartitionPlan.build({c + 1: p for c, p in enumerate(parts)}, data)


def _domain_groups(data: Dataset, client_count: int, domains) -> list[tuple[str, list[int]]]:
    domains = list(domains) if domains is not None else sorted(set(data.domain_tags.tolist()))
    if len(domains) != 2:
        raise PartitionError(f"domain partition needs exactly 2 domains, got {domains}")
    if client_count < 2 or client_count % 2:
        raise PartitionError(f"domain partition needs an even client count, got {client_count}")
    half = client_count // 2
    return [(domains[0], list(range(1, half + 1))), (domains[1], list(range(half + 1, client_count + 1)))]


def domain_partition(data: Dataset, client_count: int, domains=None, seed=0) -> PartitionPlan:
    """First half of the clients get domain-A samples only, the second half domain B."""
    rng = as_rng(seed)
    assignments = {}
    for domain, clients in _domain_groups(data, client_count, domains):
        idx = np.flatnonzero(data.domain_tags == domain)
        if idx.size < len(clients):
            raise PartitionError(f"domain {domain!r} has {idx.size} samples for {len(clients)} clients")
        for cid, part in zip(clients, np.array_split(rng.permutation(idx), len(clients))):
            assignments[cid] = part
    return PartitionPlan.build(assignments, data)


def dirichlet_proportions(alpha: float, k: int, rng) -> np.ndarray:
    p = as_rng(rng).dirichlet(np.full(k, float(alpha)))
    if np.any(p < 0) or not np.isfinite(p).all() or abs(p.sum() - 1.0) > 1e-12:
        raise PartitionError(f"degenerate Dirichlet draw at alpha={alpha}")
    return p


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    raw = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort keeps lower client ids first on equal remainders
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _dirichlet_assign(indices, labels, client_ids, alpha, rng) -> dict:
    k = len(client_ids)
    if indices.size < k:
        raise PartitionError(f"{indices.size} samples cannot cover {k} clients")
    # per client: per label list of sample indices
    shards = {c: {} for c in client_ids}
    for value in np.unique(labels[indices]):
        idx = rng.permutation(indices[labels[indices] == value])
        counts = largest_remainder(dirichlet_proportions(alpha, k, rng), idx.size)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for j, c in enumerate(client_ids):
            shards[c][int(value)] = list(idx[bounds[j]:bounds[j + 1]])

    def total(c):
        return sum(len(v) for v in shards[c].values())

    for c in client_ids:
        while total(c) == 0:
            donor, value = max(
                ((d, v) for d in client_ids for v in shards[d]),
                key=lambda dv: (len(shards[dv[0]][dv[1]]), total(dv[0]), -dv[0]),
            )
            shards[c].setdefault(value, []).append(shards[donor][value].pop())
    return {c: np.array(sorted(i for v in shards[c].values() for i in v), dtype=np.int64) for c in client_ids}


def dirichlet_label_skew(data: Dataset, client_count: int, alpha: float, seed,
                         within_domains: bool = False) -> PartitionPlan:
    """Per label, client shares ~ Dirichlet(alpha); counts by largest remainder.

    With ``within_domains`` the clients are first split by domain as in
    :func:`domain_partition` and the skew is drawn inside each domain.
    """
    if not alpha > 0:
        raise PartitionError("alpha must be positive")
    if client_count < 1 or len(data) < client_count:
        raise PartitionError(f"{len(data)} samples cannot cover {client_count} clients")
    rng = as_rng(seed)
    if within_domains:
        groups = [(np.flatnonzero(data.domain_tags == d), c) for d, c in _domain_groups(data, client_count, None)]
    else:
        groups = [(np.arange(len(data)), list(range(1, client_count + 1)))]
    assignments = {}
    for indices, clients in groups:
        assignments.update(_dirichlet_assign(indices, data.labels, clients, alpha, rng))
    return PartitionPlan.build(assignments, data)


def _entropy_bits(counts) -> float:
    c = np.asarray(counts, dtype=np.float64)
    if c.sum() == 0:
        return 0.0
    p = c[c > 0] / c.sum()
    return float(-(p * np.log2(p)).sum())


def label_emd(hist, reference) -> float:
    """1-D earth mover's distance between label distributions, unit spacing."""
    p = np.asarray(hist, dtype=np.float64)
    q = np.asarray(reference, dtype=np.float64)
    p = p / p.sum() if p.sum() else p
    q = q / q.sum()
    return float(np.abs(np.cumsum(p - q))[:-1].sum())


def partition_stats(plan: PartitionPlan) -> dict:
    global_labels = np.sum([plan.label_histograms[c] for c in plan.client_ids], axis=0)
    clients = []
    for c in plan.client_ids:
        hist = plan.label_histograms[c]
        dom = plan.domain_histograms[c]
        n = int(sum(hist))
        clients.append({
            "client_id": c,
            "samples": n,
            "label_histogram": list(hist),
            "label_entropy": _entropy_bits(hist),
            "domain_purity": max(dom.values()) / n if n else 0.0,
            "label_emd": label_emd(hist, global_labels),
        })
    return {
        "client_count": plan.client_count,
        "global_label_histogram": global_labels.tolist(),
        "global_label_entropy": _entropy_bits(global_labels),
        "clients": clients,
    }
