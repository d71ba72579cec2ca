"""Desk-scale MLP classifier with role-tagged parameters and LoRA adapters.

Weights follow the ``(d_out, d_in)`` convention, so a dense layer computes
``x @ W.T + b``. An adapter on ``W`` contributes ``(scaling / rank) * B @ A``
with ``A`` of shape ``(rank, d_in)`` and ``B`` of shape ``(d_out, rank)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, NumericError, ShapeError, UsageError

SHARED = "shared"
PERSONAL = "personal"
FROZEN = "frozen-base"
ADAPTER = "adapter"
ROLES = (SHARED, PERSONAL, FROZEN, ADAPTER)
TRAINABLE_ROLES = frozenset({SHARED, PERSONAL, ADAPTER})

EPS = 1e-12
ACTIVATIONS = ("tanh", "relu")


def _frozen_array(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class Layer:
    name: str
    values: np.ndarray
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise UsageError(f"unknown role {self.role!r} for layer {self.name!r}")
        arr = _frozen_array(self.values)
        if arr.ndim not in (1, 2):
            raise ShapeError(f"layer {self.name!r} must be a vector or matrix, got ndim={arr.ndim}")
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"layer {self.name!r} has non-finite values")
        object.__setattr__(self, "values", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)


class ParameterSet:
    """Ordered, immutable collection of named layers, each tagged with a role."""

    def __init__(self, layers: Iterable[Layer] = ()):
        self._layers = tuple(layers)
        self._index = {}
        for i, layer in enumerate(self._layers):
            if layer.name in self._index:
                raise UsageError(f"duplicate layer name {layer.name!r}")
            self._index[layer.name] = i

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], role: str) -> ParameterSet:
        return cls(Layer(name, values, role) for name, values in arrays.items())

    def __iter__(self) -> Iterator[Layer]:
        return iter(self._layers)

    def __len__(self) -> int:
        return len(self._layers)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __getitem__(self, name: str) -> np.ndarray:
        return self.layer(name).values

    def __repr__(self) -> str:
        inner = ", ".join(f"{l.name}{list(l.shape)}:{l.role}" for l in self._layers)
        return f"ParameterSet({inner})"

    def layer(self, name: str) -> Layer:
        try:
            return self._layers[self._index[name]]
        except KeyError:
            raise KeyError(f"no layer named {name!r}") from None

    @property
    def names(self) -> list[str]:
        return [l.name for l in self._layers]

    @property
    def roles(self) -> dict[str, str]:
        return {l.name: l.role for l in self._layers}

    @property
    def size(self) -> int:
        return sum(l.size for l in self._layers)

    def role_size(self, *roles: str) -> int:
        return sum(l.size for l in self._layers if l.role in roles)

    def select(self, *roles: str) -> ParameterSet:
        return ParameterSet(l for l in self._layers if l.role in roles)

    def exclude(self, *roles: str) -> ParameterSet:
        return ParameterSet(l for l in self._layers if l.role not in roles)

    def replace(self, values: Mapping[str, np.ndarray]) -> ParameterSet:
        """New set with some layer values swapped; names, order and roles are kept."""
        unknown = set(values) - set(self._index)
        if unknown:
            raise KeyError(f"unknown layers {sorted(unknown)}")
        out = []
        for layer in self._layers:
            if layer.name in values:
                new = np.asarray(values[layer.name], dtype=np.float64)
                if new.shape != layer.shape:
                    raise ShapeError(
                        f"layer {layer.name!r}: shape {new.shape} does not match {layer.shape}"
                    )
                layer = Layer(layer.name, new, layer.role)
            out.append(layer)
        return ParameterSet(out)

    def merge(self, other: ParameterSet) -> ParameterSet:
        return ParameterSet((*self._layers, *other._layers))

    def equal(self, other: ParameterSet) -> bool:
        """Bitwise equality of names, roles and values."""
        if self.names != other.names:
            return False
        return all(
            a.role == b.role and a.values.shape == b.values.shape and
            np.array_equal(a.values, b.values)
            for a, b in zip(self._layers, other._layers)
        )

    def max_abs_diff(self, other: ParameterSet) -> float:
        if sorted(self.names) != sorted(other.names):
            raise ShapeError("parameter sets have different layers")
        return max((float(np.max(np.abs(l.values - other[l.name]))) for l in self._layers),
                   default=0.0)


@dataclass(frozen=True)
class LoraAdapter:
    a_matrix: np.ndarray
    b_matrix: np.ndarray
    scaling: float
    target_layer: str

    def __post_init__(self):
        a = _frozen_array(self.a_matrix)
        b = _frozen_array(self.b_matrix)
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError("adapter factors must be matrices")
        if a.shape[0] != b.shape[1]:
            raise ShapeError(f"adapter rank mismatch: A {a.shape}, B {b.shape}")
        rank = a.shape[0]
        if rank < 1 or rank > min(a.shape[1], b.shape[0]):
            raise ConfigError(f"rank {rank} outside [1, min(d_in, d_out)] for {self.target_layer!r}")
        if not self.scaling > 0:
            raise ConfigError("adapter scaling must be positive")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise NumericError(f"adapter on {self.target_layer!r} has non-finite values")
        object.__setattr__(self, "a_matrix", a)
        object.__setattr__(self, "b_matrix", b)
        object.__setattr__(self, "scaling", float(self.scaling))

    @property
    def rank(self) -> int:
        return int(self.a_matrix.shape[0])

    @property
    def d_in(self) -> int:
        return int(self.a_matrix.shape[1])

    @property
    def d_out(self) -> int:
        return int(self.b_matrix.shape[0])

    @property
    def parameter_count(self) -> int:
        return int(self.a_matrix.size + self.b_matrix.size)

    def delta(self) -> np.ndarray:
        return (self.scaling / self.rank) * (self.b_matrix @ self.a_matrix)

    def with_factors(self, a_matrix, b_matrix) -> LoraAdapter:
        return LoraAdapter(a_matrix, b_matrix, self.scaling, self.target_layer)


def adapters_equal(left: Sequence[LoraAdapter], right: Sequence[LoraAdapter]) -> bool:
    if len(left) != len(right):
        return False
    return all(
        a.target_layer == b.target_layer and a.scaling == b.scaling and
        np.array_equal(a.a_matrix, b.a_matrix) and np.array_equal(a.b_matrix, b.b_matrix)
        for a, b in zip(left, right)
    )


def adapters_to_params(adapters: Sequence[LoraAdapter]) -> ParameterSet:
    """Flatten adapters into ``adapter``-role layers (``<target>.lora_a`` / ``.lora_b``)."""
    layers = []
    for ad in adapters:
        layers.append(Layer(f"{ad.target_layer}.lora_a", ad.a_matrix, ADAPTER))
        layers.append(Layer(f"{ad.target_layer}.lora_b", ad.b_matrix, ADAPTER))
    return ParameterSet(layers)


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    domain_tags: np.ndarray = field(default=None)

    def __post_init__(self):
        x = _frozen_array(self.features)
        y = _frozen_array(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise ShapeError(f"features must be an n x d matrix, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise ShapeError(f"labels shape {y.shape} does not match {x.shape[0]} rows")
        if not np.all(np.isin(y, (0, 1))):
            raise UsageError("labels must be 0 or 1")
        if not np.all(np.isfinite(x)):
            raise NumericError("features contain non-finite values")
        tags = self.domain_tags
        tags = np.full(x.shape[0], "A") if tags is None else np.array(tags, dtype=str, copy=True)
        if tags.shape != y.shape:
            raise ShapeError("domain_tags length does not match labels")
        tags.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "domain_tags", tags)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.domain_tags[idx])

    @staticmethod
    def concat(parts: Sequence[Dataset]) -> Dataset:
        return Dataset(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.domain_tags for p in parts]),
        )


@dataclass(frozen=True)
class ModelSpec:
    """Dense architecture ``(d_in, h_1, ..., 1)``.

    Dense layers ``[0, head_boundary)`` form the shared feature extractor; the
    remaining layers are the head, kept personal under decoupled training.
    """

    architecture: tuple[int, ...]
    activation: str = "tanh"
    head_boundary: int = 1
    adapter_targets: tuple[str, ...] = ()

    def __post_init__(self):
        arch = tuple(int(d) for d in self.architecture)
        object.__setattr__(self, "architecture", arch)
        object.__setattr__(self, "adapter_targets", tuple(self.adapter_targets))
        if len(arch) < 2 or any(d < 1 for d in arch):
            raise ConfigError("architecture needs at least two positive dims", "model.architecture")
        if arch[-1] != 1:
            raise ConfigError("output dim must be 1 (binary logistic output)", "model.architecture")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}", "model.activation")
        if not 0 <= self.head_boundary <= self.n_dense:
            raise ConfigError(f"head_boundary must lie in [0, {self.n_dense}]", "model.head_boundary")
        weights = set(self.weight_names)
        for target in self.adapter_targets:
            if target not in weights:
                raise ConfigError(f"adapter target {target!r} is not a weight layer", "lora.targets")

    @property
    def n_dense(self) -> int:
        return len(self.architecture) - 1

    @property
    def input_dim(self) -> int:
        return self.architecture[0]

    @property
    def weight_names(self) -> list[str]:
        return [f"dense{i}.weight" for i in range(self.n_dense)]

    def weight_shape(self, name: str) -> tuple[int, int]:
        i = self.weight_names.index(name)
        return self.architecture[i + 1], self.architecture[i]

    @property
    def parameter_count(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.architecture[:-1], self.architecture[1:]))


LAYOUTS = ("full", "decoupled", "adapter")


def init_params(spec: ModelSpec, rng, layout: str = "full") -> ParameterSet:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases.

    ``layout`` sets the roles: ``full`` marks everything shared, ``decoupled``
    marks head layers personal, ``adapter`` freezes the whole base.
    """
    if layout not in LAYOUTS:
        raise UsageError(f"unknown layout {layout!r}")
    rng = as_rng(rng)
    layers = []
    for i, (d_in, d_out) in enumerate(zip(spec.architecture[:-1], spec.architecture[1:])):
        if layout == "adapter":
            role = FROZEN
        elif layout == "decoupled" and i >= spec.head_boundary:
            role = PERSONAL
        else:
            role = SHARED
        bound = 1.0 / np.sqrt(d_in)
        layers.append(Layer(f"dense{i}.weight", rng.uniform(-bound, bound, (d_out, d_in)), role))
        layers.append(Layer(f"dense{i}.bias", np.zeros(d_out), role))
    return ParameterSet(layers)


def init_lora(spec: ModelSpec, rank: int, scaling: float, rng_seed) -> list[LoraAdapter]:
    """B = 0 and A ~ Uniform(+-1/sqrt(d_in)), so the adapted model starts neutral."""
    rng = as_rng(rng_seed)
    if rank < 1:
        raise ConfigError("rank must be >= 1", "lora.rank")
    adapters = []
    for target in spec.adapter_targets:
        d_out, d_in = spec.weight_shape(target)
        if rank > min(d_in, d_out):
            raise ConfigError(
                f"rank {rank} exceeds min(d_in, d_out) = {min(d_in, d_out)} for {target}", "lora.rank"
            )
        bound = 1.0 / np.sqrt(d_in)
        a = rng.uniform(-bound, bound, (rank, d_in))
        adapters.append(LoraAdapter(a, np.zeros((d_out, rank)), scaling, target))
    return adapters


def adapter_parameter_count(spec: ModelSpec, rank: int) -> int:
    return sum(rank * (d_in + d_out) for d_out, d_in in map(spec.weight_shape, spec.adapter_targets))


def effective_weights(params: ParameterSet, adapters: Sequence[LoraAdapter] | None = None) -> dict:
    weights = {l.name: l.values for l in params}
    for ad in adapters or ():
        if ad.target_layer not in weights:
            raise ShapeError(f"adapter target {ad.target_layer!r} not in model")
        base = weights[ad.target_layer]
        if base.shape != (ad.d_out, ad.d_in):
            raise ShapeError(f"adapter shape {(ad.d_out, ad.d_in)} does not fit {base.shape}")
        weights[ad.target_layer] = base + ad.delta()
    return weights


def _activate(z: np.ndarray, name: str) -> np.ndarray:
    return np.tanh(z) if name == "tanh" else np.maximum(z, 0.0)


def _activate_grad(z: np.ndarray, h: np.ndarray, name: str) -> np.ndarray:
    return 1.0 - h * h if name == "tanh" else (z > 0).astype(np.float64)


def _check_input(spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"expected (n, {spec.input_dim}) features, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite input features")
    return x


def _forward_pass(params, spec, x, adapters):
    weights = effective_weights(params, adapters)
    missing = [n for i in range(spec.n_dense) for n in (f"dense{i}.weight", f"dense{i}.bias")
               if n not in weights]
    if missing:
        raise ShapeError(f"model is missing layers {missing}")
    h = _check_input(spec, x)
    pre, post = [], [h]
    for i in range(spec.n_dense):
        z = h @ weights[f"dense{i}.weight"].T + weights[f"dense{i}.bias"]
        pre.append(z)
        h = expit(z) if i == spec.n_dense - 1 else _activate(z, spec.activation)
        post.append(h)
    return weights, pre, post


def forward(params: ParameterSet, spec: ModelSpec, x, adapters: Sequence[LoraAdapter] | None = None) -> np.ndarray:
    """Probability of class 1 for every row of ``x``."""
    _, _, post = _forward_pass(params, spec, x, adapters)
    return post[-1][:, 0]


def binary_cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    p = np.clip(probs, EPS, 1.0 - EPS)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def loss(params: ParameterSet, spec: ModelSpec, data: Dataset, adapters=None) -> float:
    if len(data) == 0:
        raise UsageError("loss of an empty dataset")
    return binary_cross_entropy(forward(params, spec, data.features, adapters), data.labels)


def gradient(params: ParameterSet, spec: ModelSpec, data: Dataset, adapters=None):
    """Gradient of the mean cross-entropy.

    Returns ``(layer_grads, adapter_grads)``: a ParameterSet over the trainable
    layers (frozen-base layers are absent) and one LoraAdapter per input
    adapter holding dL/dA and dL/dB.
    """
    if len(data) == 0:
        raise UsageError("gradient of an empty dataset")
    weights, pre, post = _forward_pass(params, spec, data.features, adapters)
    n = len(data)
    dz = (post[-1] - data.labels.astype(np.float64)[:, None]) / n
    weight_grads = {}
    bias_grads = {}
    for i in reversed(range(spec.n_dense)):
        weight_grads[f"dense{i}.weight"] = dz.T @ post[i]
        bias_grads[f"dense{i}.bias"] = dz.sum(axis=0)
        if i > 0:
            dh = dz @ weights[f"dense{i}.weight"]
            dz = dh * _activate_grad(pre[i - 1], post[i], spec.activation)

    all_grads = {**weight_grads, **bias_grads}
    layer_grads = ParameterSet(
        Layer(l.name, all_grads[l.name], l.role) for l in params if l.role in TRAINABLE_ROLES
    )
    adapter_grads = []
    for ad in adapters or ():
        g = weight_grads[ad.target_layer]
        coef = ad.scaling / ad.rank
        adapter_grads.append(ad.with_factors(coef * ad.b_matrix.T @ g, coef * g @ ad.a_matrix.T))
    return layer_grads, adapter_grads


def sgd_step(params, grads, lr: float):
    """``p - lr * g`` on trainable layers, or on every adapter factor.

    Accepts either a ParameterSet with its gradient ParameterSet, or a list of
    adapters with the matching list of adapter gradients.
    """
    if lr < 0:
        raise UsageError("learning rate must be non-negative")
    if isinstance(params, ParameterSet):
        updates = {}
        for g in grads:
            if g.name not in params:
                raise ShapeError(f"gradient for unknown layer {g.name!r}")
            p = params.layer(g.name)
            if p.shape != g.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match {p.shape} for {g.name!r}")
            if p.role in TRAINABLE_ROLES and lr != 0:
                updates[g.name] = p.values - lr * g.values
        return params.replace(updates) if updates else params
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise ShapeError("adapter gradient count does not match adapters")
    out = []
    for ad, g in zip(params, grads):
        if g.target_layer != ad.target_layer or g.a_matrix.shape != ad.a_matrix.shape or \
                g.b_matrix.shape != ad.b_matrix.shape:
            raise ShapeError(f"adapter gradient does not match adapter on {ad.target_layer!r}")
        if lr == 0:
            out.append(ad)
        else:
            out.append(ad.with_factors(ad.a_matrix - lr * g.a_matrix, ad.b_matrix - lr * g.b_matrix))
    return out


PAYLOAD_MODES = ("full", "adapter-only", "decoupled")


def trainable_parameter_count(params: ParameterSet, mode: str, adapters=None) -> int:
    """Parameters one client exchanges per round under ``mode``."""
    if mode == "full":
        return params.size - params.role_size(FROZEN)
    if mode == "adapter-only":
        return sum(ad.parameter_count for ad in adapters or ())
    if mode == "decoupled":
        return params.role_size(SHARED)
    raise UsageError(f"unknown payload mode {mode!r}")
