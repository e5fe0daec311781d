"""Low-rank adapters for attention projections.

An adapter entry at (layer, target) is a pair (A: [r, d], B: [d, r]); the
effective weight delta is (alpha / r) * B @ A. B starts at zero, so fresh
adapters never change model output. Flattening follows one canonical
order (layers ascending, targets q,k,v,o, A before B, row-major) which is
normative for transport, aggregation, and checkpoints.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError, ProtocolError
from .model import ModelConfig
from .tensor import Tensor

TARGET_ORDER = ("q", "k", "v", "o")


@dataclass(frozen=True)
class LoraConfig:
    rank: int
    alpha: float
    targets: tuple[str, ...] = ("q", "v")
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("LoraConfig.rank must be positive")
        if self.alpha <= 0:
            raise ConfigError("LoraConfig.alpha must be positive")
        if not self.targets:
            raise ConfigError("LoraConfig.targets must be non-empty")
        bad = [t for t in self.targets if t not in TARGET_ORDER]
        if bad:
            raise ConfigError(f"LoraConfig.targets contains unknown projections {bad}")
        ordered = tuple(t for t in TARGET_ORDER if t in self.targets)
        object.__setattr__(self, "targets", ordered)

    @classmethod
    def with_default_alpha(cls, rank: int, targets=("q", "v"), seed: int = 0) -> "LoraConfig":
        return cls(rank=rank, alpha=2.0 * rank, targets=tuple(targets), seed=seed)


class LoraAdapterSet:
    """All (A, B) pairs for one model, keyed by (layer, target)."""

    def __init__(self, config: LoraConfig, n_layers: int, d_model: int,
                 entries: dict[tuple[int, str], tuple[Tensor, Tensor]]):
        self.config = config
        self.n_layers = n_layers
        self.d_model = d_model
        self.entries = entries

    @property
    def scaling(self) -> float:
        return self.config.alpha / self.config.rank

    def entry(self, layer: int, target: str):
        return self.entries.get((layer, target))

    def keys(self):
        for layer in range(self.n_layers):
            for target in self.config.targets:
                yield layer, target

    def trainable_params(self) -> list[Tensor]:
        params = []
        for key in self.keys():
            a_mat, b_mat = self.entries[key]
            params.extend((a_mat, b_mat))
        return params

    def copy(self) -> "LoraAdapterSet":
        entries = {
            key: (Tensor(a.data.copy(), requires_grad=True),
                  Tensor(b.data.copy(), requires_grad=True))
            for key, (a, b) in self.entries.items()
        }
        return LoraAdapterSet(self.config, self.n_layers, self.d_model, entries)

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(flatten(self)).tobytes()).hexdigest()

    def same_config(self, other: "LoraAdapterSet") -> bool:
        return (
            self.config == other.config
            and self.n_layers == other.n_layers
            and self.d_model == other.d_model
        )


def new_adapters(model_config: ModelConfig, lora_config: LoraConfig) -> LoraAdapterSet:
    """Fresh adapters: A Gaussian (std 0.02) from the seed, B exactly zero."""
    if lora_config.rank > model_config.d_model:
        raise ConfigError(
            f"LoRA rank {lora_config.rank} exceeds model width {model_config.d_model}"
        )
    rng = np.random.default_rng(lora_config.seed)
    r, d = lora_config.rank, model_config.d_model
    entries = {}
    for layer in range(model_config.n_layers):
        for target in lora_config.targets:
            a_mat = Tensor(rng.normal(0.0, 0.02, size=(r, d)), requires_grad=True)
            b_mat = Tensor(np.zeros((d, r)), requires_grad=True)
            entries[(layer, target)] = (a_mat, b_mat)
    return LoraAdapterSet(lora_config, model_config.n_layers, d, entries)


def adapter_delta(adapters: LoraAdapterSet, layer: int, target: str) -> np.ndarray:
    """Effective weight delta (alpha / r) * B @ A for one entry."""
    entry = adapters.entry(layer, target)
    if entry is None:
        raise InputError(f"no adapter entry at layer {layer} target {target!r}")
    a_mat, b_mat = entry
    return adapters.scaling * (b_mat.data @ a_mat.data)


def flatten(adapters: LoraAdapterSet) -> np.ndarray:
    """Canonical transport vector of all adapter values."""
    parts = []
    for key in adapters.keys():
        a_mat, b_mat = adapters.entries[key]
        parts.append(a_mat.data.ravel())
        parts.append(b_mat.data.ravel())
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


def unflatten(vec: np.ndarray, model_config: ModelConfig, lora_config: LoraConfig) -> LoraAdapterSet:
    """Inverse of :func:`flatten` for a given configuration."""
    return unflatten_dims(vec, model_config.n_layers, model_config.d_model, lora_config)


def unflatten_dims(vec: np.ndarray, n_layers: int, d_model: int,
                   lora_config: LoraConfig) -> LoraAdapterSet:
    r, d = lora_config.rank, d_model
    expected = n_layers * len(lora_config.targets) * 2 * d * r
    vec = np.asarray(vec, dtype=np.float64)
    if vec.size != expected:
        raise ProtocolError(f"flattened adapter length {vec.size} != expected {expected}")
    entries = {}
    pos = 0
    for layer in range(n_layers):
        for target in lora_config.targets:
            a_mat = Tensor(vec[pos : pos + r * d].reshape(r, d).copy(), requires_grad=True)
            pos += r * d
            b_mat = Tensor(vec[pos : pos + d * r].reshape(d, r).copy(), requires_grad=True)
            pos += d * r
            entries[(layer, target)] = (a_mat, b_mat)
    return LoraAdapterSet(lora_config, n_layers, d, entries)


def count_transmitted_params(
    n_layers: int, d_model: int, lora: LoraConfig, full_param_count: int
) -> tuple[int, float]:
    """Adapter parameters sent per client per direction, and their share
    of the full model's parameter count."""
    if full_param_count <= 0:
        raise InputError("full_param_count must be positive")
    count = n_layers * len(lora.targets) * 2 * d_model * lora.rank
    return count, count / full_param_count
