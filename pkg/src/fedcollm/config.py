"""Experiment configuration: one JSON document with full defaulting.

Flags override file values; nothing is read from the environment except
the config path. The effective config echo is the canonical serialization
that run directories snapshot.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError

TRANSPORTS = ("plain", "secure")
PARTITION_SCHEMES = ("iid", "dirichlet")
BASELINE_KINDS = ("zero_shot", "standalone", "fedavg", "centralized")


@dataclass
class ModelPreset:
    n_layers: int
    d_model: int
    n_heads: int
    context_len: int = 64


@dataclass
class LoraPreset:
    rank: int = 8
    alpha: float = 16.0
    targets: tuple[str, ...] = ("q", "v")


@dataclass
class DistillPreset:
    lam: float = 0.5
    temperature: float = 1.0
    direction: str = "forward"


@dataclass
class DataPreset:
    path: str | None = None        # null: use the bundled synthetic corpus
    n_docs: int = 240
    corpus_seed: int = 20240601
    partition: str = "iid"
    beta: float = 0.5


@dataclass
class EvalPreset:
    mcq_n: int = 200
    mcq_prompt_len: int = 16
    mcq_choice_len: int = 8
    mcq_choices: int = 4
    length_normalize: bool = True
    initial: bool = True           # also evaluate before round 1


@dataclass
class ExperimentConfig:
    seed: int = 1234
    out_dir: str = "runs/latest"
    transport: str = "plain"
    clip: float = 0.5
    clients: int = 4               # K
    rounds: int = 5                # T
    local_epochs: int = 1          # E
    distill_steps: int = 10        # R
    lr_theta: float = 0.2
    lr_omega: float = 0.4
    batch_size: int = 4
    distill_batch_size: int = 16
    parallel_clients: bool = False
    slm: ModelPreset = field(default_factory=lambda: ModelPreset(2, 64, 4))
    llm: ModelPreset = field(default_factory=lambda: ModelPreset(4, 128, 8))
    slm_lora: LoraPreset = field(default_factory=LoraPreset)
    llm_lora: LoraPreset = field(default_factory=LoraPreset)
    distill: DistillPreset = field(default_factory=DistillPreset)
    data: DataPreset = field(default_factory=DataPreset)
    eval: EvalPreset = field(default_factory=EvalPreset)

    def validate(self) -> None:
        problems = []
        if not 0 <= self.seed < 2**64:
            problems.append("seed: must fit in 64 bits")
        if self.transport not in TRANSPORTS:
            problems.append(f"transport: must be one of {TRANSPORTS}")
        if self.clip <= 0:
            problems.append("clip: must be > 0")
        for name in ("clients",):
            if getattr(self, name) < 1:
                problems.append(f"{name}: must be >= 1")
        for name in ("rounds", "local_epochs", "distill_steps",
                     "batch_size", "distill_batch_size"):
            if getattr(self, name) < 0:
                problems.append(f"{name}: must be >= 0")
        for name in ("lr_theta", "lr_omega"):
            if getattr(self, name) < 0:
                problems.append(f"{name}: must be >= 0")
        for side in ("slm", "llm"):
            preset = getattr(self, side)
            if preset.d_model % preset.n_heads != 0:
                problems.append(f"{side}.d_model: not divisible by {side}.n_heads")
            if preset.context_len < 2:
                problems.append(f"{side}.context_len: must be >= 2")
        if self.data.partition not in PARTITION_SCHEMES:
            problems.append(f"data.partition: must be one of {PARTITION_SCHEMES}")
        if self.data.beta <= 0:
            problems.append("data.beta: must be > 0")
        if self.distill.lam < 0:
            problems.append("distill.lam: must be >= 0")
        if self.distill.temperature <= 0:
            problems.append("distill.temperature: must be > 0")
        if self.distill.direction not in ("forward", "reverse"):
            problems.append("distill.direction: must be 'forward' or 'reverse'")
        if problems:
            raise ConfigError("invalid config:\n  " + "\n  ".join(problems))


_NESTED = {
    "slm": ModelPreset, "llm": ModelPreset,
    "slm_lora": LoraPreset, "llm_lora": LoraPreset,
    "distill": DistillPreset, "data": DataPreset, "eval": EvalPreset,
}


def _from_dict(raw: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for key, value in raw.items():
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown config field {key!r}")
        if key in _NESTED:
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected an object")
            sub = getattr(cfg, key)
            for sub_key, sub_value in value.items():
                if not hasattr(sub, sub_key):
                    raise ConfigError(f"unknown config field {key}.{sub_key!r}")
                if sub_key == "targets":
                    sub_value = tuple(sub_value)
                setattr(sub, sub_key, sub_value)
        else:
            setattr(cfg, key, value)
    return cfg


def load_config(path: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the JSON file, then flag overrides; validated."""
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    cfg = _from_dict(raw)
    for key, value in (overrides or {}).items():
        if value is not None:
            setattr(cfg, key, value)
    cfg.validate()
    return cfg


def effective_dict(cfg: ExperimentConfig) -> dict:
    out = asdict(cfg)
    out["slm_lora"]["targets"] = list(out["slm_lora"]["targets"])
    out["llm_lora"]["targets"] = list(out["llm_lora"]["targets"])
    return out


def canonical_json(cfg: ExperimentConfig) -> str:
    return json.dumps(effective_dict(cfg), sort_keys=True, indent=2)


def config_digest(cfg: ExperimentConfig) -> str:
    """Digest of everything that determines the run's results; the output
    directory is deployment detail and excluded."""
    d = effective_dict(cfg)
    d.pop("out_dir")
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
