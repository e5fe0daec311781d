"""Binary checkpoint container shared by models and adapter sets.

Layout (all little-endian): magic "FCLM", version u16, config-JSON length
u32 + bytes (canonical JSON, sorted keys), tensor count u64, then per
tensor: name length u32, name bytes, rank u32, dims as u64 each, f64
payload. Canonical serialization makes save -> load -> save byte-stable.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import InputError
from .lora import LoraAdapterSet, LoraConfig
from .model import LanguageModel, ModelConfig, init_model
from .tensor import Tensor

MAGIC = b"FCLM"
VERSION = 1


def save_checkpoint(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    config_blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(config_blob)), config_blob,
             struct.pack("<Q", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise InputError(f"{path}: not a checkpoint (bad magic {blob[:4]!r})")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    (config_len,) = struct.unpack_from("<I", blob, 6)
    offset = 10
    config = json.loads(blob[offset : offset + config_len].decode("utf-8"))
    offset += config_len
    (count,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}Q", blob, offset)
        offset += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).reshape(dims)
        offset += 8 * size
        tensors[name] = arr.astype(np.float64)
    return config, tensors


# ---------------------------------------------------------------------------
# typed wrappers
# ---------------------------------------------------------------------------


def model_config_dict(cfg: ModelConfig) -> dict:
    return {
        "n_layers": cfg.n_layers,
        "d_model": cfg.d_model,
        "n_heads": cfg.n_heads,
        "vocab_size": cfg.vocab_size,
        "context_len": cfg.context_len,
        "seed": cfg.seed,
    }


def lora_config_dict(cfg: LoraConfig) -> dict:
    return {"rank": cfg.rank, "alpha": cfg.alpha, "targets": list(cfg.targets), "seed": cfg.seed}


def save_model(path, model: LanguageModel) -> None:
    config = {"kind": "language_model", "model": model_config_dict(model.config)}
    save_checkpoint(path, config, {k: t.data for k, t in model.params.items()})


def load_model(path) -> LanguageModel:
    config, tensors = load_checkpoint(path)
    if config.get("kind") != "language_model":
        raise InputError(f"{path}: checkpoint is not a language model")
    model = init_model(ModelConfig(**config["model"]))
    for name, arr in tensors.items():
        model.params[name].data = arr.copy()
    return model


def save_adapters(path, adapters: LoraAdapterSet, model_cfg: ModelConfig) -> None:
    config = {
        "kind": "lora_adapters",
        "model": model_config_dict(model_cfg),
        "lora": lora_config_dict(adapters.config),
    }
    tensors = {}
    for layer, target in adapters.keys():
        a_mat, b_mat = adapters.entries[(layer, target)]
        tensors[f"layer{layer}.{target}.A"] = a_mat.data
        tensors[f"layer{layer}.{target}.B"] = b_mat.data
    save_checkpoint(path, config, tensors)


def load_adapters(path) -> tuple[LoraAdapterSet, ModelConfig]:
    config, tensors = load_checkpoint(path)
    if config.get("kind") != "lora_adapters":
        raise InputError(f"{path}: checkpoint is not an adapter set")
    model_cfg = ModelConfig(**config["model"])
    lora_raw = dict(config["lora"])
    lora_raw["targets"] = tuple(lora_raw["targets"])
    lora_cfg = LoraConfig(**lora_raw)
    entries = {}
    for layer in range(model_cfg.n_layers):
        for target in lora_cfg.targets:
            entries[(layer, target)] = (
                Tensor(tensors[f"layer{layer}.{target}.A"].copy(), requires_grad=True),
                Tensor(tensors[f"layer{layer}.{target}.B"].copy(), requires_grad=True),
            )
    return LoraAdapterSet(lora_cfg, model_cfg.n_layers, model_cfg.d_model, entries), model_cfg
