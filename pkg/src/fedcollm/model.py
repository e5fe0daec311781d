"""Decoder-only transformer language models.

The same architecture is instantiated at two sizes: the server's large
model and the small model shared by server and clients. Blocks are
pre-norm with learned positional embeddings; attention projections can
carry low-rank adapters (see :mod:`fedcollm.lora`).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError
from .tensor import Tensor

MLP_WIDTH_FACTOR = 4


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    vocab_size: int
    context_len: int
    seed: int

    def __post_init__(self):
        for field in ("n_layers", "d_model", "n_heads", "vocab_size", "context_len"):
            if getattr(self, field) < 1:
                raise ConfigError(f"ModelConfig.{field} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"ModelConfig.d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if self.context_len < 2:
            raise ConfigError("ModelConfig.context_len must be >= 2")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("ModelConfig.seed must fit in 64 bits")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def param_count(config: ModelConfig) -> int:
    """Closed-form number of base parameters for a config."""
    d, v = config.d_model, config.vocab_size
    per_layer = (
        2 * d                       # ln1
        + 4 * (d * d + d)           # q,k,v,o projections
        + 2 * d                     # ln2
        + d * MLP_WIDTH_FACTOR * d + MLP_WIDTH_FACTOR * d   # mlp in
        + MLP_WIDTH_FACTOR * d * d + d                      # mlp out
    )
    return (
        v * d                       # token embedding
        + config.context_len * d    # positional embedding
        + config.n_layers * per_layer
        + 2 * d                     # final norm
        + d * v + v                 # output head
    )


class LanguageModel:
    """A decoder-only transformer with named, frozen base parameters."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def checksum(self) -> str:
        """SHA-256 over all parameter bytes in name order."""
        h = hashlib.sha256()
        for name in self.params:
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()


def init_model(config: ModelConfig) -> LanguageModel:
    """Deterministically initialize a model from its config seed.

    Weights are Gaussian with std 0.02, biases zero, norm gains one; the
    creation order is fixed so equal seeds give bit-identical parameters.
    """
    rng = np.random.default_rng(config.seed)
    d, v = config.d_model, config.vocab_size

    def weight(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape))

    params: dict[str, Tensor] = {}
    params["embed.tok"] = weight(v, d)
    params["embed.pos"] = weight(config.context_len, d)
    for i in range(config.n_layers):
        params[f"layer{i}.ln1.gain"] = Tensor(np.ones(d))
        params[f"layer{i}.ln1.bias"] = Tensor(np.zeros(d))
        for proj in ("q", "k", "v", "o"):
            params[f"layer{i}.attn.{proj}.w"] = weight(d, d)
            params[f"layer{i}.attn.{proj}.b"] = Tensor(np.zeros(d))
        params[f"layer{i}.ln2.gain"] = Tensor(np.ones(d))
        params[f"layer{i}.ln2.bias"] = Tensor(np.zeros(d))
        params[f"layer{i}.mlp.fc.w"] = weight(d, MLP_WIDTH_FACTOR * d)
        params[f"layer{i}.mlp.fc.b"] = Tensor(np.zeros(MLP_WIDTH_FACTOR * d))
        params[f"layer{i}.mlp.proj.w"] = weight(MLP_WIDTH_FACTOR * d, d)
        params[f"layer{i}.mlp.proj.b"] = Tensor(np.zeros(d))
    params["ln_f.gain"] = Tensor(np.ones(d))
    params["ln_f.bias"] = Tensor(np.zeros(d))
    params["head.w"] = weight(d, v)
    params["head.b"] = Tensor(np.zeros(v))

    model = LanguageModel(config, params)
    actual = sum(p.size for p in params.values())
    expected = param_count(config)
    if actual != expected:
        raise ConfigError(f"parameter count mismatch: {actual} != closed form {expected}")
    return model


def _project(x: Tensor, model: LanguageModel, layer: int, which: str, adapters) -> Tensor:
    """Linear projection plus the low-rank adapter path when one is attached."""
    p = model.params
    out = T.add(T.matmul(x, p[f"layer{layer}.attn.{which}.w"]), p[f"layer{layer}.attn.{which}.b"])
    if adapters is not None:
        entry = adapters.entry(layer, which)
        if entry is not None:
            a_mat, b_mat = entry
            low = T.matmul(x, T.transpose2d(a_mat))
            out = T.add(out, T.scale(T.matmul(low, T.transpose2d(b_mat)), adapters.scaling))
    return out


def _attention(x: Tensor, model: LanguageModel, layer: int, adapters) -> Tensor:
    cfg = model.config
    q = _project(x, model, layer, "q", adapters)
    k = _project(x, model, layer, "k", adapters)
    v = _project(x, model, layer, "v", adapters)
    inv_sqrt = 1.0 / np.sqrt(cfg.head_dim)
    heads = []
    for h in range(cfg.n_heads):
        lo, hi = h * cfg.head_dim, (h + 1) * cfg.head_dim
        qh = T.slice_cols(q, lo, hi)
        kh = T.slice_cols(k, lo, hi)
        vh = T.slice_cols(v, lo, hi)
        scores = T.scale(T.matmul(qh, T.transpose2d(kh)), inv_sqrt)
        probs = T.causal_softmax(scores)
        heads.append(T.matmul(probs, vh))
    merged = T.concat_cols(heads)
    return _project(merged, model, layer, "o", adapters)


def _mlp(x: Tensor, model: LanguageModel, layer: int) -> Tensor:
    p = model.params
    hidden = T.gelu(T.add(T.matmul(x, p[f"layer{layer}.mlp.fc.w"]), p[f"layer{layer}.mlp.fc.b"]))
    return T.add(T.matmul(hidden, p[f"layer{layer}.mlp.proj.w"]), p[f"layer{layer}.mlp.proj.b"])


def forward(model: LanguageModel, tokens, adapters=None) -> Tensor:
    """Causal logits for a token sequence, shape [len, vocab]."""
    cfg = model.config
    ids = np.asarray(tokens, dtype=np.intp)
    if ids.ndim != 1 or ids.size == 0:
        raise InputError("forward expects a non-empty 1-D token sequence")
    if ids.size > cfg.context_len:
        raise InputError(f"sequence length {ids.size} exceeds context {cfg.context_len}")
    if (ids < 0).any() or (ids >= cfg.vocab_size).any():
        raise InputError(f"token id out of range for vocab size {cfg.vocab_size}")
    if adapters is not None and adapters.d_model != cfg.d_model:
        raise InputError(
            f"adapter width {adapters.d_model} does not match model width {cfg.d_model}"
        )

    p = model.params
    h = T.add(T.embedding(p["embed.tok"], ids), T.slice_rows(p["embed.pos"], 0, ids.size))
    for i in range(cfg.n_layers):
        normed = T.layer_norm(h, p[f"layer{i}.ln1.gain"], p[f"layer{i}.ln1.bias"])
        h = T.add(h, _attention(normed, model, i, adapters))
        normed = T.layer_norm(h, p[f"layer{i}.ln2.gain"], p[f"layer{i}.ln2.bias"])
        h = T.add(h, _mlp(normed, model, i))
    h = T.layer_norm(h, p["ln_f.gain"], p["ln_f.bias"])
    return T.add(T.matmul(h, p["head.w"]), p["head.b"])


def next_token_log_probs(model: LanguageModel, seq, adapters=None) -> np.ndarray:
    """log P(seq[t] | seq[:t]) for t = 1..len-1, computed without a graph."""
    with T.no_grad():
        logits = forward(model, seq, adapters).data
    shifted = logits[:-1]
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    targets = np.asarray(seq[1:], dtype=np.intp)
    return logp[np.arange(targets.size), targets]


def perplexity(model: LanguageModel, adapters, dataset) -> float:
    """exp(mean next-token cross-entropy) over all predicted positions."""
    docs = list(dataset)
    if not docs:
        raise InputError("perplexity needs a non-empty dataset")
    total = 0.0
    count = 0
    for seq in docs:
        if len(seq) < 2:
            raise InputError("perplexity needs sequences of length >= 2")
        lp = next_token_log_probs(model, seq, adapters)
        total -= lp.sum()
        count += lp.size
    return float(np.exp(total / count))


def score_choices(
    model: LanguageModel,
    adapters,
    prompt,
    choices,
    length_normalize: bool = True,
) -> tuple[int, list[float]]:
    """Score each choice by log-likelihood of its tokens given the prompt.

    Scores are length-normalized by default (mean log-likelihood per choice
    token); pass ``length_normalize=False`` for raw summed log-likelihood.
    Ties break toward the lowest index.
    """
    prompt = list(prompt)
    choices = [list(c) for c in choices]
    if len(choices) < 2:
        raise InputError("score_choices needs at least two choices")
    if not prompt:
        raise InputError("score_choices needs a non-empty prompt")
    scores = []
    for choice in choices:
        if not choice:
            raise InputError("choices must be non-empty token sequences")
        if len(prompt) + len(choice) > model.config.context_len:
            raise InputError(
                f"prompt+choice length {len(prompt) + len(choice)} exceeds "
                f"context {model.config.context_len}"
            )
        lp = next_token_log_probs(model, prompt + choice, adapters)
        choice_lp = lp[len(prompt) - 1 :]
        total = float(choice_lp.sum())
        scores.append(total / len(choice) if length_normalize else total)
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return best, scores
