"""Training objectives: next-token task loss, supervised fine-tuning loss,
bidirectional distillation loss, and the combined server objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError
from .tensor import Tensor

KD_DIRECTIONS = ("forward", "reverse")


@dataclass(frozen=True)
class DistillWeights:
    """Distillation hyperparameters: term weight and softening temperature."""

    lam: float = 1.0
    temperature: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("DistillWeights.lam must be >= 0")
        if self.temperature <= 0:
            raise ConfigError("DistillWeights.temperature must be > 0")


def task_loss(logits: Tensor, targets) -> Tensor:
    """Mean next-token cross-entropy: position t predicts targets[t+1]."""
    if logits.data.ndim != 2:
        raise InputError(f"task_loss expects [len, vocab] logits, got {logits.shape}")
    n, vocab = logits.data.shape
    targets = np.asarray(targets, dtype=np.intp)
    if targets.size != n:
        raise InputError(f"targets length {targets.size} != logits length {n}")
    if n < 2:
        raise InputError("task_loss needs at least two positions to shift")
    if (targets < 0).any() or (targets >= vocab).any():
        raise InputError(f"target id out of range for vocab size {vocab}")
    logp = T.log_softmax(logits)
    picked = T.pick(T.slice_rows(logp, 0, n - 1), targets[1:])
    return T.scale(T.tmean(picked), -1.0)


# Eq-for-eq the supervised fine-tuning loss is the same cross-entropy.
ft_loss = task_loss


def kd_loss(
    student_logits: Tensor,
    teacher_logits: Tensor,
    w: DistillWeights,
    direction: str = "forward",
) -> Tensor:
    """Mean per-position KL divergence between softened distributions, scaled
    by temperature squared.

    "forward" (default) treats the teacher's softened distribution as the
    target: KL(teacher || student). "reverse" uses KL(student || teacher).
    The teacher side is a constant; no gradient reaches it.
    """
    if direction not in KD_DIRECTIONS:
        raise ConfigError(f"kd direction must be one of {KD_DIRECTIONS}, got {direction!r}")
    if student_logits.data.shape != teacher_logits.data.shape:
        raise InputError(
            f"logit shapes differ: student {student_logits.data.shape} "
            f"vs teacher {teacher_logits.data.shape}"
        )
    if student_logits.data.ndim != 2:
        raise InputError("kd_loss expects [len, vocab] logits")
    tau = w.temperature
    n_pos = student_logits.data.shape[0]

    t_scaled = teacher_logits.data / tau
    t_shift = t_scaled - t_scaled.max(axis=-1, keepdims=True)
    t_logp = t_shift - np.log(np.exp(t_shift).sum(axis=-1, keepdims=True))
    t_prob = np.exp(t_logp)

    s_logq = T.log_softmax(T.scale(student_logits, 1.0 / tau))
    if direction == "forward":
        # sum p*log p is a constant; the graph only carries -sum p*log q
        plogp = float(np.where(t_prob > 0, t_prob * t_logp, 0.0).sum())
        cross = T.tsum(T.mul(s_logq, Tensor(t_prob)))
        kl_total = T.add_const(T.scale(cross, -1.0), plogp)
    else:
        s_q = T.softmax(T.scale(student_logits, 1.0 / tau))
        qlogq = T.tsum(T.mul(s_q, s_logq))
        qlogp = T.tsum(T.mul(s_q, Tensor(t_logp)))
        kl_total = T.add(qlogq, T.scale(qlogp, -1.0))
    out = T.scale(kl_total, tau * tau / n_pos)
    # the divergence is non-negative; a negative total within accumulation
    # noise of zero is rounding, so snap it (gradients are untouched)
    if -1e-12 < float(out.data) < 0.0:
        out.data = np.zeros_like(out.data)
    return out


def server_losses(
    llm_logits: Tensor,
    slm_logits: Tensor,
    targets,
    w: DistillWeights,
    direction: str = "forward",
) -> tuple[Tensor, Tensor]:
    """Combined objectives for the two server-side models.

    Each model's loss is its fine-tuning cross-entropy plus lam times a
    distillation term that treats the other model's logits as a constant
    target, so the large model's loss only reaches its own adapter and
    likewise for the small model.
    """
    loss_f = T.add(
        ft_loss(llm_logits, targets),
        T.scale(kd_loss(llm_logits, slm_logits.detach(), w, direction), w.lam),
    )
    loss_g = T.add(
        ft_loss(slm_logits, targets),
        T.scale(kd_loss(slm_logits, llm_logits.detach(), w, direction), w.lam),
    )
    return loss_f, loss_g
