"""Objectives and teacher/student coupling.

All losses take batched tensors. Teacher-side inputs are treated as
constants (detached) wherever they enter a loss.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import CheckpointError, ConfigError

PARTS = ("recons", "lcl", "gcl")


class EmptyMaskWarning(UserWarning):
    """A masked loss was evaluated with nothing masked; the loss is 0."""


@dataclass
class DistillConfig:
    tau_t: float = 0.07
    tau_s: float = 0.1
    ema_start: float = 0.996
    ema_end: float = 1.0
    center_momentum: float = 0.9
    center_local: bool = True
    local_dim: int = 1024
    global_dim: int = 8192
    alpha_recons: float = 1.0
    alpha_lcl: float = 1.0
    alpha_gcl: float = 1.0
    # "mean": divide masked sums by the masked count; "sum": raw per-sample sums averaged over the batch
    loss_reduction: str = "mean"

    def validate(self) -> None:
        if not 0 < self.tau_t < self.tau_s:
            raise ConfigError(f"distill temperatures must satisfy 0 < tau_t < tau_s, got {self.tau_t}, {self.tau_s}")
        for name in ("ema_start", "ema_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"distill.{name} must lie in [0, 1]")
        if not 0.0 < self.center_momentum < 1.0:
            raise ConfigError("distill.center_momentum must lie in (0, 1)")
        if self.local_dim < 1 or self.global_dim < 1:
            raise ConfigError("distill.local_dim and distill.global_dim must be positive")
        if self.loss_reduction not in ("mean", "sum"):
            raise ConfigError("distill.loss_reduction must be 'mean' or 'sum'")

    @property
    def alphas(self) -> dict:
        return {"recons": self.alpha_recons, "lcl": self.alpha_lcl, "gcl": self.alpha_gcl}


# -- losses ------------------------------------------------------------------


def _masked_mean(values: torch.Tensor, mask: torch.Tensor, reduction: str, what: str) -> torch.Tensor:
    mask = mask.to(values.dtype)
    count = mask.sum()
    if count == 0:
        warnings.warn(f"{what}: mask is empty, loss is 0", EmptyMaskWarning, stacklevel=3)
        return values.sum() * 0.0
    total = (values * mask).sum()
    if reduction == "sum":
        return total / values.shape[0]
    return total / count


def recon_loss(x: torch.Tensor, x_bar: torch.Tensor, mask: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """l1 error on corrupted pixels only."""
    if x.shape != x_bar.shape or x.shape != mask.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)}, {tuple(x_bar.shape)}, {tuple(mask.shape)}")
    return _masked_mean((x - x_bar).abs(), mask, reduction, "recon_loss")


def sharpen(logits: torch.Tensor, tau: float) -> torch.Tensor:
    return F.softmax(logits / tau, dim=-1)


def center_then_sharpen(teacher_logits: torch.Tensor, center: torch.Tensor, tau_t: float) -> torch.Tensor:
    return F.softmax((teacher_logits - center) / tau_t, dim=-1)


def cross_entropy(teacher_probs: torch.Tensor, student_logits: torch.Tensor, tau_s: float) -> torch.Tensor:
    """Row-wise ``-sum_j p_t log p_s`` with ``p_s = softmax(z_s / tau_s)``."""
    return -(teacher_probs.detach() * F.log_softmax(student_logits / tau_s, dim=-1)).sum(dim=-1)


def local_distill_loss(
    student_logits: torch.Tensor,
    teacher_probs: torch.Tensor,
    token_mask: torch.Tensor,
    tau_s: float = 0.1,
    reduction: str = "mean",
) -> torch.Tensor:
    """Token-level distillation restricted to corrupted tokens. Shapes ``(B, n, K)`` and ``(B, n)``."""
    ce = cross_entropy(teacher_probs, student_logits, tau_s)
    return _masked_mean(ce, token_mask, reduction, "local_distill_loss")


def global_distill_loss(
    student_logits_a: torch.Tensor,
    student_logits_b: torch.Tensor,
    teacher_probs_a: torch.Tensor,
    teacher_probs_b: torch.Tensor,
    tau_s: float = 0.1,
) -> torch.Tensor:
    """Cross-view class-token distillation: student(a) vs teacher(b) and student(b) vs teacher(a)."""
    ab = cross_entropy(teacher_probs_b, student_logits_a, tau_s).mean()
    ba = cross_entropy(teacher_probs_a, student_logits_b, tau_s).mean()
    return 0.5 * (ab + ba)


def total_loss(parts: dict, toggles: dict, alphas: dict | None = None):
    """Average of the enabled, alpha-weighted loss parts."""
    enabled = [k for k in PARTS if toggles.get(k)]
    if not enabled:
        raise ConfigError("at least one of the recons/lcl/gcl objectives must be enabled")
    alphas = alphas or {}
    return sum(alphas.get(k, 1.0) * parts[k] for k in enabled) / len(enabled)


# -- teacher coupling --------------------------------------------------------


@torch.no_grad()
def ema_update(teacher_params, student_params, lam: float) -> None:
    """In place ``phi <- lam * phi + (1 - lam) * theta``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"EMA momentum must lie in [0, 1], got {lam}")
    teacher_params, student_params = list(teacher_params), list(student_params)
    if len(teacher_params) != len(student_params):
        raise CheckpointError("teacher and student have different parameter counts")
    for phi, theta in zip(teacher_params, student_params):
        if phi.shape != theta.shape:
            raise CheckpointError(f"teacher/student parameter shape mismatch {tuple(phi.shape)} vs {tuple(theta.shape)}")
    if lam == 1.0:
        return
    if lam == 0.0:
        # plain copy: 0 * phi + theta would turn -0.0 into +0.0
        for phi, theta in zip(teacher_params, student_params):
            phi.copy_(theta)
        return
    for phi, theta in zip(teacher_params, student_params):
        phi.mul_(lam).add_(theta, alpha=1.0 - lam)


@torch.no_grad()
def update_center(center: torch.Tensor, teacher_logits: torch.Tensor, m: float) -> torch.Tensor:
    """EMA of the batch-mean teacher logits; every axis but the last is averaged."""
    if not 0.0 < m < 1.0:
        raise ValueError(f"center momentum must lie in (0, 1), got {m}")
    batch_mean = teacher_logits.reshape(-1, teacher_logits.shape[-1]).mean(dim=0)
    return center * m + batch_mean * (1.0 - m)


# -- schedules ---------------------------------------------------------------


def cosine_schedule(start: float, end: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return end
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == total_steps:
        return end
    if step == 0:
        return start
    return end + (start - end) * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def warmup_cosine(base: float, final: float, step: int, total_steps: int, warmup_steps: int) -> float:
    """Linear warmup from 0 to ``base`` then cosine decay to ``final``."""
    if step < warmup_steps:
        return base * (step + 1) / warmup_steps
    return cosine_schedule(base, final, step - warmup_steps, max(total_steps - warmup_steps - 1, 0))
