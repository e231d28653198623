"""Loss terms for adversarial self-distillation.

Every function here is a pure map from logits (and weights) to a scalar
tensor, differentiable with respect to the student side only: superior and
previous-epoch logits are treated as constants, and the critic's parameters
are the caller's business. The student objective is

    (1 - alpha_p - alpha_g) * CE + alpha_p * L_prog + alpha_g * L_guide + omega * L_adv

while the critic minimizes its score on student logits (optionally minus the
score on superior logits) plus a gradient penalty that keeps it near
1-Lipschitz.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch

__all__ = [
    "LossWeights",
    "SoftDistribution",
    "soften",
    "cross_entropy",
    "kd_kl",
    "guide_loss",
    "progressive_loss",
    "gradient_penalty",
    "critic_loss",
    "adversarial_loss",
    "total_loss",
]

# Floor for student probabilities before taking logs; keeps saturated softmax
# outputs from producing NaN.
_PROB_FLOOR = 1e-12


@dataclass
class LossWeights:
    """Balancing and temperature scalars of the combined objective.

    ``alpha_g`` and ``alpha_p`` weight the guide and progressive KL terms,
    ``omega`` the adversarial term, and ``gp_lambda`` the critic's gradient
    penalty. The implied cross-entropy weight is 1 - alpha_p - alpha_g and
    must stay non-negative.
    """

    alpha_g: float = 0.1
    alpha_p: float = 0.3
    omega: float = 0.1
    tau_g: float = 1.0
    tau_p: float = 1.0
    gp_lambda: float = 10.0

    def __post_init__(self):
        if not (0.0 <= self.alpha_g <= 1.0 and 0.0 <= self.alpha_p <= 1.0):
            raise ValueError("alpha_g and alpha_p must lie in [0, 1]")
        if self.alpha_g + self.alpha_p > 1.0 + 1e-12:
            raise ValueError("alpha_g + alpha_p must not exceed 1")
        if self.omega < 0.0:
            raise ValueError("omega must be non-negative")
        if self.tau_g <= 0.0 or self.tau_p <= 0.0:
            raise ValueError("temperatures must be positive")
        if self.gp_lambda < 0.0:
            raise ValueError("gp_lambda must be non-negative")

    @property
    def alpha_ce(self) -> float:
        return 1.0 - self.alpha_p - self.alpha_g


@dataclass
class SoftDistribution:
    """Row-stochastic class probabilities together with the temperature that made them."""

    probs: torch.Tensor
    temperature: float

    def __post_init__(self):
        if self.probs.ndim != 2 or self.probs.shape[1] < 2:
            raise ValueError("probs must be (batch, classes) with at least 2 classes")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")
        with torch.no_grad():
            if not torch.isfinite(self.probs).all():
                raise ValueError("probs contain NaN or Inf")
            if (self.probs < 0).any() or (self.probs > 1).any():
                raise ValueError("probs must lie in [0, 1]")
            row_err = (self.probs.sum(dim=1) - 1.0).abs().max().item()
        if row_err > 1e-6:
            raise ValueError(f"rows must sum to 1 (max error {row_err:.3g})")


def _check_logits(logits: torch.Tensor, name: str = "logits") -> torch.Tensor:
    if logits.ndim != 2:
        raise ValueError(f"{name} must be (batch, classes), got shape {tuple(logits.shape)}")
    if logits.shape[0] < 1 or logits.shape[1] < 2:
        raise ValueError(f"{name} needs batch >= 1 and classes >= 2")
    if not torch.isfinite(logits).all():
        raise ValueError(f"{name} contain NaN or Inf")
    return logits


def soften(logits: torch.Tensor, tau: float) -> SoftDistribution:
    """Temperature-scaled softmax over the class dimension.

    ``tau`` > 1 flattens the distribution toward uniform, ``tau`` < 1
    sharpens it; softmax's internal max-shift keeps the exponents stable.
    """
    _check_logits(logits)
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    return SoftDistribution(torch.softmax(logits / tau, dim=1), float(tau))


def cross_entropy(labels: torch.Tensor, probs: SoftDistribution) -> torch.Tensor:
    """Mean negative log-probability of the true class, on unsoftened (tau=1) outputs."""
    if probs.temperature != 1.0:
        raise ValueError("cross_entropy expects tau=1 probabilities")
    labels = _check_labels(labels, probs.probs.shape)
    picked = probs.probs[torch.arange(len(labels)), labels]
    return -torch.log(picked.clamp_min(_PROB_FLOOR)).mean()


def _check_labels(labels: torch.Tensor, shape) -> torch.Tensor:
    labels = labels.long()
    if labels.ndim != 1 or len(labels) != shape[0]:
        raise ValueError("labels must be a vector matching the batch dimension")
    if (labels < 0).any() or (labels >= shape[1]).any():
        raise ValueError("label index out of class range")
    return labels


def kd_kl(teacher: SoftDistribution, student: SoftDistribution, tau: float) -> torch.Tensor:
    """tau^2-scaled KL from a constant teacher distribution to the student's.

    Both sides must have been softened at the same ``tau``. The teacher is
    detached, so only the matching cross-entropy part carries gradient; the
    tau^2 prefactor restores the gradient magnitude lost to softening.
    """
    for side in (teacher, student):
        if abs(side.temperature - tau) > 1e-9:
            raise ValueError(
                f"temperature mismatch: distribution at tau={side.temperature}, loss at tau={tau}"
            )
    if teacher.probs.shape != student.probs.shape:
        raise ValueError("teacher/student shape mismatch")
    t = teacher.probs.detach()
    log_ratio = torch.log(t.clamp_min(_PROB_FLOOR)) - torch.log(
        student.probs.clamp_min(_PROB_FLOOR)
    )
    per_example = (t * log_ratio).sum(dim=1)
    return tau * tau * per_example.mean()


def guide_loss(
    superior_logits: torch.Tensor, student_logits: torch.Tensor, tau_g: float
) -> torch.Tensor:
    """Distillation pull toward the frozen, fully-pretrained model's logits."""
    _check_logits(superior_logits, "superior_logits")
    _check_logits(student_logits, "student_logits")
    if superior_logits.shape != student_logits.shape:
        raise ValueError("superior/student logits shape mismatch")
    return kd_kl(soften(superior_logits.detach(), tau_g), soften(student_logits, tau_g), tau_g)


def progressive_loss(
    prev_logits: torch.Tensor, student_logits: torch.Tensor, tau_p: float
) -> torch.Tensor:
    """Distillation pull toward the previous-epoch snapshot; smooths the student's own logits."""
    _check_logits(prev_logits, "prev_logits")
    _check_logits(student_logits, "student_logits")
    if prev_logits.shape != student_logits.shape:
        raise ValueError("previous/student logits shape mismatch")
    return kd_kl(soften(prev_logits.detach(), tau_p), soften(student_logits, tau_p), tau_p)


def gradient_penalty(
    critic: Callable[[torch.Tensor], torch.Tensor],
    superior_logits: torch.Tensor,
    student_logits: torch.Tensor,
    epsilons: torch.Tensor,
) -> torch.Tensor:
    """Mean squared deviation of the critic's gradient norm from 1.

    Each penalty point is the per-example convex combination
    eps * superior + (1 - eps) * student. The graph is kept so the penalty
    can be backpropagated into the critic's parameters. A critic that ignores
    its input (zero gradient) is valid and scores the full (0 - 1)^2 penalty.
    """
    _check_logits(superior_logits, "superior_logits")
    _check_logits(student_logits, "student_logits")
    if superior_logits.shape != student_logits.shape:
        raise ValueError("superior/student logits shape mismatch")
    batch = superior_logits.shape[0]
    epsilons = epsilons.reshape(batch, 1).to(superior_logits.dtype)
    if (epsilons < 0).any() or (epsilons > 1).any():
        raise ValueError("epsilons must lie in [0, 1]")
    mixed = epsilons * superior_logits.detach() + (1.0 - epsilons) * student_logits.detach()
    mixed.requires_grad_(True)
    scores = critic(mixed)
    if scores.shape not in ((batch,), (batch, 1)):
        raise ValueError(f"critic must emit one score per example, got {tuple(scores.shape)}")
    if scores.grad_fn is None:
        # Critic output does not depend on its input at all: zero gradient.
        grads = torch.zeros_like(mixed)
    else:
        grads = torch.autograd.grad(
            outputs=scores.sum(), inputs=mixed, create_graph=True, allow_unused=True
        )[0]
        if grads is None:
            grads = torch.zeros_like(mixed)
    norms = grads.norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def critic_loss(
    scores_student: torch.Tensor,
    scores_superior: torch.Tensor | None,
    gp: torch.Tensor,
    weights: LossWeights,
    include_superior_term: bool = False,
) -> torch.Tensor:
    """Critic objective: student score (optionally minus superior score) plus penalty.

    The default drops the superior-score term, treating the pretrained model's
    scores as a constant; ``include_superior_term=True`` restores the standard
    two-sided earth-mover form.
    """
    if scores_student.numel() == 0:
        raise ValueError("empty score batch")
    loss = scores_student.mean()
    if include_superior_term:
        if scores_superior is None:
            raise ValueError("superior scores required when the superior term is included")
        loss = loss - scores_superior.mean()
    return loss + weights.gp_lambda * gp


def adversarial_loss(scores_student: torch.Tensor) -> torch.Tensor:
    """Negated mean critic score on student logits; the student climbs what the critic sinks."""
    if scores_student.numel() == 0:
        raise ValueError("empty score batch")
    return -scores_student.mean()


def total_loss(ce, lp, lg, la, weights: LossWeights):
    """Weighted sum of the four student-side terms."""
    for name, value in (("ce", ce), ("lp", lp), ("lg", lg), ("la", la)):
        scalar = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(scalar):
            raise ValueError(f"non-finite component {name}: {scalar}")
    return weights.alpha_ce * ce + weights.alpha_p * lp + weights.alpha_g * lg + weights.omega * la
