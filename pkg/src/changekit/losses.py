"""Training objectives: pixel contrastive, codebook diversity, uncertainty.

All losses are plain differentiable torch functions. Similarities are cosine
based; the contrastive ratio uses exp(cos/temperature) so the log stays
defined for anti-aligned pairs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import InputError, ParameterError, ShapeError

UNIT_NORM_TOL = 1e-5


def _check_unit_rows(t: torch.Tensor, name: str) -> None:
    if t.numel() == 0:
        return
    norms = t.norm(dim=-1)
    err = (norms - 1.0).abs().max().item()
    if err > UNIT_NORM_TOL:
        raise InputError(f"{name} rows must be unit-norm within {UNIT_NORM_TOL}, "
                         f"worst deviation {err:.3e}")


@dataclass
class ContrastiveBatch:
    """Anchors with their positives and a shared pool of negatives.

    All rows must be unit vectors; negatives may be empty, in which case the
    loss is exactly zero.
    """

    anchors: torch.Tensor                       # (M, D)
    positives: torch.Tensor                     # (M, D)
    negatives: torch.Tensor = field(default_factory=lambda: torch.empty(0, 0))
    temperature: float = 0.1


def contrastive_loss(batch: ContrastiveBatch) -> torch.Tensor:
    """Mean over anchors of -log h(a,p) / (h(a,p) + sum_j h(a,n_j)).

    h(u, v) = exp(cos(u, v) / temperature). The positive term is part of the
    denominator, so with no negatives every anchor contributes exactly zero.
    """
    a, p, n = batch.anchors, batch.positives, batch.negatives
    if batch.temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {batch.temperature}")
    if a.shape != p.shape:
        raise ShapeError(f"anchors {tuple(a.shape)} vs positives {tuple(p.shape)}")
    if a.shape[0] < 1:
        raise InputError("need at least one anchor")
    _check_unit_rows(a, "anchors")
    _check_unit_rows(p, "positives")
    tau = batch.temperature
    pos = F.cosine_similarity(a, p, dim=-1) / tau              # (M,)
    if n.numel() == 0:
        logits = pos[:, None]
    else:
        _check_unit_rows(n, "negatives")
        an = F.normalize(a, dim=-1)
        nn_ = F.normalize(n, dim=-1)
        neg = (an @ nn_.T) / tau                               # (M, K)
        logits = torch.cat([pos[:, None], neg], dim=1)
    return (torch.logsumexp(logits, dim=1) - pos).mean()


def batch_contrastive_loss(anchors: torch.Tensor, positives: torch.Tensor,
                           extra_negatives: torch.Tensor | None = None,
                           temperature: float = 0.1) -> torch.Tensor:
    """Dense form of the pixel contrastive loss over one view pair.

    For anchor i the denominator covers its positive plus every other
    positive row (different locations) and the optional extra pool
    (other batch items). Equivalent to a cross-entropy over cosine logits
    with the diagonal as targets.
    """
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    if anchors.shape != positives.shape:
        raise ShapeError(f"anchors {tuple(anchors.shape)} vs positives "
                         f"{tuple(positives.shape)}")
    a = F.normalize(anchors, dim=-1)
    p = F.normalize(positives, dim=-1)
    logits = (a @ p.T) / temperature
    if extra_negatives is not None and extra_negatives.numel() > 0:
        e = F.normalize(extra_negatives, dim=-1)
        logits = torch.cat([logits, (a @ e.T) / temperature], dim=1)
    targets = torch.arange(a.shape[0], device=a.device)
    return F.cross_entropy(logits, targets)


def codebook_loss(usage: torch.Tensor) -> torch.Tensor:
    """Negative-entropy diversity term (1/N) * sum_v p_v * ln p_v.

    Minimized by the uniform distribution; zero entries contribute zero.
    """
    if (usage < 0).any():
        raise InputError("usage histogram has negative entries")
    total = usage.sum().item()
    if abs(total - 1.0) > 1e-6:
        raise InputError(f"usage histogram must sum to 1 +- 1e-6, got {total}")
    n = usage.shape[-1]
    plogp = usage * torch.log(usage.clamp_min(1e-30))
    return plogp.sum() / n


def pretrain_total(contrastive: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """Unweighted sum of the contrastive and codebook terms."""
    return contrastive + codebook


def cosine_distance(x: torch.Tensor, y: torch.Tensor, dim: int = -3) -> torch.Tensor:
    """1 - cosine similarity along dim; pairs with a zero vector score 1."""
    return 1.0 - F.cosine_similarity(x, y, dim=dim, eps=1e-12)


def uncertainty_loss(teacher: torch.Tensor, student_mu: torch.Tensor,
                     logvar: torch.Tensor) -> torch.Tensor:
    """Heteroscedastic regression loss mean_i(0.5*exp(-s_i)*d_i + 0.5*s_i).

    d is the per-pixel cosine distance between teacher and student feature
    vectors (channel dim is dim -3); logvar is broadcastable to the (..., H, W)
    distance grid.
    """
    if teacher.shape != student_mu.shape:
        raise ShapeError(f"teacher {tuple(teacher.shape)} vs student "
                         f"{tuple(student_mu.shape)}")
    d = cosine_distance(teacher, student_mu, dim=-3)
    s = logvar.reshape(d.shape) if logvar.numel() == d.numel() else logvar
    if s.shape != d.shape:
        raise ShapeError(f"logvar shape {tuple(logvar.shape)} does not match "
                         f"distance grid {tuple(d.shape)}")
    return (0.5 * torch.exp(-s) * d + 0.5 * s).mean()


def distill_total(teacher_cross: torch.Tensor, student_mu: torch.Tensor,
                  logvar: torch.Tensor, teacher_same: torch.Tensor,
                  student_mu_same: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    """Uncertainty loss on the cross-time pair plus a weighted same-time
    cosine-distance consistency term."""
    if lam < 0:
        raise ParameterError(f"lambda must be >= 0, got {lam}")
    if teacher_same.shape != student_mu_same.shape:
        raise ShapeError(f"same-time grids disagree: {tuple(teacher_same.shape)} "
                         f"vs {tuple(student_mu_same.shape)}")
    loss = uncertainty_loss(teacher_cross, student_mu, logvar)
    if lam > 0:
        loss = loss + lam * cosine_distance(teacher_same, student_mu_same, dim=-3).mean()
    return loss
