"""Gumbel-softmax vector quantization with a straight-through gradient.

Forward pass selects one codebook entry per pixel (argmax of the perturbed
logits); the backward pass uses the gradient of the soft selection
probabilities. In eval mode noise is disabled and selection is a plain argmax
over the logits.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InputError, ParameterError, ShapeError


@dataclass
class QuantizerConfig:
    feature_dim: int = 32
    num_entries: int = 1024
    entry_dim: int | None = None  # None -> feature_dim
    tau: float = 2.0
    noise_enabled: bool = True
    quantize_branches: str = "both"  # "both" | "first-only"
    seed: int = 0

    def validate(self) -> None:
        if self.num_entries < 2:
            raise ConfigError(f"codebook needs >= 2 entries, got {self.num_entries}")
        if self.tau <= 0:
            raise ParameterError(f"temperature must be positive, got {self.tau}")
        if self.quantize_branches not in ("both", "first-only"):
            raise ConfigError(f"quantize_branches must be 'both' or 'first-only', "
                              f"got {self.quantize_branches!r}")


def gumbel_noise(shape, generator: torch.Generator | None = None,
                 dtype=torch.float32, device="cpu") -> torch.Tensor:
    """Standard Gumbel samples n = -log(-log(u)), u ~ Uniform(0, 1)."""
    u = torch.rand(shape, generator=generator, dtype=dtype, device=device)
    return -torch.log(-torch.log(u.clamp_min(1e-20)))


def select_probs(logits: torch.Tensor, tau: float, noise_enabled: bool = True,
                 generator: torch.Generator | None = None) -> torch.Tensor:
    """Selection probabilities softmax((logits + n) / tau) over the last dim.

    n is Gumbel noise when noise_enabled, else zero. Rows sum to 1.
    """
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    if not torch.isfinite(logits).all():
        raise InputError("logits contain NaN or Inf")
    if noise_enabled:
        noise = gumbel_noise(logits.shape, generator=generator,
                             dtype=logits.dtype, device=logits.device)
        logits = logits + noise
    return F.softmax(logits / tau, dim=-1)


def usage_histogram(probs: torch.Tensor) -> torch.Tensor:
    """Mean selection distribution over all pixels; probs is (..., N)."""
    if probs.numel() == 0:
        raise InputError("cannot average an empty probability batch")
    flat = probs.reshape(-1, probs.shape[-1])
    return flat.mean(dim=0)


@dataclass
class QuantizerOutput:
    quantized: torch.Tensor      # (B, D, H, W), hard selection through out_proj
    probs: torch.Tensor          # (B, H, W, N) soft selection probabilities
    hard_index: torch.Tensor     # (B, H, W) long
    usage: torch.Tensor          # (N,) mean of probs over all pixels


class GumbelQuantizer(nn.Module):
    """Codebook lookup driven by a learned logit projection.

    Pipeline per pixel feature z: logits = W_l z; p = softmax((logits + n)/tau);
    entry = codebook[argmax p]; output = W_o entry. Training keeps gradients
    flowing through p (straight-through).
    """

    def __init__(self, cfg: QuantizerConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        entry_dim = cfg.entry_dim or cfg.feature_dim
        self.logit_proj = nn.Conv2d(cfg.feature_dim, cfg.num_entries, 1)
        self.codebook = nn.Parameter(torch.randn(cfg.num_entries, entry_dim)
                                     / entry_dim ** 0.5)
        self.out_proj = nn.Linear(entry_dim, cfg.feature_dim)
        self.tau = cfg.tau

    @property
    def num_entries(self) -> int:
        return self.cfg.num_entries

    def logits(self, z: torch.Tensor) -> torch.Tensor:
        """Per-pixel selection logits, shape (B, H, W, N)."""
        if z.ndim != 4 or z.shape[1] != self.cfg.feature_dim:
            raise ShapeError(f"expected (B, {self.cfg.feature_dim}, H, W) features, "
                             f"got {tuple(z.shape)}")
        return self.logit_proj(z).permute(0, 2, 3, 1).contiguous()

    def quantize_logits(self, logits: torch.Tensor, training: bool,
                        generator: torch.Generator | None = None) -> QuantizerOutput:
        """Quantize from precomputed (..., N) logits (last dim = entries)."""
        noise_on = training and self.cfg.noise_enabled
        probs = select_probs(logits, self.tau, noise_enabled=noise_on,
                             generator=generator)
        hard = probs.argmax(dim=-1)
        hard_entries = self.codebook[hard]           # (..., E) gather
        if training:
            # value is the hard entry, gradient flows through the soft mix
            soft_entries = probs @ self.codebook
            entries = soft_entries + (hard_entries - soft_entries).detach()
        else:
            entries = hard_entries
        quantized = self.out_proj(entries)           # (..., D)
        if quantized.ndim == 4:                      # (B, H, W, D) -> (B, D, H, W)
            quantized = quantized.permute(0, 3, 1, 2)
        return QuantizerOutput(quantized=quantized, probs=probs, hard_index=hard,
                               usage=usage_histogram(probs))

    def forward(self, z: torch.Tensor, training: bool | None = None,
                generator: torch.Generator | None = None) -> QuantizerOutput:
        if not torch.isfinite(z).all():
            raise InputError("features contain NaN or Inf")
        training = self.training if training is None else training
        return self.quantize_logits(self.logits(z), training, generator)


def tau_schedule(epoch: int, total_epochs: int, tau_start: float = 2.0,
                 tau_end: float = 0.5, mode: str = "linear") -> float:
    """Temperature for a given epoch: linear anneal tau_start -> tau_end."""
    if mode == "fixed":
        return tau_start
    if mode != "linear":
        raise ConfigError(f"unknown tau schedule {mode!r}")
    if total_epochs <= 1:
        return tau_start
    t = min(max(epoch / (total_epochs - 1), 0.0), 1.0)
    return tau_start + (tau_end - tau_start) * t


def dump_usage_csv(usage: torch.Tensor, path) -> None:
    """Write (index, mean probability) rows for codebook diagnostics."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "mean_prob"])
        for i, p in enumerate(usage.detach().cpu().tolist()):
            writer.writerow([i, p])
