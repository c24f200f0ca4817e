"""Self-supervised teacher training: shifted views, quantization, InfoNCE.

Each step draws shifted/flipped crop pairs from two timestamps of a scene,
runs both through the shared backbone and quantizer, aligns the overlap, and
pulls together per-pixel features at superpixel anchors while pushing apart
features from other locations and other batch items. The codebook diversity
term is added unweighted by default.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError, TrainingDiverged
from .losses import batch_contrastive_loss, codebook_loss
from .model import ModelConfig, TeacherBundle, build_model
from .quantizer import GumbelQuantizer, QuantizerConfig, tau_schedule
from .sampling import felzenszwalb_segment, sample_anchors, to_composite3
from .views import (align_overlap, overlap_mask_a, overlap_origin_a,
                    pick_timestamps, sample_view_pair)


@dataclass
class PretrainConfig:
    lr: float = 3e-4
    batch_size: int = 100
    epochs: int = 1000
    step_gamma: float = 0.5
    step_every: int | None = None       # None -> 40% of epochs
    seed: int = 0
    crop_size: int = 64
    max_offset: int = 8
    flip: bool = True
    pairs_per_scene: int = 2
    anchors_per_image: int = 128
    negatives_cap: int = 256
    contrast_temperature: float = 0.1
    codebook_weight: float = 1.0        # 0 ablates the diversity term
    contrast_unquantized: bool = False  # add a second term on raw features
    tau_start: float = 2.0
    tau_end: float = 0.5
    tau_mode: str = "linear"            # "linear" | "fixed"
    superpixel_scale: float = 200.0
    superpixel_sigma: float = 0.5
    superpixel_min_size: int = 16
    per_segment: int = 1
    deterministic: bool = True

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.crop_size % 4 != 0:
            raise ConfigError(f"crop_size must be divisible by 4, got {self.crop_size}")

    def resolved_step_every(self) -> int:
        return self.step_every or max(1, round(0.4 * self.epochs))

    @classmethod
    def desk_scale(cls, **overrides) -> "PretrainConfig":
        """Small-budget profile: CPU-sized batches, crops and epoch count."""
        base = dict(batch_size=16, epochs=50, crop_size=32, max_offset=8,
                    pairs_per_scene=4)
        base.update(overrides)
        return cls(**base)


def step_lr(base_lr: float, gamma: float, step_every: int, epoch: int) -> float:
    """Step decay without restarts: lr = base * gamma^(epoch // step_every)."""
    return base_lr * gamma ** (epoch // step_every)


def _pair_features(vp, branch_a: torch.Tensor, branch_b: torch.Tensor,
                   anchors_yx: np.ndarray):
    """Aligned per-anchor feature rows for one view pair."""
    g_a, g_b = align_overlap(branch_a, branch_b, vp)
    oy, ox = overlap_origin_a(vp)
    rows = torch.as_tensor(anchors_yx[:, 0] - oy, dtype=torch.long)
    cols = torch.as_tensor(anchors_yx[:, 1] - ox, dtype=torch.long)
    return g_a[:, rows, cols].T, g_b[:, rows, cols].T  # (M, D) each


def _contrastive_over_pairs(per_pair: list[tuple[torch.Tensor, torch.Tensor]],
                            cap: int, temperature: float,
                            rng: np.random.Generator) -> torch.Tensor:
    """Anchor-weighted mean of the dense loss, negatives pooled across pairs."""
    total = None
    n_anchors = 0
    all_pos = [p for _, p in per_pair]
    for i, (a, p) in enumerate(per_pair):
        m = a.shape[0]
        others = [q for j, q in enumerate(all_pos) if j != i]
        extras = None
        budget = max(0, cap - (m - 1))
        if others and budget > 0:
            pool = torch.cat(others, dim=0)
            if pool.shape[0] > budget:
                keep = rng.choice(pool.shape[0], size=budget, replace=False)
                pool = pool[torch.as_tensor(np.sort(keep), dtype=torch.long)]
            extras = pool
        term = batch_contrastive_loss(a, p, extras, temperature) * m
        total = term if total is None else total + term
        n_anchors += m
    return total / n_anchors


@dataclass
class EpochStats:
    epoch: int
    contrastive: float
    codebook: float
    total: float
    perplexity: float
    lr: float
    tau: float


def write_training_log(path, logs: list[EpochStats]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "contrastive", "codebook", "total",
                         "perplexity", "lr", "tau"])
        for row in logs:
            writer.writerow([row.epoch, f"{row.contrastive:.8f}",
                             f"{row.codebook:.8f}", f"{row.total:.8f}",
                             f"{row.perplexity:.6f}", f"{row.lr:.8g}",
                             f"{row.tau:.6f}"])


def pretrain(scenes, cfg: PretrainConfig,
             model_cfg: ModelConfig | None = None,
             quantizer_cfg: QuantizerConfig | None = None,
             progress=None) -> tuple[TeacherBundle, list[EpochStats]]:
    """Train the teacher; returns the bundle and per-epoch statistics.

    Reproducible given cfg.seed (single-threaded math is forced when
    cfg.deterministic). Raises TrainingDiverged with the offending batch seed
    if a loss goes non-finite.
    """
    cfg.validate()
    if not scenes:
        raise InputError("empty dataset")
    bands = scenes[0].bands
    if any(s.bands != bands for s in scenes):
        raise InputError("scenes disagree on band count")
    if cfg.deterministic:
        torch.set_num_threads(1)

    if model_cfg is None:
        model_cfg = ModelConfig(in_bands=bands, seed=cfg.seed)
    if model_cfg.in_bands != bands:
        raise ConfigError(f"model expects {model_cfg.in_bands} bands, data has {bands}")
    if quantizer_cfg is None:
        quantizer_cfg = QuantizerConfig(feature_dim=model_cfg.feature_dim,
                                        tau=cfg.tau_start, seed=cfg.seed)

    model = build_model(model_cfg)
    quantizer = GumbelQuantizer(quantizer_cfg)
    optimizer = torch.optim.Adam(
        list(model.parameters()) + list(quantizer.parameters()), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    noise_gen = torch.Generator().manual_seed(cfg.seed + 1)

    step_every = cfg.resolved_step_every()
    quantize_both = quantizer_cfg.quantize_branches == "both"
    logs: list[EpochStats] = []

    for epoch in range(cfg.epochs):
        lr = step_lr(cfg.lr, cfg.step_gamma, step_every, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        quantizer.tau = tau_schedule(epoch, cfg.epochs, cfg.tau_start,
                                     cfg.tau_end, cfg.tau_mode)

        schedule = np.repeat(np.arange(len(scenes)), cfg.pairs_per_scene)
        rng.shuffle(schedule)
        sums = {"contrastive": 0.0, "codebook": 0.0, "total": 0.0}
        usage_accum = torch.zeros(quantizer.num_entries)
        n_batches = 0

        for start in range(0, len(schedule), cfg.batch_size):
            chunk = schedule[start:start + cfg.batch_size]
            batch_seed = int(rng.integers(2 ** 31))
            brng = np.random.default_rng(batch_seed)

            pairs = []
            for scene_idx in chunk:
                scene = scenes[int(scene_idx)]
                t1, t2 = pick_timestamps(len(scene.timestamps), brng)
                pairs.append(sample_view_pair(scene.timestamps[t1],
                                              scene.timestamps[t2],
                                              cfg.crop_size, cfg.max_offset,
                                              brng, flip=cfg.flip))

            x1 = torch.from_numpy(np.stack([vp.view_a for vp in pairs])).float()
            x2 = torch.from_numpy(np.stack([vp.view_b for vp in pairs])).float()
            model.train()
            quantizer.train()
            z1, z2 = model(x1), model(x2)
            q1 = quantizer(z1, training=True, generator=noise_gen)
            v1 = F.normalize(q1.quantized, dim=1, eps=1e-12)
            usages = [q1.usage]
            if quantize_both:
                q2 = quantizer(z2, training=True, generator=noise_gen)
                v2 = F.normalize(q2.quantized, dim=1, eps=1e-12)
                usages.append(q2.usage)
            else:
                v2 = F.normalize(z2, dim=1, eps=1e-12)

            per_pair, per_pair_raw = [], []
            for i, vp in enumerate(pairs):
                seg = felzenszwalb_segment(to_composite3(vp.crop_a_unflipped()),
                                           scale=cfg.superpixel_scale,
                                           sigma=cfg.superpixel_sigma,
                                           min_size=cfg.superpixel_min_size)
                anchors_yx = sample_anchors(seg, overlap_mask_a(vp),
                                            per_segment=cfg.per_segment, rng=brng)
                if anchors_yx.shape[0] > cfg.anchors_per_image:
                    keep = brng.choice(anchors_yx.shape[0],
                                       size=cfg.anchors_per_image, replace=False)
                    anchors_yx = anchors_yx[np.sort(keep)]
                per_pair.append(_pair_features(vp, v1[i], v2[i], anchors_yx))
                if cfg.contrast_unquantized:
                    per_pair_raw.append(_pair_features(
                        vp, F.normalize(z1[i], dim=0), F.normalize(z2[i], dim=0),
                        anchors_yx))

            loss_c = _contrastive_over_pairs(per_pair, cfg.negatives_cap,
                                             cfg.contrast_temperature, brng)
            if cfg.contrast_unquantized:
                loss_c = loss_c + _contrastive_over_pairs(
                    per_pair_raw, cfg.negatives_cap, cfg.contrast_temperature, brng)

            usage = torch.stack(usages).mean(dim=0)
            usage = usage / usage.sum()
            loss_d = codebook_loss(usage)
            loss = loss_c + cfg.codebook_weight * loss_d

            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} (batch_seed={batch_seed}): "
                    f"contrastive={loss_c.item()}, codebook={loss_d.item()}")

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            sums["contrastive"] += loss_c.item()
            sums["codebook"] += loss_d.item()
            sums["total"] += loss.item()
            usage_accum += usage.detach()
            n_batches += 1

        mean_usage = usage_accum / n_batches
        entropy = float(-(mean_usage * mean_usage.clamp_min(1e-30).log()).sum())
        logs.append(EpochStats(epoch=epoch,
                               contrastive=sums["contrastive"] / n_batches,
                               codebook=sums["codebook"] / n_batches,
                               total=sums["total"] / n_batches,
                               perplexity=math.exp(entropy), lr=lr,
                               tau=quantizer.tau))
        if progress is not None:
            progress(logs[-1])

    model.eval()
    quantizer.eval()
    return TeacherBundle(model=model, quantizer=quantizer), logs


def cosine_margin(bundle, scenes, crop_size: int = 32, max_offset: int = 8,
                  n_pairs: int = 32, n_points: int = 200, seed: int = 0,
                  source: str = "backbone") -> tuple[float, float]:
    """Direct cosine statistics: mean positive-pair vs mean negative-pair cos.

    Positives are same-location features across two aligned views; negatives
    pair each anchor with a feature from a shuffled location.
    """
    rng = np.random.default_rng(seed)
    pos_vals, neg_vals = [], []
    for k in range(n_pairs):
        scene = scenes[k % len(scenes)]
        t1, t2 = pick_timestamps(len(scene.timestamps), rng)
        vp = sample_view_pair(scene.timestamps[t1], scene.timestamps[t2],
                              crop_size, max_offset, rng)
        f1 = bundle.features(torch.from_numpy(vp.view_a[None]).float(), source=source)
        f2 = bundle.features(torch.from_numpy(vp.view_b[None]).float(), source=source)
        g1, g2 = align_overlap(f1.values[0], f2.values[0], vp)
        hh, ww = g1.shape[-2:]
        rows = rng.integers(0, hh, size=n_points)
        cols = rng.integers(0, ww, size=n_points)
        a = g1[:, torch.as_tensor(rows), torch.as_tensor(cols)].T
        b = g2[:, torch.as_tensor(rows), torch.as_tensor(cols)].T
        pos_vals.append((a * b).sum(dim=1))
        neg_vals.append((a * b.roll(1, dims=0)).sum(dim=1))
    pos = torch.cat(pos_vals).mean().item()
    neg = torch.cat(neg_vals).mean().item()
    return pos, neg
