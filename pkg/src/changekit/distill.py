"""Teacher-student training that adds a per-pixel log-variance head.

The frozen teacher supplies bi-temporal feature targets; the student sees one
acquisition and predicts both the feature vector and its log-variance. The
cross-time regression term lets the log-variance absorb irreducible temporal
flicker (seasonal pixels), while a same-time consistency term keeps the
student anchored to the teacher.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InputError, TrainingDiverged
from .losses import cosine_distance, uncertainty_loss
from .model import (CHECKPOINT_VERSION, FeatureMap, ModelConfig, ResUnet,
                    TeacherBundle, _cfg_to_dict, normalize_pixels)
from .pretrain import step_lr

LOGVAR_CLAMP = 10.0


class StudentNet(nn.Module):
    """ResUnet trunk with a feature head (shared topology with the teacher)
    and a 1-channel log-variance head, clamped to [-10, 10]."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.backbone = ResUnet(cfg)
        self.s_head = nn.Conv2d(cfg.decoder_channels[2], 1, 1)
        nn.init.zeros_(self.s_head.weight)
        nn.init.zeros_(self.s_head.bias)

    @property
    def cfg(self) -> ModelConfig:
        return self.backbone.cfg

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        trunk = self.backbone.forward_trunk(x)
        mu = self.backbone.head(trunk)
        logvar = self.s_head(trunk).clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)
        return mu, logvar

    def raw_logvar(self, x: torch.Tensor) -> torch.Tensor:
        """Pre-clamp log-variance, for clamp-saturation diagnostics."""
        return self.s_head(self.backbone.forward_trunk(x))

    def init_from_teacher(self, teacher_model: ResUnet) -> None:
        """Copy every backbone weight (including the feature head)."""
        def topology(cfg: ModelConfig):
            return (cfg.in_bands, cfg.feature_dim, cfg.stem_channels,
                    tuple(cfg.encoder_channels), tuple(cfg.decoder_channels))

        if topology(teacher_model.cfg) != topology(self.backbone.cfg):
            raise ConfigError(f"student topology {self.backbone.cfg} does not "
                              f"match teacher {teacher_model.cfg}")
        self.backbone.load_state_dict(teacher_model.state_dict())


@dataclass
class StudentBundle:
    student: StudentNet
    kind: str = "student"

    @property
    def model_cfg(self) -> ModelConfig:
        return self.student.cfg

    def features(self, images: torch.Tensor) -> tuple[FeatureMap, torch.Tensor]:
        """Normalized feature map and (B, 1, H, W) log-variance grid."""
        self.student.eval()
        with torch.no_grad():
            mu, logvar = self.student(images)
        return normalize_pixels(mu), logvar


def save_student_checkpoint(path, student: StudentNet) -> None:
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "kind": "student",
        "model_cfg": _cfg_to_dict(student.cfg),
        "student_state": student.state_dict(),
    }, path)


@dataclass
class DistillConfig:
    lr: float = 5e-4
    epochs: int = 1000
    batch_size: int = 10
    lam: float = 1.0
    init_from_teacher: bool = True
    seed: int = 0
    step_gamma: float = 0.5
    step_every: int | None = None
    pairs_per_scene: int = 1        # timestamp pairs drawn per scene per epoch
    s_head_lr_scale: float = 1.0    # extra lr on the fresh log-variance head
    deterministic: bool = True

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.s_head_lr_scale <= 0:
            raise ConfigError("s_head_lr_scale must be positive")

    def resolved_step_every(self) -> int:
        return self.step_every or max(1, round(0.4 * self.epochs))

    @classmethod
    def desk_scale(cls, **overrides) -> "DistillConfig":
        """Small-budget profile; the s-head gets a faster schedule because it
        starts from scratch while the trunk is already converged."""
        base = dict(epochs=50, batch_size=10, pairs_per_scene=3,
                    s_head_lr_scale=25.0)
        base.update(overrides)
        return cls(**base)


@dataclass
class DistillEpochStats:
    epoch: int
    uncertainty: float
    same_time: float
    total: float
    mean_logvar: float
    clamped_fraction: float
    lr: float


def write_distill_log(path, logs: list[DistillEpochStats]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "uncertainty", "same_time", "total",
                         "mean_logvar", "clamped_fraction", "lr"])
        for row in logs:
            writer.writerow([row.epoch, f"{row.uncertainty:.8f}",
                             f"{row.same_time:.8f}", f"{row.total:.8f}",
                             f"{row.mean_logvar:.6f}",
                             f"{row.clamped_fraction:.6f}", f"{row.lr:.8g}"])


def distill(teacher: TeacherBundle, scenes, cfg: DistillConfig,
            progress=None) -> tuple[StudentBundle, list[DistillEpochStats]]:
    """Train a student against a frozen teacher on bi-temporal scenes.

    Each batch samples two distinct timestamps per scene; which of the two
    feeds the student alternates batch to batch. The teacher is only read,
    never written.
    """
    cfg.validate()
    if not scenes:
        raise InputError("empty dataset")
    if any(len(s.timestamps) < 2 for s in scenes):
        raise InputError("distillation needs bi-temporal scenes "
                         "(a scene is missing its second timestamp)")
    if cfg.deterministic:
        torch.set_num_threads(1)

    teacher_model = teacher.model
    teacher_model.eval()

    torch.manual_seed(cfg.seed)
    student = StudentNet(teacher.model_cfg)
    if cfg.init_from_teacher:
        student.init_from_teacher(teacher_model)

    optimizer = torch.optim.Adam([
        {"params": student.backbone.parameters(), "lr_scale": 1.0},
        {"params": student.s_head.parameters(), "lr_scale": cfg.s_head_lr_scale},
    ], lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    step_every = cfg.resolved_step_every()
    logs: list[DistillEpochStats] = []
    global_batch = 0

    for epoch in range(cfg.epochs):
        lr = step_lr(cfg.lr, cfg.step_gamma, step_every, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr * group["lr_scale"]

        order = np.repeat(np.arange(len(scenes)), cfg.pairs_per_scene)
        rng.shuffle(order)
        sums = {"uncertainty": 0.0, "same_time": 0.0, "total": 0.0,
                "mean_s": 0.0, "clamped": 0.0}
        n_batches = 0

        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            batch_seed = int(rng.integers(2 ** 31))
            brng = np.random.default_rng(batch_seed)

            imgs_m, imgs_n = [], []
            for scene_idx in chunk:
                scene = scenes[int(scene_idx)]
                ti, tj = brng.choice(len(scene.timestamps), size=2, replace=False)
                # alternate which acquisition the student sees
                if global_batch % 2 == 1:
                    ti, tj = tj, ti
                imgs_m.append(scene.timestamps[int(ti)])
                imgs_n.append(scene.timestamps[int(tj)])
            x_m = torch.from_numpy(np.stack(imgs_m)).float()
            x_n = torch.from_numpy(np.stack(imgs_n)).float()

            with torch.no_grad():
                y_m = F.normalize(teacher_model(x_m), dim=1, eps=1e-12)

            student.train()
            mu_n, logvar = student(x_n)
            mu_m, _ = student(x_m)
            mu_n = F.normalize(mu_n, dim=1, eps=1e-12)
            mu_m = F.normalize(mu_m, dim=1, eps=1e-12)

            loss_u = uncertainty_loss(y_m, mu_n, logvar.squeeze(1))
            loss_same = cosine_distance(y_m, mu_m, dim=1).mean()
            loss = loss_u + cfg.lam * loss_same

            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} (batch_seed={batch_seed}): "
                    f"uncertainty={loss_u.item()}, same_time={loss_same.item()}")

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            global_batch += 1

            with torch.no_grad():
                # post-clamp values sit exactly at the limit iff the clamp bound
                clamped = (logvar.abs() >= LOGVAR_CLAMP).float().mean()
            sums["uncertainty"] += loss_u.item()
            sums["same_time"] += loss_same.item()
            sums["total"] += loss.item()
            sums["mean_s"] += logvar.mean().item()
            sums["clamped"] += clamped.item()
            n_batches += 1

        logs.append(DistillEpochStats(
            epoch=epoch,
            uncertainty=sums["uncertainty"] / n_batches,
            same_time=sums["same_time"] / n_batches,
            total=sums["total"] / n_batches,
            mean_logvar=sums["mean_s"] / n_batches,
            clamped_fraction=sums["clamped"] / n_batches,
            lr=lr))
        if progress is not None:
            progress(logs[-1])

    student.eval()
    return StudentBundle(student=student), logs
