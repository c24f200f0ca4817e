"""Dry run of the end-to-end synthetic gate; prints every sub-check."""
import sys
import time

import numpy as np
import torch

import changekit as ck
from changekit.changemap import make_change_product
from changekit.distill import DistillConfig, distill
from changekit.metrics import confusion, scores
from changekit.model import ModelConfig
from changekit.pretrain import PretrainConfig, cosine_margin, pretrain

LR = float(sys.argv[1]) if len(sys.argv) > 1 else 3e-4

scenes = ck.make_scene_set(8, base_seed=0, size=64, bands=4, n_timestamps=6,
                           change_fraction=0.1, season_fraction=0.2)
held = ck.make_scene_set(2, base_seed=1000, size=64, bands=4, n_timestamps=6,
                         change_fraction=0.1, season_fraction=0.2)
mcfg = ModelConfig(in_bands=4, feature_dim=16, stem_channels=16,
                   encoder_channels=(32, 64, 128), decoder_channels=(160, 80, 40),
                   seed=0)
cfg = PretrainConfig.desk_scale(epochs=50, crop_size=24, seed=0,
                                contrast_unquantized=True, lr=LR,
                                pairs_per_scene=6, superpixel_scale=20.0)
t0 = time.monotonic()
bundle, logs = pretrain(scenes, cfg, model_cfg=mcfg)
t_pre = time.monotonic() - t0
print(f"pretrain {t_pre:.0f}s  final c={logs[-1].contrastive:.3f} "
      f"d={logs[-1].codebook:+.5f} perp={logs[-1].perplexity:.0f}", flush=True)

for src in ("backbone", "quantized"):
    pos, neg = cosine_margin(bundle, held, crop_size=24, n_pairs=16, seed=99, source=src)
    print(f"margin[{src}]: pos {pos:.3f} neg {neg:.3f} gap {pos-neg:.3f}", flush=True)

# (b) + (d): kappa with rosin vs otsu, aggregated over scenes
agg = {}
for method in ("rosin", "otsu"):
    total = None
    for s in scenes:
        prod = make_change_product(bundle, s.pre, s.post, method=method)
        c = confusion(prod.binary, s.change_mask)
        total = c if total is None else total + c
    agg[method] = scores(total)
    print(f"teacher {method}: kappa {agg[method]['kappa']:.3f} "
          f"pre {agg[method]['precision']:.3f} rec {agg[method]['recall']:.3f}",
          flush=True)

# distill
t0 = time.monotonic()
student, dlogs = distill(bundle, scenes, DistillConfig.desk_scale(seed=0, pairs_per_scene=4, s_head_lr_scale=35.0))
t_dis = time.monotonic() - t0
print(f"distill {t_dis:.0f}s  first total {dlogs[0].total:.4f} "
      f"last total {dlogs[-1].total:.4f} clamp {dlogs[-1].clamped_fraction:.4f}",
      flush=True)

# (c) logvar gap season vs stable
gaps = []
for s in scenes:
    _, logvar = student.features(torch.from_numpy(s.post[None]).float())
    lv = logvar[0, 0].numpy()
    gaps.append(lv[s.season_mask].mean() - lv[s.stable_mask].mean())
print(f"logvar gap per scene: {[round(float(g),3) for g in gaps]}")
print(f"mean gap {np.mean(gaps):.3f}", flush=True)

import os
from changekit.model import save_teacher_checkpoint
from changekit.distill import save_student_checkpoint
os.makedirs("/tmp/gate_models", exist_ok=True)
save_teacher_checkpoint("/tmp/gate_models/teacher.pt", bundle.model, bundle.quantizer)
save_student_checkpoint("/tmp/gate_models/student.pt", student.student)

# (d) on the uncertainty-gated student products
for method in ("rosin", "otsu"):
    total = None
    for s in scenes:
        prod = make_change_product(student, s.pre, s.post, method=method)
        c = confusion(prod.binary, s.change_mask)
        total = c if total is None else total + c
    sc = scores(total)
    print(f"student {method}: kappa {sc['kappa']:.3f} pre {sc['precision']:.3f} "
          f"rec {sc['recall']:.3f}", flush=True)
print(f"TOTAL time {t_pre + t_dis:.0f}s")
