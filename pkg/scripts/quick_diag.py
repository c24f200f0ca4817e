"""Short-run diagnostics for generator/training tuning."""
import sys
import time

import numpy as np
import torch

import changekit as ck
from changekit.changemap import make_change_product
from changekit.distill import DistillConfig, distill
from changekit.losses import cosine_distance
from changekit.metrics import confusion, scores
from changekit.model import ModelConfig
from changekit.pretrain import PretrainConfig, cosine_margin, pretrain

EPOCHS = int(sys.argv[1]) if len(sys.argv) > 1 else 15
AMP = float(sys.argv[2]) if len(sys.argv) > 2 else 0.15
LR = float(sys.argv[3]) if len(sys.argv) > 3 else 3e-4

data = dict(size=64, bands=4, n_timestamps=6, change_fraction=0.1,
            season_fraction=0.2, season_amplitude=AMP)
scenes = ck.make_scene_set(8, base_seed=0, **data)
held = ck.make_scene_set(2, base_seed=1000, **data)
mcfg = ModelConfig(in_bands=4, feature_dim=16, stem_channels=16,
                   encoder_channels=(32, 64, 128), decoder_channels=(160, 80, 40),
                   seed=0)
cfg = PretrainConfig.desk_scale(epochs=EPOCHS, crop_size=24, seed=0,
                                contrast_unquantized=True, lr=LR)
t0 = time.monotonic()
bundle, logs = pretrain(scenes, cfg, model_cfg=mcfg)
print(f"pretrain({EPOCHS}) {time.monotonic()-t0:.0f}s final c={logs[-1].contrastive:.3f}",
      flush=True)

pos, neg = cosine_margin(bundle, held, crop_size=24, n_pairs=16, seed=99)
print(f"margin gap {pos-neg:.3f} (pos {pos:.3f} neg {neg:.3f})", flush=True)

# teacher cross-time feature distance by pixel class
rng = np.random.default_rng(5)
ratios = []
for s in scenes:
    i, j = rng.choice(6, size=2, replace=False)
    fi = bundle.features(torch.from_numpy(s.timestamps[i][None]).float()).values[0]
    fj = bundle.features(torch.from_numpy(s.timestamps[j][None]).float()).values[0]
    d = cosine_distance(fi, fj, dim=0).numpy()
    d_season = d[s.season_mask].mean()
    d_stable = d[s.stable_mask].mean()
    ratios.append((d_season, d_stable))
ds = np.array(ratios)
print(f"teacher cross-time d: season {ds[:,0].mean():.4f} stable {ds[:,1].mean():.4f} "
      f"ratio {ds[:,0].mean()/ds[:,1].mean():.2f} -> ln = "
      f"{np.log(ds[:,0].mean()/ds[:,1].mean()):.2f}", flush=True)

for method in ("rosin", "otsu"):
    total = None
    for s in scenes:
        prod = make_change_product(bundle, s.pre, s.post, method=method)
        c = confusion(prod.binary, s.change_mask)
        total = c if total is None else total + c
    sc = scores(total)
    print(f"teacher {method}: kappa {sc['kappa']:.3f} pre {sc['precision']:.3f} "
          f"rec {sc['recall']:.3f}", flush=True)

t0 = time.monotonic()
student, dlogs = distill(bundle, scenes, DistillConfig.desk_scale(epochs=EPOCHS, seed=0))
print(f"distill({EPOCHS}) {time.monotonic()-t0:.0f}s "
      f"first {dlogs[0].total:.4f} last {dlogs[-1].total:.4f}", flush=True)
gaps = []
for s in scenes:
    _, logvar = student.features(torch.from_numpy(s.post[None]).float())
    lv = logvar[0, 0].numpy()
    gaps.append(lv[s.season_mask].mean() - lv[s.stable_mask].mean())
print(f"logvar gap mean {np.mean(gaps):.3f} per scene "
      f"{[round(float(g), 2) for g in gaps]}", flush=True)
