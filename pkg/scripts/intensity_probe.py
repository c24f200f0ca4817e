"""Inspect class-conditional intensity stats to tune the synthetic gate."""
import sys
import time
import warnings

import numpy as np

import changekit as ck
from changekit.changemap import (intensity_map, make_histogram, otsu_threshold,
                                 rosin_threshold)
from changekit.metrics import confusion, scores
from changekit.model import ModelConfig
from changekit.pretrain import PretrainConfig, cosine_margin, pretrain

EPOCHS = int(sys.argv[1]) if len(sys.argv) > 1 else 25
SP_SCALE = float(sys.argv[2]) if len(sys.argv) > 2 else 200.0
LR = float(sys.argv[3]) if len(sys.argv) > 3 else 3e-4
AMP = float(sys.argv[4]) if len(sys.argv) > 4 else 0.2
PAIRS = int(sys.argv[5]) if len(sys.argv) > 5 else 4
TAU_C = float(sys.argv[6]) if len(sys.argv) > 6 else 0.1

data = dict(size=64, bands=4, n_timestamps=6, change_fraction=0.1,
            season_fraction=0.2, season_amplitude=AMP)
scenes = ck.make_scene_set(8, base_seed=0, **data)
held = ck.make_scene_set(2, base_seed=1000, **data)
mcfg = ModelConfig(in_bands=4, feature_dim=16, stem_channels=16,
                   encoder_channels=(32, 64, 128), decoder_channels=(160, 80, 40),
                   seed=0)
cfg = PretrainConfig.desk_scale(epochs=EPOCHS, crop_size=24, seed=0,
                                contrast_unquantized=True, lr=LR,
                                superpixel_scale=SP_SCALE,
                                pairs_per_scene=PAIRS,
                                contrast_temperature=TAU_C)
t0 = time.monotonic()
bundle, logs = pretrain(scenes, cfg, model_cfg=mcfg)
print(f"pretrain({EPOCHS}, sp={SP_SCALE}, lr={LR}) {time.monotonic()-t0:.0f}s "
      f"final c={logs[-1].contrastive:.3f}", flush=True)
pos, neg = cosine_margin(bundle, held, crop_size=24, n_pairs=16, seed=99)
print(f"margin gap {pos-neg:.3f} (pos {pos:.3f} neg {neg:.3f})", flush=True)

import torch

stable_vals, season_vals, change_vals = [], [], []
agg = {"rosin": None, "otsu": None}
for s in scenes:
    f1 = bundle.features(torch.from_numpy(s.pre[None]).float())
    f2 = bundle.features(torch.from_numpy(s.post[None]).float())
    inten = intensity_map(f1, f2)
    stable_vals.append(inten[s.stable_mask])
    season_vals.append(inten[s.season_mask])
    change_vals.append(inten[s.change_mask])
    counts, edges = make_histogram(inten)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        th_r = rosin_threshold(counts, edges)
        th_o = otsu_threshold(counts, edges)
    print(f"  scene {s.seed}: rosin {th_r:.3f} otsu {th_o:.3f}", flush=True)
    for name, th in (("rosin", th_r), ("otsu", th_o)):
        c = confusion(inten > th, s.change_mask)
        agg[name] = c if agg[name] is None else agg[name] + c

for name, vals in (("stable", stable_vals), ("season", season_vals),
                   ("change", change_vals)):
    v = np.concatenate(vals)
    q = np.quantile(v, [0.1, 0.5, 0.9])
    print(f"intensity[{name}]: mean {v.mean():.3f} q10/50/90 "
          f"{q[0]:.3f}/{q[1]:.3f}/{q[2]:.3f}", flush=True)
for name in ("rosin", "otsu"):
    sc = scores(agg[name])
    print(f"{name}: kappa {sc['kappa']:.3f} pre {sc['precision']:.3f} "
          f"rec {sc['recall']:.3f}", flush=True)
