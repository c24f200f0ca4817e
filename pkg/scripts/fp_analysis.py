"""Decompose false positives of the gated student products by pixel class."""
import numpy as np
import torch
from scipy.ndimage import maximum_filter

import changekit as ck
from changekit.changemap import make_change_product
from changekit.metrics import confusion, scores
from changekit.model import load_checkpoint

scenes = ck.make_scene_set(8, base_seed=0, size=64, bands=4, n_timestamps=6,
                           change_fraction=0.1, season_fraction=0.2)
teacher = load_checkpoint("/tmp/gate_models/teacher.pt")
student = load_checkpoint("/tmp/gate_models/student.pt")


def edge_mask(img):
    g = np.zeros(img.shape[1:], dtype=np.float64)
    for band in img:
        gy = np.abs(np.diff(band, axis=0, prepend=band[:1]))
        gx = np.abs(np.diff(band, axis=1, prepend=band[:, :1]))
        g += gy + gx
    edges = g > 0.15
    return maximum_filter(edges, size=3)


for name, bundle in (("teacher", teacher), ("student", student)):
    rows = {}
    for method in ("rosin", "otsu"):
        agg = None
        comp = {"season": 0, "edge": 0, "interior": 0, "total_fp": 0}
        for s in scenes:
            prod = make_change_product(bundle, s.pre, s.post, method=method)
            c = confusion(prod.binary, s.change_mask)
            agg = c if agg is None else agg + c
            fp = prod.binary & ~s.change_mask
            e = edge_mask(s.pre) & s.stable_mask
            comp["season"] += int((fp & s.season_mask).sum())
            comp["edge"] += int((fp & e).sum())
            comp["interior"] += int((fp & s.stable_mask & ~e).sum())
            comp["total_fp"] += int(fp.sum())
        sc = scores(agg)
        rows[method] = (sc, comp)
        print(f"{name} {method}: kappa {sc['kappa']:.3f} pre {sc['precision']:.3f} "
              f"rec {sc['recall']:.3f} | FP season {comp['season']} "
              f"edge {comp['edge']} interior {comp['interior']} "
              f"(total {comp['total_fp']})")

# gated seasonal intensity position vs thresholds
inten_by = {"stable": [], "season": [], "change": []}
ths = []
for s in scenes:
    prod = make_change_product(student, s.pre, s.post, method="rosin")
    ths.append(prod.threshold)
    inten_by["stable"].append(prod.intensity[s.stable_mask])
    inten_by["season"].append(prod.intensity[s.season_mask])
    inten_by["change"].append(prod.intensity[s.change_mask])
print("rosin thresholds per scene:", [round(t, 3) for t in ths])
for k, v in inten_by.items():
    vv = np.concatenate(v)
    q = np.quantile(vv, [0.5, 0.75, 0.9])
    print(f"gated intensity[{k}]: mean {vv.mean():.3f} "
          f"q50/75/90 {q[0]:.3f}/{q[1]:.3f}/{q[2]:.3f}")

# log-variance landscape
svals = {"stable": [], "season": [], "edge": []}
for s in scenes:
    _, logvar = student.features(torch.from_numpy(s.post[None]).float())
    lv = logvar[0, 0].numpy()
    e = edge_mask(s.pre) & s.stable_mask
    svals["stable"].append(lv[s.stable_mask & ~e])
    svals["season"].append(lv[s.season_mask])
    svals["edge"].append(lv[e])
for k, v in svals.items():
    vv = np.concatenate(v)
    print(f"logvar[{k}]: mean {vv.mean():.3f} q50 {np.median(vv):.3f}")
