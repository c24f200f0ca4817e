"""Independent oracles and the built-in verification suites.

Everything here deliberately re-derives results by brute force (exhaustive
scans, per-pixel counting, finite differences) rather than calling the
production code paths it checks. The CLI `selftest` subcommand runs all
suites and reports one line per check.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import torch

from . import metrics
from .changemap import otsu_threshold, rosin_threshold
from .losses import (ContrastiveBatch, codebook_loss, contrastive_loss,
                     distill_total, uncertainty_loss)
from .quantizer import GumbelQuantizer, QuantizerConfig, gumbel_noise
from .sampling import felzenszwalb_segment
from .views import Flip, ViewPair, align_overlap


# ---------------------------------------------------------------------------
# threshold oracles

def rosin_bruteforce(counts, edges) -> float:
    """Per-point determinant scan for the unimodal corner, exact arithmetic.

    Normalizes the peak-to-tail span onto the unit square, then measures each
    point's distance to the diagonal with the full point-line determinant.
    Walks candidate bins from the tail toward the peak with a strict
    comparison, which resolves ties toward the larger index by a different
    route than the production scan.
    """
    counts = np.asarray(counts, dtype=np.float64)
    centers = 0.5 * (np.asarray(edges[:-1], dtype=np.float64) + np.asarray(edges[1:]))
    peak = int(np.argmax(counts))
    last = int(np.flatnonzero(counts)[-1])
    if last <= peak:
        return float(edges[peak + 1])
    dx = Fraction(float(centers[last])) - Fraction(float(centers[peak]))
    dy = Fraction(float(counts[last])) - Fraction(float(counts[peak]))
    best_i, best_det = None, None
    for i in range(last, peak - 1, -1):
        if dy != 0:
            # point in unit-square coordinates; line runs (0,0) -> (1,1)
            u = (Fraction(float(centers[i])) - Fraction(float(centers[peak]))) / dx
            v = (Fraction(float(counts[i])) - Fraction(float(counts[peak]))) / dy
            det = abs(u * 1 - v * 1)  # |cross((1,1), (u,v))|
        else:
            det = Fraction(float(counts[peak])) - Fraction(float(counts[i]))
        if best_det is None or det > best_det:
            best_i, best_det = i, det
    return float(centers[best_i])


def otsu_bruteforce(counts, edges) -> float:
    """Per-split class statistics recomputed from scratch, exact arithmetic."""
    counts = np.asarray(counts, dtype=np.float64)
    centers = 0.5 * (np.asarray(edges[:-1], dtype=np.float64) + np.asarray(edges[1:]))
    c = [Fraction(float(v)) for v in counts]
    x = [Fraction(float(v)) for v in centers]
    total = sum(c)
    scores_by_split: list[tuple[int, Fraction]] = []
    for k in range(len(c) - 1):
        n0 = sum(c[: k + 1])
        n1 = sum(c[k + 1:])
        if n0 == 0 or n1 == 0:
            continue
        mu0 = sum(ci * xi for ci, xi in zip(c[: k + 1], x[: k + 1])) / n0
        mu1 = sum(ci * xi for ci, xi in zip(c[k + 1:], x[k + 1:])) / n1
        w0, w1 = n0 / total, n1 / total
        scores_by_split.append((k, w0 * w1 * (mu0 - mu1) ** 2))
    best = max(s for _, s in scores_by_split)
    ties = [k for k, s in scores_by_split if s == best]
    k = ties[(len(ties) - 1) // 2]
    return float(edges[k + 1])


def random_histogram(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random histogram mixing decaying and arbitrary count profiles."""
    bins = int(rng.integers(8, 64))
    lo = rng.uniform(-2.0, 2.0)
    hi = lo + rng.uniform(0.5, 4.0)
    edges = np.linspace(lo, hi, bins + 1)
    if rng.random() < 0.5:
        base = 1000.0 * np.exp(-rng.uniform(0.1, 0.8) * np.arange(bins))
        counts = rng.poisson(base).astype(np.int64)
    else:
        counts = rng.integers(0, 1000, size=bins).astype(np.int64)
    counts[int(rng.integers(0, bins))] += 1  # never empty
    return counts, edges


# ---------------------------------------------------------------------------
# metric oracle

def kappa_bruteforce(pred: np.ndarray, gt: np.ndarray) -> dict[str, float]:
    """Score computation from raw per-pixel label lists (loop-counted)."""
    p = np.asarray(pred).astype(bool).ravel()
    g = np.asarray(gt).astype(bool).ravel()
    agree = tp = pred_pos = gt_pos = 0
    for a, b in zip(p.tolist(), g.tolist()):
        agree += a == b
        tp += a and b
        pred_pos += a
        gt_pos += b
    n = p.size
    po = agree / n
    pe = (pred_pos / n) * (gt_pos / n) + (1 - pred_pos / n) * (1 - gt_pos / n)
    pre = tp / pred_pos if pred_pos else 0.0
    rec = tp / gt_pos if gt_pos else 0.0
    return {
        "precision": pre,
        "recall": rec,
        "accuracy": po,
        "f1": 2 * pre * rec / (pre + rec) if pre + rec > 0 else 0.0,
        "kappa": (po - pe) / (1 - pe) if pe < 1.0 else 0.0,
    }


# ---------------------------------------------------------------------------
# finite differences

def finite_difference_grad(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central-difference gradient of a scalar function of one tensor."""
    flat = x.detach().clone().double().reshape(-1)
    grad = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            f_plus = float(fn(flat.reshape(x.shape)))
            flat[i] = orig - h
            f_minus = float(fn(flat.reshape(x.shape)))
            flat[i] = orig
            grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(x.shape)


def gradient_relative_error(fn, x: torch.Tensor, h: float = 1e-6) -> float:
    """Norm-relative error between autograd and central differences."""
    xv = x.detach().clone().double().requires_grad_(True)
    fn(xv).backward()
    analytic = xv.grad.detach()
    numeric = finite_difference_grad(fn, x, h=h)
    denom = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / denom


# ---------------------------------------------------------------------------
# suites

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def threshold_suite(n: int = 1000, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    rosin_bad = otsu_bad = 0
    otsu_checked = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for _ in range(n):
            counts, edges = random_histogram(rng)
            if rosin_threshold(counts, edges) != rosin_bruteforce(counts, edges):
                rosin_bad += 1
            if np.count_nonzero(counts) >= 2:
                otsu_checked += 1
                if otsu_threshold(counts, edges) != otsu_bruteforce(counts, edges):
                    otsu_bad += 1
    return [
        CheckResult("rosin-vs-oracle", rosin_bad == 0,
                    f"{n - rosin_bad}/{n} histograms exact"),
        CheckResult("otsu-vs-oracle", otsu_bad == 0,
                    f"{otsu_checked - otsu_bad}/{otsu_checked} histograms exact"),
    ]


def metric_suite(n: int = 500, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        h, w = rng.integers(2, 16, size=2)
        pred = rng.random((h, w)) < rng.uniform(0.05, 0.95)
        gt = rng.random((h, w)) < rng.uniform(0.05, 0.95)
        ours = metrics.scores(metrics.confusion(pred, gt))
        ref = kappa_bruteforce(pred, gt)
        worst = max(worst, max(abs(ours[k] - ref[k]) for k in ref))
    fixture = metrics.scores(metrics.Confusion(tp=50, fp=10, fn=20, tn=920))
    fixture_ok = abs(fixture["kappa"] - 0.7533) <= 1e-4
    return [
        CheckResult("metrics-vs-bruteforce", worst <= 1e-12,
                    f"max deviation {worst:.2e} over {n} grids"),
        CheckResult("kappa-worked-fixture", fixture_ok,
                    f"kappa={fixture['kappa']:.6f} (expect 0.7533 +- 1e-4)"),
    ]


def gradient_suite(tol: float = 1e-3, seed: int = 0) -> list[CheckResult]:
    torch.manual_seed(seed)
    results = []

    def unit_rows(m, d):
        v = torch.randn(m, d, dtype=torch.float64)
        return torch.nn.functional.normalize(v, dim=-1)

    anchors, positives, negatives = unit_rows(3, 4), unit_rows(3, 4), unit_rows(5, 4)

    def wrt_anchors(a):
        return contrastive_loss(ContrastiveBatch(
            torch.nn.functional.normalize(a, dim=-1), positives, negatives, 0.5))

    def wrt_negatives(ng):
        return contrastive_loss(ContrastiveBatch(
            anchors, positives, torch.nn.functional.normalize(ng, dim=-1), 0.5))

    err = max(gradient_relative_error(wrt_anchors, anchors),
              gradient_relative_error(wrt_negatives, negatives))
    results.append(CheckResult("contrastive-gradient", err <= tol,
                               f"rel err {err:.2e} (tol {tol})"))

    probs = torch.distributions.Dirichlet(torch.ones(8, dtype=torch.float64)).sample()
    err = gradient_relative_error(lambda p: codebook_loss(p), probs, h=1e-7)
    results.append(CheckResult("codebook-gradient", err <= tol,
                               f"rel err {err:.2e} (tol {tol})"))

    teacher = torch.nn.functional.normalize(torch.randn(4, 4, 4, dtype=torch.float64), dim=0)
    mu0 = torch.randn(4, 4, 4, dtype=torch.float64)
    s0 = torch.randn(4, 4, dtype=torch.float64) * 0.5
    mu_same0 = torch.randn(4, 4, 4, dtype=torch.float64)

    def unc_wrt_mu(mu):
        return uncertainty_loss(teacher, mu, s0)

    def unc_wrt_s(s):
        return uncertainty_loss(teacher, mu0, s)

    err = max(gradient_relative_error(unc_wrt_mu, mu0),
              gradient_relative_error(unc_wrt_s, s0))
    results.append(CheckResult("uncertainty-gradient", err <= tol,
                               f"rel err {err:.2e} (tol {tol})"))

    def distill_wrt_mu_same(mu_same):
        return distill_total(teacher, mu0, s0, teacher, mu_same, lam=1.0)

    def distill_wrt_s(s):
        return distill_total(teacher, mu0, s, teacher, mu_same0, lam=1.0)

    err = max(gradient_relative_error(distill_wrt_mu_same, mu_same0),
              gradient_relative_error(distill_wrt_s, s0))
    results.append(CheckResult("distill-gradient", err <= tol,
                               f"rel err {err:.2e} (tol {tol})"))
    return results


def quantizer_suite(tol: float = 1e-3, seed: int = 0) -> list[CheckResult]:
    results = []
    torch.manual_seed(seed)
    q = GumbelQuantizer(QuantizerConfig(feature_dim=3, num_entries=4, tau=0.7))
    q = q.double()
    readout = torch.randn(5, 3, dtype=torch.float64)
    logits0 = torch.randn(5, 4, dtype=torch.float64)
    noise = gumbel_noise(logits0.shape, generator=torch.Generator().manual_seed(3),
                         dtype=torch.float64)

    def soft_path(logits):
        p = torch.softmax((logits + noise) / q.tau, dim=-1)
        return (q.out_proj(p @ q.codebook) * readout).sum()

    lv = logits0.clone().requires_grad_(True)
    out = q.quantize_logits(lv, training=True,
                            generator=torch.Generator().manual_seed(3))
    (out.quantized * readout).sum().backward()
    numeric = finite_difference_grad(soft_path, logits0)
    denom = max(lv.grad.norm().item(), numeric.norm().item(), 1e-12)
    err = (lv.grad - numeric).norm().item() / denom
    results.append(CheckResult("straight-through-gradient", err <= tol,
                               f"rel err {err:.2e} vs soft-path FD (tol {tol})"))

    z = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    out1 = q(z, training=False)
    out2 = q(z, training=False)
    same = torch.equal(out1.quantized, out2.quantized) and \
        torch.equal(out1.hard_index, out2.hard_index)
    results.append(CheckResult("eval-determinism", same,
                               "eval-mode quantization bitwise repeatable"))

    n = gumbel_noise((100_000,), generator=torch.Generator().manual_seed(7),
                     dtype=torch.float64).numpy()
    from scipy import stats
    ks = stats.kstest(n, stats.gumbel_r.cdf).statistic
    results.append(CheckResult("gumbel-noise-ks", ks < 0.02,
                               f"KS statistic {ks:.4f} at 1e5 samples (tol 0.02)"))
    return results


def equivariance_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    s = 8
    scene = rng.random((2, 24, 24)).astype(np.float32)
    failures = 0
    cases = 0
    for fa_h in (False, True):
        for fa_v in (False, True):
            for fb_h in (False, True):
                for fb_v in (False, True):
                    for dy in (-2, -1, 0, 1, 2):
                        for dx in (-2, -1, 0, 1, 2):
                            fa, fb = Flip(fa_h, fa_v), Flip(fb_h, fb_v)
                            ra, ca = 4, 5
                            rb, cb = ra + dy, ca + dx
                            vp = ViewPair(
                                view_a=fa.apply(scene[:, ra:ra + s, ca:ca + s]),
                                view_b=fb.apply(scene[:, rb:rb + s, cb:cb + s]),
                                offset=(dy, dx), flip_a=fa, flip_b=fb,
                                crop_origin_a=(ra, ca), crop_origin_b=(rb, cb))
                            g_a, g_b = align_overlap(vp.view_a, vp.view_b, vp)
                            cases += 1
                            if not np.array_equal(g_a, g_b):
                                failures += 1
    results = [CheckResult("align-overlap-identity", failures == 0,
                           f"{cases - failures}/{cases} flip/offset cases exact")]

    stable = True
    seg_counts = []
    for img_seed in (1, 2, 3):
        img = np.random.default_rng(img_seed).random((3, 24, 24)).astype(np.float32)
        seg1 = felzenszwalb_segment(img, scale=1.5, sigma=0.4, min_size=4)
        seg2 = felzenszwalb_segment(img, scale=1.5, sigma=0.4, min_size=4)
        stable &= np.array_equal(seg1.labels, seg2.labels)
        stable &= seg1.num_segments > 1
        seg_counts.append(seg1.num_segments)
    results.append(CheckResult("segmentation-stability", bool(stable),
                               f"partitions of {seg_counts} segments identical "
                               f"across repeated runs"))
    return results


def run_selftest(verbose: bool = True) -> tuple[bool, list[CheckResult]]:
    """Run every suite; returns overall pass flag and individual results."""
    results: list[CheckResult] = []
    results.extend(gradient_suite())
    results.extend(threshold_suite())
    results.extend(metric_suite())
    results.extend(quantizer_suite())
    results.extend(equivariance_suite())
    if verbose:
        for r in results:
            print(r.line())
    return all(r.passed for r in results), results
