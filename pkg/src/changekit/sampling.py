"""Graph-based superpixel segmentation and per-segment anchor sampling.

Segmentation follows the greedy graph-merge scheme of Felzenszwalb and
Huttenlocher: per-band min-max scaling, optional Gaussian pre-smoothing, an
8-connected grid graph weighted by Euclidean color distance, merges allowed
while the joining edge is no heavier than either component's internal
difference plus scale/|component|, then a final pass merging components
smaller than min_size. Labels are canonicalized by splitting into 4-connected
components and numbering them in raster order of their first pixel, which
makes the output partition stable across runs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import InputError, ParameterError, ShapeError


@dataclass
class SegmentMap:
    labels: np.ndarray  # (H, W) int32, values 0..num_segments-1
    num_segments: int


class _UnionFind:
    __slots__ = ("parent", "size", "internal")

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n
        self.internal = [0.0] * n

    def find(self, x: int) -> int:
        parent = self.parent
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a: int, b: int, weight: float) -> None:
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        self.internal[a] = weight


def _grid_edges(h: int, w: int, img: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """8-connected edge list (a, b, weight); weight = color distance."""
    idx = np.arange(h * w).reshape(h, w)
    chan = img.reshape(img.shape[0], h, w)

    def dist(sl_a, sl_b):
        d = chan[(slice(None),) + sl_a] - chan[(slice(None),) + sl_b]
        return np.sqrt((d * d).sum(axis=0))

    pairs = [
        ((slice(None), slice(None, -1)), (slice(None), slice(1, None))),   # right
        ((slice(None, -1), slice(None)), (slice(1, None), slice(None))),   # down
        ((slice(None, -1), slice(None, -1)), (slice(1, None), slice(1, None))),  # down-right
        ((slice(None, -1), slice(1, None)), (slice(1, None), slice(None, -1))),  # down-left
    ]
    a_list, b_list, w_list = [], [], []
    for sl_a, sl_b in pairs:
        a_list.append(idx[sl_a].ravel())
        b_list.append(idx[sl_b].ravel())
        w_list.append(dist(sl_a, sl_b).ravel())
    return np.concatenate(a_list), np.concatenate(b_list), np.concatenate(w_list)


def felzenszwalb_segment(image: np.ndarray, scale: float = 200.0, sigma: float = 0.5,
                         min_size: int = 16) -> SegmentMap:
    """Segment a (C, H, W) or (H, W) image into superpixels."""
    if scale <= 0:
        raise ParameterError(f"scale must be positive, got {scale}")
    if sigma < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3:
        raise ShapeError(f"expected (C, H, W) image, got shape {image.shape}")
    if not np.isfinite(img).all():
        raise InputError("image contains NaN or Inf")
    _, h, w = img.shape

    # per-band min-max scaling; constant bands contribute zero distance
    lo = img.min(axis=(1, 2), keepdims=True)
    hi = img.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    span[span == 0] = 1.0
    img = (img - lo) / span
    if sigma > 0:
        img = np.stack([gaussian_filter(band, sigma=sigma) for band in img])

    ea, eb, ew = _grid_edges(h, w, img)
    order = np.argsort(ew, kind="stable")
    ea, eb, ew = ea[order].tolist(), eb[order].tolist(), ew[order].tolist()

    uf = _UnionFind(h * w)
    find, size, internal = uf.find, uf.size, uf.internal
    for a, b, wt in zip(ea, eb, ew):
        ra, rb = find(a), find(b)
        if ra == rb:
            continue
        if wt <= min(internal[ra] + scale / size[ra],
                     internal[rb] + scale / size[rb]):
            uf.union(ra, rb, wt)

    if min_size > 1:
        for a, b, wt in zip(ea, eb, ew):
            ra, rb = find(a), find(b)
            if ra != rb and (size[ra] < min_size or size[rb] < min_size):
                uf.union(ra, rb, wt)

    roots = np.fromiter((find(i) for i in range(h * w)), dtype=np.int64, count=h * w)
    labels = _relabel_4connected(roots.reshape(h, w))
    return SegmentMap(labels=labels, num_segments=int(labels.max()) + 1)


def _relabel_4connected(roots: np.ndarray) -> np.ndarray:
    """Split components into 4-connected pieces, numbered in raster order."""
    h, w = roots.shape
    flat = roots.ravel()
    uf = _UnionFind(h * w)
    find = uf.find
    idx = np.arange(h * w).reshape(h, w)
    for sl_a, sl_b in (((slice(None), slice(None, -1)), (slice(None), slice(1, None))),
                       ((slice(None, -1), slice(None)), (slice(1, None), slice(None)))):
        a = idx[sl_a].ravel()
        b = idx[sl_b].ravel()
        same = flat[a] == flat[b]
        for pa, pb in zip(a[same].tolist(), b[same].tolist()):
            ra, rb = find(pa), find(pb)
            if ra != rb:
                uf.union(ra, rb, 0.0)
    out = np.empty(h * w, dtype=np.int32)
    next_label = 0
    assigned: dict[int, int] = {}
    for i in range(h * w):
        r = find(i)
        lab = assigned.get(r)
        if lab is None:
            lab = assigned[r] = next_label
            next_label += 1
        out[i] = lab
    return out.reshape(h, w)


def sample_anchors(seg: SegmentMap, overlap_mask: np.ndarray, per_segment: int = 1,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """One (or per_segment) anchor pixel per superpixel inside the mask.

    Returns an (M, 2) array of (row, col) coordinates. Segments that do not
    intersect the mask contribute nothing.
    """
    if seg.labels.shape != overlap_mask.shape:
        raise ShapeError(f"mask shape {overlap_mask.shape} does not match "
                         f"labels {seg.labels.shape}")
    if not overlap_mask.any():
        raise InputError("overlap mask is empty")
    if per_segment < 1:
        raise ParameterError("per_segment must be >= 1")
    rng = rng or np.random.default_rng()

    rows, cols = np.nonzero(overlap_mask)
    labs = seg.labels[rows, cols]
    order = np.argsort(labs, kind="stable")
    rows, cols, labs = rows[order], cols[order], labs[order]
    boundaries = np.flatnonzero(np.diff(labs)) + 1
    anchors = []
    for chunk in np.split(np.arange(labs.size), boundaries):
        pick = rng.choice(chunk, size=per_segment, replace=chunk.size < per_segment)
        for i in pick:
            anchors.append((int(rows[i]), int(cols[i])))
    return np.asarray(anchors, dtype=np.int64).reshape(-1, 2)


def save_segment_map_pgm(seg: SegmentMap, path) -> None:
    """Dump labels as a binary PGM (P5) image for quick visual inspection.

    Labels are spread over 0..255 so neighboring segments get distinct grays.
    """
    h, w = seg.labels.shape
    if seg.num_segments > 1:
        gray = (seg.labels.astype(np.int64) * 255) // (seg.num_segments - 1)
    else:
        gray = np.zeros((h, w), dtype=np.int64)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(gray.astype(np.uint8).tobytes())


def to_composite3(image: np.ndarray) -> np.ndarray:
    """First three bands, or the single band replicated, as a (3, H, W) array."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[None]
    if img.shape[0] >= 3:
        return img[:3]
    return np.repeat(img[:1], 3, axis=0)
