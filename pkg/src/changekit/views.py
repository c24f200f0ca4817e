"""Shifted-crop view pairs and the reverse transform that aligns features.

A view pair is two same-size crops of a scene, offset by (dy, dx) with a
guaranteed overlap, each optionally flipped. align_overlap inverts the flips
and crops both feature grids to the shared scene region so that pixel (i, j)
of the two outputs refers to the same ground location.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ParameterError, ShapeError


@dataclass(frozen=True)
class Flip:
    horizontal: bool = False  # mirror along width (last axis)
    vertical: bool = False    # mirror along height (second-to-last axis)

    def apply(self, x):
        """Flip the last two axes; applying twice is the identity."""
        axes = []
        if self.vertical:
            axes.append(-2)
        if self.horizontal:
            axes.append(-1)
        if not axes:
            return x
        if isinstance(x, torch.Tensor):
            return torch.flip(x, dims=axes)
        return np.flip(x, axis=tuple(axes)).copy()


@dataclass
class ViewPair:
    view_a: np.ndarray            # (C, S, S), flipped crop fed to branch 1
    view_b: np.ndarray            # (C, S, S), flipped crop fed to branch 2
    offset: tuple[int, int]       # (dy, dx) = origin_b - origin_a
    flip_a: Flip
    flip_b: Flip
    crop_origin_a: tuple[int, int]
    crop_origin_b: tuple[int, int]

    @property
    def crop_size(self) -> int:
        return self.view_a.shape[-1]

    @property
    def overlap_shape(self) -> tuple[int, int]:
        s = self.crop_size
        dy, dx = self.offset
        return s - abs(dy), s - abs(dx)

    def crop_a_unflipped(self) -> np.ndarray:
        return self.flip_a.apply(self.view_a)

    def crop_b_unflipped(self) -> np.ndarray:
        return self.flip_b.apply(self.view_b)


def sample_view_pair(image_a: np.ndarray, image_b: np.ndarray, crop_size: int,
                     max_offset: int, rng: np.random.Generator,
                     flip: bool = True) -> ViewPair:
    """Draw a shifted crop pair from two co-registered images.

    The offset is uniform over [-max_offset, max_offset]^2 and both crops stay
    inside the image bounds; flips are sampled independently per branch.
    """
    if image_a.shape != image_b.shape:
        raise ShapeError(f"scene pair dims disagree: {image_a.shape} vs {image_b.shape}")
    if image_a.ndim != 3:
        raise ShapeError(f"expected (C, H, W) images, got {image_a.shape}")
    _, h, w = image_a.shape
    s = crop_size
    if max_offset < 0:
        raise ParameterError("max_offset must be >= 0")
    if max_offset >= s:
        raise ParameterError(f"max_offset {max_offset} >= crop size {s} "
                             "would allow empty overlaps")
    if h < s + max_offset or w < s + max_offset:
        raise ParameterError(f"scene {h}x{w} too small for crop {s} "
                             f"with max_offset {max_offset}")

    dy = int(rng.integers(-max_offset, max_offset + 1))
    dx = int(rng.integers(-max_offset, max_offset + 1))
    ra = int(rng.integers(max(0, -dy), h - s - max(0, dy) + 1))
    ca = int(rng.integers(max(0, -dx), w - s - max(0, dx) + 1))
    rb, cb = ra + dy, ca + dx

    if flip:
        flip_a = Flip(bool(rng.integers(2)), bool(rng.integers(2)))
        flip_b = Flip(bool(rng.integers(2)), bool(rng.integers(2)))
    else:
        flip_a = flip_b = Flip()

    crop_a = image_a[:, ra:ra + s, ca:ca + s]
    crop_b = image_b[:, rb:rb + s, cb:cb + s]
    return ViewPair(view_a=np.ascontiguousarray(flip_a.apply(crop_a)),
                    view_b=np.ascontiguousarray(flip_b.apply(crop_b)),
                    offset=(dy, dx), flip_a=flip_a, flip_b=flip_b,
                    crop_origin_a=(ra, ca), crop_origin_b=(rb, cb))


def pick_timestamps(n_timestamps: int, rng: np.random.Generator) -> tuple[int, int]:
    """Two distinct timestamp indices when possible, else (0, 0)."""
    if n_timestamps < 2:
        return 0, 0
    i, j = rng.choice(n_timestamps, size=2, replace=False)
    return int(i), int(j)


def _overlap_slices(vp: ViewPair) -> tuple[tuple[slice, slice], tuple[slice, slice]]:
    s = vp.crop_size
    dy, dx = vp.offset
    a_rows = slice(max(0, dy), s + min(0, dy))
    a_cols = slice(max(0, dx), s + min(0, dx))
    b_rows = slice(max(0, -dy), s + min(0, -dy))
    b_cols = slice(max(0, -dx), s + min(0, -dx))
    return (a_rows, a_cols), (b_rows, b_cols)


def align_overlap(f_a, f_b, vp: ViewPair):
    """Crop two view feature grids to their shared scene region.

    f_a and f_b are (..., S, S) arrays or tensors produced from view_a/view_b.
    The branch flips are inverted first, then each grid is cropped so that the
    outputs cover the same ground pixels in the same order.
    """
    s = vp.crop_size
    for name, f in (("f_a", f_a), ("f_b", f_b)):
        if f.shape[-2:] != (s, s):
            raise ShapeError(f"{name} spatial dims {tuple(f.shape[-2:])} "
                             f"do not match crop size {s}")
    (a_rows, a_cols), (b_rows, b_cols) = _overlap_slices(vp)
    g_a = vp.flip_a.apply(f_a)[..., a_rows, a_cols]
    g_b = vp.flip_b.apply(f_b)[..., b_rows, b_cols]
    return g_a, g_b


def overlap_mask_a(vp: ViewPair) -> np.ndarray:
    """Boolean (S, S) mask of the overlap in unflipped view-a coordinates."""
    mask = np.zeros((vp.crop_size, vp.crop_size), dtype=bool)
    (a_rows, a_cols), _ = _overlap_slices(vp)
    mask[a_rows, a_cols] = True
    return mask


def overlap_origin_a(vp: ViewPair) -> tuple[int, int]:
    """Top-left of the overlap in unflipped view-a coordinates."""
    dy, dx = vp.offset
    return max(0, dy), max(0, dx)
