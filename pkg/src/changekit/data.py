"""Synthetic multi-temporal scenes with ground truth, and raster file I/O.

Images are numpy arrays of shape (bands, H, W), float32, values in [0, 1].
The native raster container is a little-endian binary format:

    bytes 0..3   magic b"CKRS"
    byte  4..7   format version (uint32)
    byte  8      dtype code (uint8): 0=float32 1=float64 2=uint8 3=uint16 4=int32
    bytes 9..20  bands, height, width (uint32 each)
    bytes 21..   raw array data, C order, little-endian

Round trips through save_raster/load_raster are bit-exact.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import InputError, ParameterError, ShapeError

RASTER_MAGIC = b"CKRS"
RASTER_VERSION = 1

_DTYPE_CODES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("u1"),
    3: np.dtype("<u2"),
    4: np.dtype("<i4"),
}
_CODE_FOR_DTYPE = {v: k for k, v in _DTYPE_CODES.items()}


def save_raster(img: np.ndarray, path) -> None:
    """Write a (bands, H, W) array to the native container."""
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"raster must be (bands, H, W), got shape {arr.shape}")
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _CODE_FOR_DTYPE:
        raise InputError(f"unsupported raster dtype {arr.dtype}")
    c, h, w = arr.shape
    header = RASTER_MAGIC + struct.pack("<IBIII", RASTER_VERSION, _CODE_FOR_DTYPE[dt], c, h, w)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def load_raster(path) -> np.ndarray:
    """Read a native container written by save_raster."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != RASTER_MAGIC:
        raise InputError(f"{path}: not a changekit raster (bad magic)")
    version, code, c, h, w = struct.unpack("<IBIII", blob[4:21])
    if version != RASTER_VERSION:
        raise InputError(f"{path}: unsupported raster version {version}")
    if code not in _DTYPE_CODES:
        raise InputError(f"{path}: unknown dtype code {code}")
    dt = _DTYPE_CODES[code]
    expected = c * h * w * dt.itemsize
    payload = blob[21:]
    if len(payload) != expected:
        raise InputError(f"{path}: payload size {len(payload)} != expected {expected}")
    return np.frombuffer(payload, dtype=dt).reshape(c, h, w).copy()


def load_raster_pair(path_a, path_b) -> tuple[np.ndarray, np.ndarray]:
    """Load two rasters that must share band count and spatial dims."""
    a, b = load_raster(path_a), load_raster(path_b)
    if a.shape != b.shape:
        raise ShapeError(f"paired rasters disagree: {a.shape} vs {b.shape}")
    return a, b


def load_geotiff(path, scale: bool = True) -> np.ndarray:
    """Import a GeoTIFF as (bands, H, W) float32.

    Integer data is scaled to [0, 1] by dividing each band by its own maximum
    (bands that are all zero are left at zero). No reprojection is performed.
    Requires the optional tifffile dependency.
    """
    try:
        import tifffile
    except ImportError as exc:  # pragma: no cover - environment dependent
        raise InputError("GeoTIFF import requires the 'tifffile' package "
                         "(pip install changekit[geotiff])") from exc
    arr = tifffile.imread(str(path))
    if arr.ndim == 2:
        arr = arr[None]
    elif arr.ndim == 3 and arr.shape[0] > arr.shape[2]:
        # heuristics: (H, W, bands) layout
        arr = np.moveaxis(arr, -1, 0)
    elif arr.ndim != 3:
        raise InputError(f"{path}: unsupported GeoTIFF layout {arr.shape}")
    out = arr.astype(np.float32)
    if scale and np.issubdtype(arr.dtype, np.integer):
        for b in range(out.shape[0]):
            m = out[b].max()
            if m > 0:
                out[b] /= m
    return out


@dataclass
class SyntheticScene:
    """Multi-temporal scene with change and seasonal-flicker ground truth."""

    timestamps: list[np.ndarray]
    change_mask: np.ndarray
    season_mask: np.ndarray
    seed: int
    pre_index: int = 0
    post_index: int = -1

    @property
    def bands(self) -> int:
        return self.timestamps[0].shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.timestamps[0].shape[1:]

    @property
    def pre(self) -> np.ndarray:
        return self.timestamps[self.pre_index]

    @property
    def post(self) -> np.ndarray:
        return self.timestamps[self.post_index]

    @property
    def stable_mask(self) -> np.ndarray:
        return ~(self.change_mask | self.season_mask)


def _blob_labels(rng: np.random.Generator, size: int, fraction: float,
                 forbidden: np.ndarray | None) -> np.ndarray:
    """Accumulate random ellipses until coverage reaches fraction of the image.

    Returns an int label grid (0 = background, 1..K = blob id). Individual
    blobs are capped at 15% of the target area so the final coverage
    overshoots by at most that much.
    """
    labels = np.zeros((size, size), dtype=np.int32)
    target = fraction * size * size
    if target < 1.0:
        return labels
    yy, xx = np.mgrid[0:size, 0:size]
    cap = max(4.0, 0.35 * target)
    r_hi = max(2.0, math.sqrt(cap / math.pi))
    next_id = 1
    for _ in range(10_000):
        if (labels > 0).sum() >= target:
            break
        cy, cx = rng.uniform(0, size, 2)
        ry = rng.uniform(1.5, r_hi)
        rx = rng.uniform(1.5, r_hi)
        theta = rng.uniform(0, math.pi)
        ct, st = math.cos(theta), math.sin(theta)
        u = (xx - cx) * ct + (yy - cy) * st
        v = -(xx - cx) * st + (yy - cy) * ct
        blob = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        if forbidden is not None:
            blob &= ~forbidden
        blob &= labels == 0
        if blob.any():
            covered = int((labels > 0).sum())
            excess = covered + int(blob.sum()) - int(round(target))
            if excess > 0:
                # trim the final blob (reverse raster order) to hit the target
                keep = np.flatnonzero(blob.ravel())[:int(blob.sum()) - excess]
                blob = np.zeros(size * size, dtype=bool)
                blob[keep] = True
                blob = blob.reshape(size, size)
            if blob.any():
                labels[blob] = next_id
                next_id += 1
    return labels


def synth_scene(seed: int, size: int = 64, bands: int = 4, n_timestamps: int = 6,
                change_fraction: float = 0.1, season_fraction: float = 0.2,
                season_amplitude: float = 0.2, noise_sigma: float = 0.005,
                impulse_fraction: float = 0.012) -> SyntheticScene:
    """Generate a reproducible multi-temporal scene.

    Base land cover is built from smoothed random blobs of a few spectral
    materials. Seasonal regions are a dedicated cover class (recognizable from
    a single frame, like cropland) whose radiometry swings sinusoidally across
    timestamps. Change is inserted as new-material polygons that appear at the
    midpoint timestamp and persist. Each acquisition also carries transient
    impulse artifacts (impulse_fraction of its pixels replaced by random
    radiometry, like speckle or misregistration glints) plus Gaussian sensor
    noise.
    """
    if size % 4 != 0:
        raise ParameterError(f"size must be divisible by 4, got {size}")
    if not (0.0 <= change_fraction <= 1.0 and 0.0 <= season_fraction <= 1.0):
        raise ParameterError("fractions must lie in [0, 1]")
    if change_fraction + season_fraction > 1.0:
        raise ParameterError("change_fraction + season_fraction must not exceed 1")
    if n_timestamps < 1:
        raise ParameterError("n_timestamps must be >= 1")

    rng = np.random.default_rng(seed)
    n_materials = 7
    spectra = rng.uniform(0.2, 0.8, size=(n_materials, bands)).astype(np.float32)

    fieldmap = gaussian_filter(rng.normal(size=(size, size)), sigma=size / 5.5)
    edges = np.quantile(fieldmap, np.linspace(0, 1, n_materials + 1)[1:-1])
    labels = np.digitize(fieldmap, edges)
    base = spectra[labels].transpose(2, 0, 1)  # (bands, H, W)

    albedo = 1.0 + 0.08 * gaussian_filter(rng.normal(size=(size, size)), sigma=2.0)
    base = base * albedo[None].astype(np.float32)

    change_labels = _blob_labels(rng, size, change_fraction, forbidden=None)
    change_mask = change_labels > 0
    season_mask = _blob_labels(rng, size, season_fraction, forbidden=change_mask) > 0

    # Seasonal cover gets its own spectrum so a single frame identifies it.
    season_spec = rng.uniform(0.35, 0.65, size=bands).astype(np.float32)
    if season_mask.any():
        base[:, season_mask] = season_spec[:, None] * albedo[None][:, season_mask]

    # Replacement materials, one per change polygon, blended per pixel with a
    # smooth partial-change field: transition strengths form a continuum (from
    # mixed pixels up to full replacement) rather than one homogeneous mode.
    n_blobs = int(change_labels.max())
    blend = gaussian_filter(rng.random((size, size)), sigma=2.0)
    blend = (blend - blend.min()) / max(blend.max() - blend.min(), 1e-9)
    blend = (0.12 + 0.88 * blend).astype(np.float32)
    change_values = np.zeros((bands, size, size), dtype=np.float32)
    for blob_id in range(1, n_blobs + 1):
        blob = change_labels == blob_id
        local = base[:, blob].mean(axis=1)
        magnitude = rng.uniform(0.35, 0.7, size=bands)
        offs = np.where(local > 0.5, -1.0, 1.0) * magnitude
        target = np.clip(local + offs, 0.0, 1.0).astype(np.float32)[:, None]
        change_values[:, blob] = ((1.0 - blend[blob]) * base[:, blob]
                                  + blend[blob] * target)

    # Seasonal swing is mostly a brightness scaling (a nuisance that per-pixel
    # feature direction should shrug off) plus a small spectral tilt that
    # keeps the flicker observable in feature space. The phase puts the first
    # and last acquisitions at the same point of the cycle, mirroring the
    # same-season pre/post pairs used for real change evaluation; the
    # in-between timestamps carry the full flicker.
    if n_timestamps >= 3:
        phase = math.pi / 2 - math.pi * (n_timestamps - 1) / n_timestamps
    else:
        phase = math.pi / 2
    tilt = rng.uniform(-1.0, 1.0, size=bands).astype(np.float32)
    tilt *= 0.25 * season_amplitude / max(np.abs(tilt).max(), 1e-6)
    onset = max(1, (n_timestamps + 1) // 2) if n_timestamps > 1 else 1

    # light sensor PSF on the static cover softens material borders so their
    # features stop amplifying frame noise; change edges stay crisp
    base = np.stack([gaussian_filter(band, sigma=0.6) for band in base])

    frames: list[np.ndarray] = []
    for t in range(n_timestamps):
        img = base.copy()
        if t >= onset and change_mask.any():
            img[:, change_mask] = change_values[:, change_mask]
        if season_mask.any() and n_timestamps > 1:
            swing = math.sin(2.0 * math.pi * t / n_timestamps + phase)
            img[:, season_mask] *= 1.0 + season_amplitude * swing
            img[:, season_mask] += swing * tilt[:, None]
        if impulse_fraction > 0:
            # 2x2 glints: large enough to survive convolutional smoothing
            n_blocks = max(1, round(impulse_fraction * size * size / 4))
            rr = rng.integers(0, size - 1, size=n_blocks)
            cc = rng.integers(0, size - 1, size=n_blocks)
            glints = rng.uniform(0.0, 1.0, size=(n_blocks, bands)).astype(np.float32)
            for r, c, g in zip(rr, cc, glints):
                img[:, r:r + 2, c:c + 2] = g[:, None, None]
        img += rng.normal(0.0, noise_sigma, size=img.shape).astype(np.float32)
        frames.append(np.clip(img, 0.0, 1.0).astype(np.float32))

    scene = SyntheticScene(timestamps=frames, change_mask=change_mask,
                           season_mask=season_mask, seed=seed,
                           pre_index=0, post_index=n_timestamps - 1)
    _check_scene(scene)
    return scene


def _check_scene(scene: SyntheticScene) -> None:
    """Generator self-checks: flicker variance dominates, change persists."""
    if len(scene.timestamps) < 2:
        return
    stack = np.stack(scene.timestamps)  # (T, C, H, W)
    var = stack.var(axis=0).mean(axis=0)  # (H, W)
    if scene.season_mask.any() and scene.stable_mask.any():
        assert var[scene.season_mask].mean() > var[scene.stable_mask].mean(), \
            "seasonal pixels must vary more than stable pixels"
    if scene.change_mask.any():
        onset = max(1, (len(scene.timestamps) + 1) // 2)
        pre = scene.timestamps[0]
        for t in range(onset, len(scene.timestamps)):
            diff = np.abs(scene.timestamps[t][:, scene.change_mask] - pre[:, scene.change_mask])
            assert diff.max(axis=0).mean() > 0.1, "planted change must persist"


def make_scene_set(n_scenes: int, base_seed: int = 0, **kwargs) -> list[SyntheticScene]:
    """Generate n_scenes scenes with seeds base_seed, base_seed+1, ..."""
    return [synth_scene(base_seed + i, **kwargs) for i in range(n_scenes)]


def save_scene(scene: SyntheticScene, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for t, img in enumerate(scene.timestamps):
        save_raster(img, d / f"t{t:03d}.ckr")
    save_raster(scene.change_mask, d / "change_mask.ckr")
    save_raster(scene.season_mask, d / "season_mask.ckr")
    meta = {
        "seed": scene.seed,
        "n_timestamps": len(scene.timestamps),
        "pre_index": scene.pre_index,
        "post_index": scene.post_index,
    }
    (d / "scene.json").write_text(json.dumps(meta, indent=2))


def load_scene(directory) -> SyntheticScene:
    d = Path(directory)
    meta = json.loads((d / "scene.json").read_text())
    frames = [load_raster(d / f"t{t:03d}.ckr") for t in range(meta["n_timestamps"])]
    return SyntheticScene(
        timestamps=frames,
        change_mask=load_raster(d / "change_mask.ckr")[0].astype(bool),
        season_mask=load_raster(d / "season_mask.ckr")[0].astype(bool),
        seed=meta["seed"],
        pre_index=meta["pre_index"],
        post_index=meta["post_index"],
    )


def save_scene_set(scenes: list[SyntheticScene], root) -> None:
    root = Path(root)
    for i, scene in enumerate(scenes):
        save_scene(scene, root / f"scene_{i:03d}")


def load_scene_set(root) -> list[SyntheticScene]:
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "scene.json").exists())
    if not dirs:
        raise InputError(f"no scenes found under {root}")
    return [load_scene(p) for p in dirs]
