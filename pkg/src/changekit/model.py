"""Siamese ResUnet backbone: residual encoder, skip-connected decoder, 1x1 head.

The same module is applied to both temporal branches (shared weights). All
convolutions are same-padded; the two stride-2 residual units are the only
downsampling stages, so inputs must have H and W divisible by 4.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InputError, ShapeError

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    in_bands: int = 13
    feature_dim: int = 32
    stem_channels: int = 32
    encoder_channels: tuple[int, int, int] = (64, 128, 256)
    decoder_channels: tuple[int, int, int] = (320, 160, 80)
    seed: int = 0

    def validate(self) -> None:
        if self.in_bands < 1:
            raise ConfigError(f"in_bands must be >= 1, got {self.in_bands}")
        if self.feature_dim < 2:
            raise ConfigError(f"feature_dim must be >= 2, got {self.feature_dim}")
        if len(self.encoder_channels) != 3:
            raise ConfigError("encoder_channels must list exactly 3 widths "
                              f"(one per residual unit), got {self.encoder_channels}")
        if len(self.decoder_channels) != 3:
            raise ConfigError(f"decoder_channels must list exactly 3 widths, "
                              f"got {self.decoder_channels}")
        if self.stem_channels < 1 or min(self.encoder_channels) < 1 \
                or min(self.decoder_channels) < 1:
            raise ConfigError("channel widths must be positive")


class ResidualUnit(nn.Module):
    """Pre-activation residual unit: out = relu(shortcut(x) + F(x)).

    F is two BN-ReLU-Conv blocks; the shortcut is Conv-BN (1x1, matching
    stride) so channel/stride changes stay identity-like. Zeroing F's final
    convolution makes the unit return relu(shortcut(x)) exactly.
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1)
        self.shortcut_conv = nn.Conv2d(in_ch, out_ch, 1, stride=stride)
        self.shortcut_bn = nn.BatchNorm2d(out_ch)

    def residual(self, x: torch.Tensor) -> torch.Tensor:
        out = self.conv1(F.relu(self.bn1(x)))
        out = self.conv2(F.relu(self.bn2(out)))
        return out

    def shortcut(self, x: torch.Tensor) -> torch.Tensor:
        return self.shortcut_bn(self.shortcut_conv(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.shortcut(x) + self.residual(x))


class _DecoderBlock(nn.Module):
    """Nearest upsample (factor 1 or 2), concat encoder skip, two Conv-BN-ReLU."""

    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, up: int):
        super().__init__()
        self.up = up
        self.conv1 = nn.Conv2d(in_ch + skip_ch, out_ch, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(out_ch)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        if self.up > 1:
            x = F.interpolate(x, scale_factor=self.up, mode="nearest")
        x = torch.cat([x, skip], dim=1)
        x = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(x)))


class ResUnet(nn.Module):
    """Same-padded ResUnet emitting a (B, feature_dim, H, W) pixel feature grid."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        stem, (e1, e2, e3) = cfg.stem_channels, tuple(cfg.encoder_channels)
        d1, d2, d3 = tuple(cfg.decoder_channels)
        self.stem_conv = nn.Conv2d(cfg.in_bands, stem, 3, padding=1)
        self.stem_bn = nn.BatchNorm2d(stem)
        self.stem_pool = nn.MaxPool2d(kernel_size=2, stride=1)
        self.ru1 = ResidualUnit(stem, e1, stride=1)
        self.ru2 = ResidualUnit(e1, e2, stride=2)
        self.ru3 = ResidualUnit(e2, e3, stride=2)
        self.dec1 = _DecoderBlock(e3, e2, d1, up=2)
        self.dec2 = _DecoderBlock(d1, e1, d2, up=2)
        self.dec3 = _DecoderBlock(d2, stem, d3, up=1)
        self.head = nn.Conv2d(d3, cfg.feature_dim, 1)

    def stem(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.stem_bn(self.stem_conv(x)))
        # same-padded 2x2 max pool: replicate-pad right/bottom, stride 1
        return self.stem_pool(F.pad(x, (0, 1, 0, 1), mode="replicate"))

    def _check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4:
            raise ShapeError(f"expected (B, C, H, W) input, got shape {tuple(x.shape)}")
        b, c, h, w = x.shape
        if c != self.cfg.in_bands:
            raise ShapeError(f"expected {self.cfg.in_bands} input bands, got {c}")
        if h % 4 != 0 or w % 4 != 0:
            raise ShapeError(f"H and W must be divisible by 4, got {h}x{w}")
        if not torch.isfinite(x).all():
            raise InputError("input contains NaN or Inf")

    def forward_trunk(self, x: torch.Tensor) -> torch.Tensor:
        """Run everything up to (not including) the 1x1 feature head."""
        self._check_input(x)
        s = self.stem(x)
        r1 = self.ru1(s)
        r2 = self.ru2(r1)
        r3 = self.ru3(r2)
        d = self.dec1(r3, r2)
        d = self.dec2(d, r1)
        return self.dec3(d, s)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.forward_trunk(x))


def build_model(cfg: ModelConfig | None = None) -> ResUnet:
    """Construct a ResUnet with deterministic initialization from cfg.seed.

    Seeds the global torch RNG before constructing layers, so two builds from
    the same config are bitwise identical.
    """
    cfg = cfg or ModelConfig()
    cfg.validate()
    torch.manual_seed(cfg.seed)
    return ResUnet(cfg)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


@dataclass
class FeatureMap:
    """Pixel feature grid (B, D, H, W) plus normalization bookkeeping.

    zero_mask marks pixels whose vectors were zero before normalization; such
    pixels stay zero rather than becoming NaN.
    """

    values: torch.Tensor
    normalized: bool = False
    zero_mask: torch.Tensor | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)


def normalize_pixels(features: torch.Tensor | FeatureMap, dim: int = 1) -> FeatureMap:
    """L2-normalize each pixel vector along dim; zero vectors map to zero."""
    values = features.values if isinstance(features, FeatureMap) else features
    norms = values.norm(dim=dim, keepdim=True)
    zero = norms.squeeze(dim) == 0
    out = values / norms.clamp_min(1e-12)
    out = torch.where(norms == 0, torch.zeros_like(values), out)
    return FeatureMap(values=out, normalized=True,
                      zero_mask=zero if bool(zero.any()) else None)


@dataclass
class TeacherBundle:
    """A trained backbone plus its quantizer, ready for inference."""

    model: ResUnet
    quantizer: "nn.Module"
    kind: str = "teacher"

    @property
    def model_cfg(self) -> ModelConfig:
        return self.model.cfg

    def features(self, images: torch.Tensor, source: str = "backbone") -> FeatureMap:
        """Normalized per-pixel features for a (B, C, H, W) batch.

        source="backbone" uses the ResUnet output; source="quantized" passes
        it through the codebook (eval-mode hard selection) first.
        """
        self.model.eval()
        self.quantizer.eval()
        with torch.no_grad():
            z = self.model(images)
            if source == "quantized":
                z = self.quantizer(z, training=False).quantized
            elif source != "backbone":
                raise ConfigError(f"unknown feature source {source!r}")
        return normalize_pixels(z)


def _cfg_to_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def save_teacher_checkpoint(path, model: ResUnet, quantizer) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "teacher",
        "model_cfg": _cfg_to_dict(model.cfg),
        "quantizer_cfg": _cfg_to_dict(quantizer.cfg),
        "model_state": model.state_dict(),
        "quantizer_state": quantizer.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(path):
    """Load a teacher or student checkpoint; returns the matching bundle."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint format version {version}")
    kind = payload.get("kind")
    if kind == "teacher":
        from .quantizer import GumbelQuantizer, QuantizerConfig

        cfg = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v
                             for k, v in payload["model_cfg"].items()})
        model = ResUnet(cfg)
        model.load_state_dict(payload["model_state"])
        qcfg = QuantizerConfig(**payload["quantizer_cfg"])
        quantizer = GumbelQuantizer(qcfg)
        quantizer.load_state_dict(payload["quantizer_state"])
        model.eval()
        quantizer.eval()
        return TeacherBundle(model=model, quantizer=quantizer)
    if kind == "student":
        from .distill import StudentBundle, StudentNet

        cfg = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v
                             for k, v in payload["model_cfg"].items()})
        student = StudentNet(cfg)
        student.load_state_dict(payload["student_state"])
        student.eval()
        return StudentBundle(student=student)
    raise ConfigError(f"{path}: unknown checkpoint kind {kind!r}")
