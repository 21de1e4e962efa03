"""Parametric Y-Net: shared VGG11-style encoder, regression head, U-Net decoder.

The encoder is five stages of 3x3 pad-1 convolutions + ReLU (widths
64/128/256/512/512, 1/1/2/2/2 convolutions per stage), each stage
followed by a 2x2 max-pool.  The classification limb takes the pooled
bottleneck through one more 2x2 max-pool, adaptive average pooling to
7x7, and three fully connected layers ending in the 4 similarity
outputs.  The decoder upsamples 2x (bilinear), concatenates the
matching-resolution pre-pool encoder activation (the standard U-Net
bridges, no extra skips), and applies one 3x3 convolution + ReLU per
stage; a final 1x1 convolution produces the segmentation logits at full
input resolution.  A width multiplier instantiates desk-scale toys.

Geometry outputs are normalized to (cx/W, cy/H, theta/90, size/W);
encode_params/decode_params convert between that vector and
SimilarityParams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ShapeMismatch, ToolkitError
from .geometry import InvalidParams, SimilarityParams, wrap_angle_deg
from .weights import ManifestMismatch, load_manifest, save_manifest


class InvalidConfig(ToolkitError):
    pass


@dataclass(frozen=True)
class ChannelPlan:
    """Per-stage channel widths and convolution counts of the encoder."""

    widths: tuple[int, ...] = (64, 128, 256, 512, 512)
    convs_per_stage: tuple[int, ...] = (1, 1, 2, 2, 2)

    def __post_init__(self) -> None:
        if len(self.widths) != 5 or len(self.convs_per_stage) != 5:
            raise InvalidConfig("a channel plan has exactly 5 stages")
        if any(w < 1 for w in self.widths) or any(c < 1 for c in self.convs_per_stage):
            raise InvalidConfig("stage widths and conv counts must be positive")

    @classmethod
    def scaled(cls, multiplier: float) -> "ChannelPlan":
        base = cls()
        return cls(widths=tuple(max(1, round(w * multiplier)) for w in base.widths),
                   convs_per_stage=base.convs_per_stage)


@dataclass(frozen=True)
class NetConfig:
    input_size: int = 512
    in_channels: int = 1
    geo_channels: int = 4
    seg_channels: int = 1
    fc_width: int = 4096
    plan: ChannelPlan = field(default_factory=ChannelPlan)
    pretrained_encoder_path: str | None = None

    def __post_init__(self) -> None:
        if self.input_size % 32 != 0:
            raise InvalidConfig(f"input_size must be divisible by 32, got {self.input_size}")
        if self.input_size < 64:
            # the classification limb pools once more below the bottleneck
            raise InvalidConfig(f"input_size must be at least 64, got {self.input_size}")
        if self.geo_channels != 4:
            raise InvalidConfig("geo_channels is fixed at 4 (center x/y, rotation, size)")
        if self.seg_channels < 1:
            raise InvalidConfig("seg_channels must be >= 1")
        if self.in_channels < 1 or self.fc_width < 1:
            raise InvalidConfig("in_channels and fc_width must be positive")

    @classmethod
    def toy(cls, input_size: int = 64, multiplier: float = 0.125,
            fc_width: int = 256) -> "NetConfig":
        return cls(input_size=input_size, fc_width=fc_width,
                   plan=ChannelPlan.scaled(multiplier))


@dataclass
class NetOutput:
    geo: torch.Tensor        # (batch, 4) normalized similarity predictions
    seg_logits: torch.Tensor  # (batch, seg_channels, input, input)


def decoder_widths(plan: ChannelPlan) -> tuple[int, ...]:
    """Output channels of the five decoder stages: bottleneck width halved per stage."""
    c0 = plan.widths[-1]
    return tuple(max(1, c0 // (1 << i)) for i in range(5))


class YNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        plan = cfg.plan

        stages = []
        in_ch = cfg.in_channels
        for width, n_convs in zip(plan.widths, plan.convs_per_stage):
            layers: list[nn.Module] = []
            for _ in range(n_convs):
                layers.append(nn.Conv2d(in_ch, width, kernel_size=3, padding=1))
                layers.append(nn.ReLU(inplace=True))
                in_ch = width
            stages.append(nn.Sequential(*layers))
        self.enc_stages = nn.ModuleList(stages)
        self.pool = nn.MaxPool2d(2)

        self.cls_pool = nn.MaxPool2d(2)
        self.cls_avg = nn.AdaptiveAvgPool2d(7)
        self.classifier = nn.Sequential(
            nn.Linear(plan.widths[-1] * 7 * 7, cfg.fc_width),
            nn.ReLU(inplace=True),
            nn.Dropout(0.5),
            nn.Linear(cfg.fc_width, cfg.fc_width),
            nn.ReLU(inplace=True),
            nn.Dropout(0.5),
            nn.Linear(cfg.fc_width, cfg.geo_channels),
        )

        self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        dec_out = decoder_widths(plan)
        skip_ch = tuple(reversed(plan.widths))
        dec_stages = []
        prev = plan.widths[-1]
        for skip, out_ch in zip(skip_ch, dec_out):
            dec_stages.append(nn.Sequential(
                nn.Conv2d(prev + skip, out_ch, kernel_size=3, padding=1),
                nn.ReLU(inplace=True),
            ))
            prev = out_ch
        self.dec_stages = nn.ModuleList(dec_stages)
        self.seg_head = nn.Conv2d(dec_out[-1], cfg.seg_channels, kernel_size=1)

        self._init_weights()

    def _init_weights(self) -> None:
        # Kaiming-uniform fan-in for convolutions; uniform +-1/sqrt(fan_in)
        # for fully connected layers and all biases.
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                bound = 1.0 / math.sqrt(fan_in)
                nn.init.uniform_(m.bias, -bound, bound)
            elif isinstance(m, nn.Linear):
                bound = 1.0 / math.sqrt(m.in_features)
                nn.init.uniform_(m.weight, -bound, bound)
                nn.init.uniform_(m.bias, -bound, bound)

    def forward(self, x: torch.Tensor) -> NetOutput:
        s = self.cfg.input_size
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels or x.shape[2] != s or x.shape[3] != s:
            raise ShapeMismatch(
                f"expected batch of shape (B, {self.cfg.in_channels}, {s}, {s}), got {tuple(x.shape)}")
        skips = []
        for stage in self.enc_stages:
            x = stage(x)
            skips.append(x)
            x = self.pool(x)

        pooled = x  # bottleneck at input/32
        c = self.cls_avg(self.cls_pool(pooled))
        geo = self.classifier(torch.flatten(c, 1))

        d = pooled
        for stage, skip in zip(self.dec_stages, reversed(skips)):
            d = stage(torch.cat([self.up(d), skip], dim=1))
        seg = self.seg_head(d)
        return NetOutput(geo=geo, seg_logits=seg)

    def encoder_state(self) -> dict[str, np.ndarray]:
        out = {}
        for i, stage in enumerate(self.enc_stages):
            conv_idx = 0
            for layer in stage:
                if isinstance(layer, nn.Conv2d):
                    base = f"enc{i}.conv{conv_idx}"
                    out[f"{base}.weight"] = layer.weight.detach().cpu().numpy().astype(np.float32)
                    out[f"{base}.bias"] = layer.bias.detach().cpu().numpy().astype(np.float32)
                    conv_idx += 1
        return out


def build(cfg: NetConfig) -> YNet:
    """Instantiate the network; loads pretrained encoder weights if configured."""
    model = YNet(cfg)
    if cfg.pretrained_encoder_path is not None:
        load_pretrained_encoder(model, cfg.pretrained_encoder_path)
    return model


def forward(model: YNet, batch) -> NetOutput:
    """Run a batch of grayscale images; accepts (B,H,W) or (B,1,H,W) arrays or tensors."""
    if isinstance(batch, np.ndarray):
        batch = torch.from_numpy(np.ascontiguousarray(batch, dtype=np.float32))
    if batch.ndim == 3:
        batch = batch.unsqueeze(1)
    return model(batch)


def export_encoder(model: YNet, path) -> None:
    """Write the encoder convolution weights to a manifest file."""
    plan = model.cfg.plan
    meta = {"kind": "encoder", "widths": list(plan.widths),
            "convs_per_stage": list(plan.convs_per_stage),
            "in_channels": model.cfg.in_channels}
    save_manifest(path, model.encoder_state(), meta)


def load_pretrained_encoder(model: YNet, path) -> YNet:
    """Replace encoder convolution weights from a manifest; heads stay untouched."""
    arrays, _meta = load_manifest(path)
    expected = model.encoder_state()
    missing = sorted(set(expected) - set(arrays))
    if missing:
        raise ManifestMismatch(f"{path}: missing encoder entries {missing[:4]}"
                               + ("..." if len(missing) > 4 else ""))
    with torch.no_grad():
        for i, stage in enumerate(model.enc_stages):
            conv_idx = 0
            for layer in stage:
                if isinstance(layer, nn.Conv2d):
                    base = f"enc{i}.conv{conv_idx}"
                    for attr, key in (("weight", f"{base}.weight"), ("bias", f"{base}.bias")):
                        arr = arrays[key]
                        param = getattr(layer, attr)
                        if tuple(arr.shape) != tuple(param.shape):
                            raise ManifestMismatch(
                                f"{path}: entry {key} has shape {tuple(arr.shape)}, "
                                f"model expects {tuple(param.shape)}")
                        param.copy_(torch.from_numpy(arr.astype(np.float32)))
                    conv_idx += 1
    return model


def encoder_param_count(plan: ChannelPlan, in_channels: int = 1) -> int:
    """Closed-form weight+bias count of the encoder convolutions."""
    total = 0
    c_in = in_channels
    for width, n_convs in zip(plan.widths, plan.convs_per_stage):
        for _ in range(n_convs):
            total += 3 * 3 * c_in * width + width
            c_in = width
    return total


def encode_params(p: SimilarityParams, w: int, h: int) -> np.ndarray:
    """Normalize similarity parameters to the network's target vector."""
    return np.array([p.cx / w, p.cy / h, p.theta / 90.0, p.size / w], dtype=np.float64)


def decode_params(vec, w: int, h: int) -> SimilarityParams:
    """Invert encode_params; clamps size to [1, 4w] so alignment stays invertible."""
    v = np.asarray(vec, dtype=np.float64).reshape(4)
    if not np.isfinite(v).all():
        raise InvalidParams(f"cannot decode non-finite prediction {v}")
    size = float(min(max(v[3] * w, 1.0), 4.0 * w))
    return SimilarityParams(cx=float(v[0] * w), cy=float(v[1] * h),
                            theta=wrap_angle_deg(float(v[2] * 90.0)), size=size)
