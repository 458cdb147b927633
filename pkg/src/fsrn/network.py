"""Detector graph: small conv backbone with a 3-level feature pyramid,
support-branch prototype pooling, Hadamard feature fusion, and the
classification/localization subnets.

The classification subnet runs once per support class on prototype-fused
features (binary sigmoid head); localization runs on un-fused features and is
therefore class-agnostic by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .anchors import BASE_SIZE_CELLS

PYRAMID_LEVELS = ("p3", "p4", "p5")
PYRAMID_STRIDES = {"p3": 8, "p4": 16, "p5": 32}
PRIOR_FOREGROUND = 0.01  # initial sigmoid output of the classification head


class ShapeError(ValueError):
    """Input dimensions violate the network's shape contract."""


@dataclass(frozen=True)
class SubnetConfig:
    """Depth/width of the detection subnets and the fusion position.

    ``fusion_index`` is the conv index (0-based) before which the prototype
    is multiplied in: 0 fuses right after the FPN (multi-scale early fusion),
    n_conv_layers - 1 fuses just before the logit conv (late baseline). The
    post-fusion receptive field is 1 + (n_conv_layers - fusion_index) *
    (kernel_size - 1).
    """

    n_conv_layers: int = 5
    kernel_size: int = 3
    n_anchors_per_pixel: int = 15
    n_channels: int = 48
    fusion_index: int = 0

    def __post_init__(self):
        if self.n_conv_layers < 1:
            raise ValueError("n_conv_layers must be >= 1")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if not 0 <= self.fusion_index < self.n_conv_layers:
            raise ValueError("fusion_index must lie in [0, n_conv_layers)")
        if self.n_channels % 8 != 0:
            raise ValueError("n_channels must be divisible by 8 (group norm)")


@dataclass
class FeaturePyramid:
    """Ordered map level -> (B, C, H_l, W_l) features with per-level strides."""

    levels: dict[str, torch.Tensor]
    strides: dict[str, int]

    def __post_init__(self):
        names = list(self.levels)
        chans = {t.shape[-3] for t in self.levels.values()}
        if len(chans) != 1:
            raise ShapeError(f"channel count differs across levels: {sorted(chans)}")
        for a, b in zip(names, names[1:]):
            if self.strides[b] != 2 * self.strides[a]:
                raise ShapeError(f"strides must double per level: {self.strides}")

    @property
    def n_channels(self) -> int:
        return next(iter(self.levels.values())).shape[-3]

    def shapes(self) -> dict[str, tuple[int, int]]:
        return {k: tuple(v.shape[-2:]) for k, v in self.levels.items()}


@dataclass
class ClassPrototype:
    """Length-C class embedding pooled from K support shots at one level."""

    class_id: int
    vector: torch.Tensor
    source_level: str

    def __post_init__(self):
        if not torch.all(torch.isfinite(self.vector)):
            raise ValueError(f"prototype for class {self.class_id} has non-finite entries")


@dataclass
class DenseOutputs:
    """Per-level dense predictions for one (query, prototype set) pass."""

    class_logits: dict[str, torch.Tensor]   # (N, A, H_l, W_l) per level
    box_deltas: dict[str, torch.Tensor]     # (1, 4*A, H_l, W_l) per level


def receptive_field(n_layers: int, kernel: int, stride: int = 1) -> int:
    """Receptive field of a stack of stride-1 convolutions."""
    if n_layers < 0:
        raise ValueError("n_layers must be >= 0")
    if stride != 1:
        raise ValueError("formula covers stride-1 stacks only")
    return 1 + n_layers * (kernel - 1)


def post_fusion_receptive_field(cfg: SubnetConfig) -> int:
    return receptive_field(cfg.n_conv_layers - cfg.fusion_index, cfg.kernel_size)


def support_level(source_sizes, strides: dict[str, int] = PYRAMID_STRIDES) -> str:
    """Pick the pyramid level whose anchor base size is nearest (in log2) to
    the geometric-mean groundtruth box size sqrt(w*h) of the shots."""
    sizes = [math.sqrt(max(w, 1e-6) * max(h, 1e-6)) for w, h in source_sizes]
    log_size = float(np.mean([math.log2(s) for s in sizes]))
    best, best_gap = None, None
    for name in sorted(strides, key=strides.get):
        gap = abs(log_size - math.log2(BASE_SIZE_CELLS * strides[name]))
        if best is None or gap < best_gap:
            best, best_gap = name, gap
    return best


def fuse(query: FeaturePyramid, proto: ClassPrototype) -> FeaturePyramid:
    """Channel-wise Hadamard product of the prototype with every level."""
    c = proto.vector.numel()
    if c != query.n_channels:
        raise ShapeError(f"prototype has {c} channels, pyramid has {query.n_channels}")
    scale = proto.vector.reshape(1, c, 1, 1)
    return FeaturePyramid(
        levels={k: v * scale for k, v in query.levels.items()},
        strides=dict(query.strides),
    )


def _conv_gn_relu(c_in: int, c_out: int, stride: int = 1, groups: int | None = None) -> nn.Sequential:
    # narrow widths get fewer groups so each group keeps >= 2 values even on
    # 1x1 spatial maps
    if groups is None:
        groups = 8 if c_out >= 16 else max(1, c_out // 2)
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(groups, c_out),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    """Stem plus four stride-2 blocks; exposes the last three stages."""

    def __init__(self, widths=(16, 24, 32, 48, 64)):
        super().__init__()
        if len(widths) != 5:
            raise ValueError("backbone takes 5 widths (stem + 4 blocks)")
        self.widths = tuple(widths)
        self.stem = _conv_gn_relu(3, widths[0], stride=2)
        blocks = []
        for c_in, c_out in zip(widths[:-1], widths[1:]):
            blocks.append(nn.Sequential(
                _conv_gn_relu(c_in, c_out, stride=2),
                _conv_gn_relu(c_out, c_out, stride=1),
            ))
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = self.stem(x)
        outs = []
        for block in self.blocks:
            x = block(x)
            outs.append(x)
        return outs[-3:]  # strides 8, 16, 32


class FPN(nn.Module):
    """Top-down pyramid: bias-free lateral 1x1 and output 3x3 convolutions."""

    def __init__(self, in_channels, out_channels: int):
        super().__init__()
        self.lateral = nn.ModuleList(
            nn.Conv2d(c, out_channels, 1, bias=False) for c in in_channels)
        self.output = nn.ModuleList(
            nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False) for _ in in_channels)

    def forward(self, stages: list[torch.Tensor]) -> list[torch.Tensor]:
        laterals = [conv(s) for conv, s in zip(self.lateral, stages)]
        for i in range(len(laterals) - 2, -1, -1):
            up = nn.functional.interpolate(laterals[i + 1], scale_factor=2, mode="nearest")
            laterals[i] = laterals[i] + up
        return [conv(x) for conv, x in zip(self.output, laterals)]


class ClassificationSubnet(nn.Module):
    """Stack of 3x3 convs ending in an A-channel logit conv, shared across
    levels; the prototype is fused in before conv ``fusion_index``."""

    def __init__(self, cfg: SubnetConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.n_channels
        layers = []
        for i in range(cfg.n_conv_layers - 1):
            # single-group norm: per-group statistics would divide the fused
            # per-channel scale back out and erase most of the support signal
            layers.append(_conv_gn_relu(c, c, groups=1))
        self.hidden = nn.ModuleList(layers)
        self.logits = nn.Conv2d(c, cfg.n_anchors_per_pixel, cfg.kernel_size,
                                padding=cfg.kernel_size // 2, bias=True)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, std=0.01)
        # start near the foreground prior so focal loss is not swamped early
        nn.init.constant_(self.logits.bias, -math.log((1 - PRIOR_FOREGROUND) / PRIOR_FOREGROUND))

    def forward(self, level_features: torch.Tensor, proto_vectors: torch.Tensor) -> torch.Tensor:
        """(1, C, H, W) features x (N, C) prototypes -> (N, A, H, W).

        Broadcasting at the fusion point fans the shared pre-fusion features
        out to one lane per prototype.
        """
        scale = proto_vectors.reshape(proto_vectors.shape[0], -1, 1, 1)
        x = level_features
        for i, layer in enumerate(self.hidden):
            if i == self.cfg.fusion_index:
                x = x * scale
            x = layer(x)
        if self.cfg.fusion_index == self.cfg.n_conv_layers - 1:
            x = x * scale
        return self.logits(x)


class LocalizationSubnet(nn.Module):
    """Class-agnostic box regression on un-fused features."""

    def __init__(self, cfg: SubnetConfig):
        super().__init__()
        c = cfg.n_channels
        self.hidden = nn.ModuleList(
            _conv_gn_relu(c, c) for _ in range(cfg.n_conv_layers - 1))
        self.deltas = nn.Conv2d(c, 4 * cfg.n_anchors_per_pixel, cfg.kernel_size,
                                padding=cfg.kernel_size // 2, bias=True)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, std=0.01)
        nn.init.constant_(self.deltas.bias, 0.0)

    def forward(self, level_features: torch.Tensor) -> torch.Tensor:
        x = level_features
        for layer in self.hidden:
            x = layer(x)
        return self.deltas(x)


class FewShotDetector(nn.Module):
    """Backbone + FPN + support pooling + fused classification and
    un-fused localization heads."""

    def __init__(self, cfg: SubnetConfig | None = None, backbone_widths=(16, 24, 32, 48, 64)):
        super().__init__()
        self.cfg = cfg or SubnetConfig()
        self.backbone = Backbone(backbone_widths)
        self.fpn = FPN(self.backbone.widths[-3:], self.cfg.n_channels)
        self.cls_subnet = ClassificationSubnet(self.cfg)
        self.loc_subnet = LocalizationSubnet(self.cfg)

    # --- feature extraction -------------------------------------------------

    def pyramid(self, images: torch.Tensor) -> FeaturePyramid:
        """(B, 3, H, W) images -> 3-level pyramid at strides 8/16/32."""
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) input, got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        stride = PYRAMID_STRIDES[PYRAMID_LEVELS[-1]]
        if h % stride or w % stride:
            raise ShapeError(f"input size {h}x{w} not divisible by the largest stride {stride}")
        feats = self.fpn(self.backbone(images))
        return FeaturePyramid(
            levels=dict(zip(PYRAMID_LEVELS, feats)),
            strides=dict(PYRAMID_STRIDES),
        )

    # --- support branch -----------------------------------------------------

    def shot_vectors(self, crops: torch.Tensor, level: str) -> torch.Tensor:
        """(K, 3, S, S) crop batch -> (K, C) per-shot GAP vectors at level."""
        pyr = self.pyramid(crops)
        return pyr.levels[level].mean(dim=(-2, -1))

    def prototype(self, class_id: int, crops: torch.Tensor, source_sizes) -> ClassPrototype:
        """Eq.-style class embedding: GAP per shot at the size-matched level,
        then the arithmetic mean over the K shots."""
        level = support_level(source_sizes)
        vectors = self.shot_vectors(crops, level)
        return ClassPrototype(class_id=class_id, vector=vectors.mean(dim=0), source_level=level)

    # --- dense heads ----------------------------------------------------------

    def classify(self, pyramid: FeaturePyramid, prototypes: list[ClassPrototype]) -> dict[str, torch.Tensor]:
        """Per-level (N, A, H, W) logits, one channel-bank per prototype."""
        if not prototypes:
            raise ValueError("need at least one prototype")
        for p in prototypes:
            if p.vector.numel() != pyramid.n_channels:
                raise ShapeError(
                    f"prototype for class {p.class_id} has {p.vector.numel()} channels, "
                    f"pyramid has {pyramid.n_channels}")
        stack = torch.stack([p.vector for p in prototypes])  # (N, C)
        return {name: self.cls_subnet(feat, stack) for name, feat in pyramid.levels.items()}

    def localize(self, pyramid: FeaturePyramid) -> dict[str, torch.Tensor]:
        """Per-level (B, 4A, H, W) box deltas; independent of any prototype."""
        return {name: self.loc_subnet(feat) for name, feat in pyramid.levels.items()}

    def detect(self, images: torch.Tensor, prototypes: list[ClassPrototype]) -> DenseOutputs:
        pyr = self.pyramid(images)
        return DenseOutputs(class_logits=self.classify(pyr, prototypes),
                            box_deltas=self.localize(pyr))


def crops_to_tensor(crops) -> torch.Tensor:
    """List of SupportCrop -> (K, 3, S, S) float tensor."""
    arrs = [np.transpose(c.pixels, (2, 0, 1)) for c in crops]
    return torch.from_numpy(np.ascontiguousarray(np.stack(arrs))).float()


def image_to_tensor(pixels: np.ndarray) -> torch.Tensor:
    """(H, W, 3) float array -> (1, 3, H, W) tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.transpose(pixels, (2, 0, 1))))[None].float()
