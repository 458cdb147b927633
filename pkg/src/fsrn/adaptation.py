"""Meta-test adaptation: log-scale size jitter with focal-alpha reweighting,
and Gaussian prototype sampling. Horizontal flips (the only meta-training
augmentation) live here too.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .datamodel import Annotation, ImageRecord, resize_bilinear
from .network import ClassPrototype


@dataclass(frozen=True)
class MsdaConfig:
    """Scales are drawn as 2^u with u uniform in [-log_range, log_range]."""

    log_range: float = 1.0
    alpha_train: float = 0.5

    def __post_init__(self):
        if self.log_range <= 0:
            raise ValueError("log_range must be > 0")
        if not 0.0 < self.alpha_train < 1.0:
            raise ValueError("alpha_train must lie in (0, 1)")


@dataclass
class GaussianPrototypeStats:
    """Per-channel mean and population standard deviation over the K shots."""

    mean: torch.Tensor
    std: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.std.shape:
            raise ValueError("mean/std shapes differ")
        if bool((self.std < 0).any()):
            raise ValueError("std must be non-negative")


def metatest_alpha(alpha_train: float) -> float:
    """Shift the focal weighting toward foreground for meta-testing."""
    if not 0.0 < alpha_train < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha_train}")
    return (alpha_train + 1.0) / 2.0


def msda_scale(
    record: ImageRecord,
    cfg: MsdaConfig,
    rng: np.random.Generator,
    min_size: int = 32,
) -> tuple[ImageRecord, float]:
    """Resize a query by a log-uniform random factor, boxes included.

    Draws u ~ Uniform(-r, r) and targets scale 2^u; draws below the minimum
    input size are rejected and resampled. Returns the jittered record and
    the realized scale (after rounding to integer pixels).
    """
    h, w = record.pixels.shape[:2]
    for _ in range(1000):
        u = float(rng.uniform(-cfg.log_range, cfg.log_range))
        s = 2.0 ** u
        new_h, new_w = int(round(h * s)), int(round(w * s))
        if new_h >= min_size and new_w >= min_size:
            break
    else:
        raise ValueError(f"cannot scale {w}x{h} above the {min_size}px minimum")
    if (new_h, new_w) == (h, w):
        return record, 1.0
    sy, sx = new_h / h, new_w / w
    pixels = resize_bilinear(record.pixels, new_h, new_w)
    anns = tuple(
        Annotation(class_id=a.class_id,
                   bbox=(a.bbox[0] * sx, a.bbox[1] * sy, a.bbox[2] * sx, a.bbox[3] * sy),
                   ann_id=a.ann_id)
        for a in record.annotations
    )
    realized = float(np.sqrt(sx * sy))
    return ImageRecord(image_id=record.image_id, pixels=pixels, annotations=anns), realized


def msda_support_sizes(
    source_sizes,
    cfg: MsdaConfig,
    rng: np.random.Generator,
) -> tuple[list[tuple[float, float]], float]:
    """Jitter the groundtruth sizes that drive support level routing; one
    shared factor per class keeps the K shots on a common level."""
    u = float(rng.uniform(-cfg.log_range, cfg.log_range))
    s = 2.0 ** u
    return [(w * s, h * s) for w, h in source_sizes], s


def prototype_stats(shot_vectors: torch.Tensor) -> GaussianPrototypeStats:
    """(K, C) per-shot vectors -> per-channel mean and population std.

    K=1 yields std 0: a single shot is its own population.
    """
    if shot_vectors.dim() != 2 or shot_vectors.shape[0] < 1:
        raise ValueError(f"expected (K, C) shot vectors, got {tuple(shot_vectors.shape)}")
    mean = shot_vectors.mean(dim=0)
    if shot_vectors.shape[0] == 1:
        std = torch.zeros_like(mean)
    else:
        std = shot_vectors.std(dim=0, unbiased=False)
    return GaussianPrototypeStats(mean=mean, std=std)


def gaussian_prototype(
    class_id: int,
    shot_vectors: torch.Tensor,
    source_level: str,
    rng: np.random.Generator,
) -> ClassPrototype:
    """Sample the prototype from N(mean, std^2) fitted to the shots.

    Channels with zero spread reproduce the mean bit-exactly; the rng always
    advances by one standard-normal vector so streams stay aligned.
    """
    stats = prototype_stats(shot_vectors)
    eps = torch.from_numpy(rng.standard_normal(stats.mean.numel())).to(stats.mean.dtype)
    vector = torch.where(stats.std == 0, stats.mean, stats.mean + stats.std * eps)
    return ClassPrototype(class_id=class_id, vector=vector, source_level=source_level)


def flip_horizontal(record: ImageRecord) -> ImageRecord:
    """Mirror image and boxes left-right (the meta-training augmentation)."""
    w = record.pixels.shape[1]
    pixels = np.ascontiguousarray(record.pixels[:, ::-1, :])
    anns = tuple(
        Annotation(class_id=a.class_id,
                   bbox=(w - a.bbox[0] - a.bbox[2], a.bbox[1], a.bbox[2], a.bbox[3]),
                   ann_id=a.ann_id)
        for a in record.annotations
    )
    return ImageRecord(image_id=record.image_id, pixels=pixels, annotations=anns)
