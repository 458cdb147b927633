"""Loss stack: focal classification loss, max-margin prototype loss,
smooth-L1 box regression and the combined training objective."""

from __future__ import annotations

from dataclasses import dataclass

import torch

PROB_EPS = 1e-7      # clamp for probabilities before taking logs
MARGIN_EPS = 1e-8    # added to the max-margin denominator


class NonFiniteLossError(RuntimeError):
    """A loss component evaluated to NaN or infinity."""

    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite loss component {component!r}: {value}")
        self.component = component


@dataclass(frozen=True)
class FocalParams:
    """Weighting factor alpha in (0, 1) and modulating exponent gamma >= 0."""

    alpha: float = 0.5
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


@dataclass
class LossBreakdown:
    """Per-step components of the training objective."""

    focal: float
    loc: float
    max_margin: float
    lambda_mm: float
    total: float
    n_foreground: int = 0
    mm_degenerate: bool = False

    def as_dict(self) -> dict:
        return {
            "focal": self.focal,
            "loc": self.loc,
            "max_margin": self.max_margin,
            "lambda": self.lambda_mm,
            "total": self.total,
            "n_foreground": self.n_foreground,
            "mm_degenerate": self.mm_degenerate,
        }


def focal_loss(
    p,
    p_t,
    params: FocalParams,
    reduction: str = "none",
    n_foreground: int | None = None,
):
    """Symmetric two-term focal loss.

    -(alpha * p_t * (1-p)^gamma * log p + (1-alpha) * (1-p_t) * p^gamma * log(1-p))

    ``p`` holds predicted probabilities, ``p_t`` the {0, 1} groundtruth
    labels. With reduction "none" the element-wise loss is returned; with
    "foreground_mean" the sum over all elements is divided by
    max(1, n_foreground), the dense-detector normalization.
    """
    p = torch.as_tensor(p)
    p_t = torch.as_tensor(p_t, dtype=p.dtype)
    if torch.any(p < 0) or torch.any(p > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    p = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    pos = params.alpha * p_t * (1.0 - p) ** params.gamma * torch.log(p)
    neg = (1.0 - params.alpha) * (1.0 - p_t) * p ** params.gamma * torch.log(1.0 - p)
    loss = -(pos + neg)
    if reduction == "none":
        return loss
    if reduction == "foreground_mean":
        if n_foreground is None:
            n_foreground = int(torch.sum(p_t).item())
        return loss.sum() / max(1, n_foreground)
    raise ValueError(f"unknown reduction {reduction!r}")


def max_margin_loss(prototypes) -> torch.Tensor:
    """Intra-class scatter over minimum inter-class mean separation.

    ``prototypes`` maps each class to a (K_i, D) tensor of per-shot vectors
    (a list of such tensors works too). Requires at least two classes. A
    vanishing denominator is regularized away; callers can detect the
    degenerate case via :func:`max_margin_denominator`.
    """
    groups = _as_groups(prototypes)
    if len(groups) < 2:
        raise ValueError("max-margin loss needs at least 2 classes")
    means = [g.mean(dim=0) for g in groups]
    numerator = sum(((g - mu) ** 2).sum(dim=1).mean() for g, mu in zip(groups, means))
    # clamp_min instead of adding eps: non-degenerate values stay exact
    denominator = _min_separation_sum(means).clamp_min(MARGIN_EPS)
    return numerator / denominator


def max_margin_denominator(prototypes) -> float:
    """Sum over classes of the squared distance to the nearest other mean."""
    groups = _as_groups(prototypes)
    means = [g.mean(dim=0) for g in groups]
    return float(_min_separation_sum(means))


def _as_groups(prototypes) -> list[torch.Tensor]:
    if isinstance(prototypes, dict):
        items = [prototypes[k] for k in sorted(prototypes)]
    else:
        items = list(prototypes)
    return [torch.as_tensor(g, dtype=torch.float64) if not torch.is_tensor(g) else g for g in items]


def _min_separation_sum(means: list[torch.Tensor]):
    total = None
    for i, mu_i in enumerate(means):
        best = None
        for j, mu_j in enumerate(means):
            if j == i:
                continue
            d = ((mu_i - mu_j) ** 2).sum()
            best = d if best is None else torch.minimum(best, d)
        total = best if total is None else total + best
    return total


def smooth_l1(pred_deltas, target_deltas, beta: float = 1.0) -> torch.Tensor:
    """Smooth L1 over matching-shape delta tensors: 0.5 x^2 / beta inside
    |x| < beta, |x| - 0.5 beta outside, summed over coordinates and averaged
    over the leading (anchor) dimension. Empty input yields 0."""
    pred = torch.as_tensor(pred_deltas)
    target = torch.as_tensor(target_deltas, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.numel() == 0:
        return torch.zeros((), dtype=pred.dtype)
    x = pred - target
    ax = x.abs()
    per_elem = torch.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)
    n_anchors = pred.shape[0] if pred.dim() > 0 else 1
    return per_elem.sum() / n_anchors


def total_loss(focal, loc, mm, lambda_mm: float) -> tuple[torch.Tensor, LossBreakdown]:
    """Combine the components into L = L_F + L_loc + lambda * L_MM.

    Returns the differentiable total together with a float breakdown.
    Raises :class:`NonFiniteLossError` naming the first non-finite component.
    """
    parts = {"focal": torch.as_tensor(focal), "loc": torch.as_tensor(loc), "max_margin": torch.as_tensor(mm)}
    for name, value in parts.items():
        if not torch.isfinite(value):
            raise NonFiniteLossError(name, float(value))
    total = parts["focal"] + parts["loc"] + lambda_mm * parts["max_margin"]
    f, l, m = (float(parts[k].detach()) for k in ("focal", "loc", "max_margin"))
    breakdown = LossBreakdown(
        focal=f,
        loc=l,
        max_margin=m,
        lambda_mm=float(lambda_mm),
        total=f + l + float(lambda_mm) * m,
    )
    return total, breakdown
