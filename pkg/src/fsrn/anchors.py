"""Dense anchor grids, IoU computation, anchor matching and box delta coding.

Boxes are (x, y, w, h) with a top-left origin and half-open pixel intervals,
except anchors, which are kept in centered (cx, cy, w, h) form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FG_IOU_THRESHOLD = 0.5
BG_IOU_THRESHOLD = 0.4

# Scale/ratio decomposition of the per-pixel anchor pattern. The 9-anchor set
# is the classic 3 octave steps x 3 aspect ratios; the 15-anchor set extends
# it with two *smaller* octave steps so that it is a strict superset (adding
# anchors can then only add foreground matches, never remove them) and the
# largest anchor stays within 10 feature cells: 4 * 2^(2/3) * sqrt(2) < 9.
ASPECT_RATIOS = (0.5, 1.0, 2.0)
_OCTAVE_OFFSETS = {
    9: (0.0, 1.0 / 3.0, 2.0 / 3.0),
    15: (-2.0 / 3.0, -1.0 / 3.0, 0.0, 1.0 / 3.0, 2.0 / 3.0),
}
BASE_SIZE_CELLS = 4.0

LABEL_FOREGROUND = 1
LABEL_BACKGROUND = 0
LABEL_IGNORE = -1


def anchor_shapes_cells(n_per_pixel: int) -> np.ndarray:
    """Per-pixel anchor (w, h) pattern in units of feature cells, shape (A, 2)."""
    if n_per_pixel not in _OCTAVE_OFFSETS:
        raise ValueError(f"unsupported anchors per pixel: {n_per_pixel} (use 9 or 15)")
    shapes = []
    for offset in _OCTAVE_OFFSETS[n_per_pixel]:
        side = BASE_SIZE_CELLS * (2.0 ** offset)
        for ratio in ASPECT_RATIOS:
            # Area-preserving aspect: w*h = side^2, w/h = ratio.
            w = side * np.sqrt(ratio)
            h = side / np.sqrt(ratio)
            shapes.append((w, h))
    return np.asarray(shapes, dtype=np.float64)


@dataclass
class AnchorSet:
    """Dense anchor grid over a feature pyramid.

    ``levels`` maps a level name to an (H*W*A, 4) array of (cx, cy, w, h)
    anchors in image pixels, ordered row-major by position, then by anchor
    index within the position.
    """

    levels: dict[str, np.ndarray]
    strides: dict[str, int]
    n_per_pixel: int
    _flat: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_anchors(self) -> int:
        return sum(a.shape[0] for a in self.levels.values())

    def flat(self) -> np.ndarray:
        """All anchors concatenated in level order, shape (M, 4)."""
        if self._flat is None:
            self._flat = np.concatenate(list(self.levels.values()), axis=0)
        return self._flat


@dataclass
class MatchResult:
    """Per-anchor assignment against one class's groundtruth boxes."""

    labels: np.ndarray            # (M,) int8: 1 fg, 0 bg, -1 ignore
    matched_gt: np.ndarray        # (M,) int32, index into gts, -1 if none
    regression_targets: np.ndarray  # (M, 4) float32, zeros where not fg

    @property
    def foreground(self) -> np.ndarray:
        return self.labels == LABEL_FOREGROUND

    @property
    def n_foreground(self) -> int:
        return int(np.sum(self.labels == LABEL_FOREGROUND))


def generate_anchors(
    pyramid_shapes: dict[str, tuple[int, int]],
    strides: dict[str, int],
    n_per_pixel: int = 15,
) -> AnchorSet:
    """Deterministic anchor grid with centers at (i + 0.5) * stride."""
    pattern = anchor_shapes_cells(n_per_pixel)  # (A, 2) in cells
    levels: dict[str, np.ndarray] = {}
    for name, (h, w) in pyramid_shapes.items():
        stride = strides[name]
        wh = pattern * stride  # (A, 2) in pixels
        ys = (np.arange(h, dtype=np.float64) + 0.5) * stride
        xs = (np.arange(w, dtype=np.float64) + 0.5) * stride
        cy, cx = np.meshgrid(ys, xs, indexing="ij")
        centers = np.stack([cx.ravel(), cy.ravel()], axis=1)  # (H*W, 2)
        boxes = np.empty((h * w, wh.shape[0], 4), dtype=np.float64)
        boxes[:, :, 0] = centers[:, None, 0]
        boxes[:, :, 1] = centers[:, None, 1]
        boxes[:, :, 2] = wh[None, :, 0]
        boxes[:, :, 3] = wh[None, :, 1]
        levels[name] = boxes.reshape(-1, 4)
    return AnchorSet(levels=levels, strides=dict(strides), n_per_pixel=n_per_pixel)


def xywh_to_cxcywh(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    out = boxes.copy()
    out[..., 0] = boxes[..., 0] + boxes[..., 2] / 2.0
    out[..., 1] = boxes[..., 1] + boxes[..., 3] / 2.0
    return out


def cxcywh_to_xywh(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    out = boxes.copy()
    out[..., 0] = boxes[..., 0] - boxes[..., 2] / 2.0
    out[..., 1] = boxes[..., 1] - boxes[..., 3] / 2.0
    return out


def iou(a, b) -> float:
    """Intersection-over-union of two (x, y, w, h) boxes."""
    ax, ay, aw, ah = (float(v) for v in a)
    bx, by, bw, bh = (float(v) for v in b)
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (N, 4) and (M, 4) boxes in (x, y, w, h), -> (N, M)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax1, ay1 = a[:, 0], a[:, 1]
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx1, by1 = b[:, 0], b[:, 1]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.clip(np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(ax1[:, None], bx1[None, :]), 0.0, None)
    ih = np.clip(np.minimum(ay2[:, None], by2[None, :]) - np.maximum(ay1[:, None], by1[None, :]), 0.0, None)
    inter = iw * ih
    area_a = (a[:, 2] * a[:, 3])[:, None]
    area_b = (b[:, 2] * b[:, 3])[None, :]
    union = area_a + area_b - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def encode_box(anchor: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Regression deltas (dx, dy, log dw, log dh) from a (cx, cy, w, h) anchor
    to an (x, y, w, h) groundtruth box. Broadcasts over leading dimensions."""
    anchor = np.asarray(anchor, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if np.any(anchor[..., 2:] <= 0) or np.any(gt[..., 2:] <= 0):
        raise ValueError("boxes must have positive width and height")
    g = xywh_to_cxcywh(gt)
    deltas = np.empty(np.broadcast(anchor, g).shape, dtype=np.float64)
    deltas[..., 0] = (g[..., 0] - anchor[..., 0]) / anchor[..., 2]
    deltas[..., 1] = (g[..., 1] - anchor[..., 1]) / anchor[..., 3]
    deltas[..., 2] = np.log(g[..., 2] / anchor[..., 2])
    deltas[..., 3] = np.log(g[..., 3] / anchor[..., 3])
    return deltas


def decode_box(anchor: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_box`; returns (x, y, w, h) boxes."""
    anchor = np.asarray(anchor, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if np.any(anchor[..., 2:] <= 0):
        raise ValueError("anchors must have positive width and height")
    out = np.empty(np.broadcast(anchor, deltas).shape, dtype=np.float64)
    cx = anchor[..., 0] + deltas[..., 0] * anchor[..., 2]
    cy = anchor[..., 1] + deltas[..., 1] * anchor[..., 3]
    w = anchor[..., 2] * np.exp(deltas[..., 2])
    h = anchor[..., 3] * np.exp(deltas[..., 3])
    out[..., 0] = cx - w / 2.0
    out[..., 1] = cy - h / 2.0
    out[..., 2] = w
    out[..., 3] = h
    return out


def _box_order_key(boxes: np.ndarray) -> np.ndarray:
    """Ranks that order boxes by their coordinate tuple (permutation stable)."""
    order = np.lexsort((boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0]))
    ranks = np.empty(len(order), dtype=np.int64)
    ranks[order] = np.arange(len(order))
    return ranks


def match_anchors(
    anchors: AnchorSet | np.ndarray,
    gts: np.ndarray,
    fg_threshold: float = FG_IOU_THRESHOLD,
    bg_threshold: float = BG_IOU_THRESHOLD,
) -> MatchResult:
    """Assign anchors against groundtruth boxes of a single class.

    Foreground if best IoU >= fg_threshold, background if < bg_threshold,
    ignore in between. Every gt is additionally force-matched to its best
    anchor even below the foreground threshold. Tie-breaking goes through the
    coordinate tuple of the gt box, so the assignment does not depend on the
    order in which gts are supplied.
    """
    flat = anchors.flat() if isinstance(anchors, AnchorSet) else np.asarray(anchors, dtype=np.float64)
    m = flat.shape[0]
    labels = np.zeros(m, dtype=np.int8)
    matched = np.full(m, -1, dtype=np.int32)
    targets = np.zeros((m, 4), dtype=np.float32)

    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    if gts.shape[0] == 0:
        return MatchResult(labels=labels, matched_gt=matched, regression_targets=targets)

    anchors_xywh = cxcywh_to_xywh(flat)
    ious = iou_matrix(anchors_xywh, gts)  # (M, G)

    # Permutation-stable argmax over gts: higher IoU wins, coordinate-tuple
    # rank breaks exact ties.
    gt_rank = _box_order_key(gts)
    tie_bias = (len(gt_rank) - gt_rank) * 1e-12
    best_gt = np.argmax(ious + tie_bias[None, :], axis=1)
    best_iou = ious[np.arange(m), best_gt]

    labels[best_iou < bg_threshold] = LABEL_BACKGROUND
    mid = (best_iou >= bg_threshold) & (best_iou < fg_threshold)
    labels[mid] = LABEL_IGNORE
    fg = best_iou >= fg_threshold
    labels[fg] = LABEL_FOREGROUND
    matched[fg] = best_gt[fg]

    # Forced matches: each gt claims its best anchor. If two gts claim the
    # same anchor the one with higher IoU (tie: coordinate rank) keeps it.
    best_anchor = np.argmax(ious, axis=0)  # (G,), first (lowest) index on ties
    for g in np.argsort(gt_rank):
        a = int(best_anchor[g])
        if labels[a] == LABEL_FOREGROUND and matched[a] >= 0:
            if ious[a, matched[a]] > ious[a, g]:
                continue
            if ious[a, matched[a]] == ious[a, g] and gt_rank[matched[a]] < gt_rank[g]:
                continue
        labels[a] = LABEL_FOREGROUND
        matched[a] = g

    fg_idx = np.flatnonzero(labels == LABEL_FOREGROUND)
    if fg_idx.size:
        targets[fg_idx] = encode_box(flat[fg_idx], gts[matched[fg_idx]]).astype(np.float32)
    return MatchResult(labels=labels, matched_gt=matched, regression_targets=targets)
