"""Episodic task construction: multi-way support sampling with class dropout,
plus the binary one-positive-one-negative baseline.

Plans (id-level) and materialized tasks (with pixel crops) are split so that
episode streams can be inspected, dumped and property-tested cheaply.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .datamodel import (
    DEFAULT_SUPPORT_SIZE,
    Annotation,
    DetectionDataset,
    ImageRecord,
    SupportCrop,
    extract_support_crop,
)


class SamplingError(ValueError):
    """The dataset cannot satisfy a sampling request (e.g. too few shots)."""


class Skip:
    """Marker for an episode discarded because dropout removed every class."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "Skip"


SKIP = Skip()


@dataclass(frozen=True)
class SamplerConfig:
    n_ways: int = 3
    k_shots: int = 5
    dropout_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_ways < 1:
            raise ValueError("n_ways must be >= 1")
        if self.k_shots < 1:
            raise ValueError("k_shots must be >= 1")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError("dropout_prob must lie in [0, 1)")


@dataclass(frozen=True)
class EpisodePlan:
    """Id-level description of one episode: which query image, which classes
    play positive/negative, and which annotation ids provide the K shots."""

    query_image_id: int
    n_ways: int
    k_shots: int
    positive_classes: tuple[int, ...]
    negative_classes: tuple[int, ...]
    support_ann_ids: dict[int, tuple[int, ...]]

    def as_dict(self) -> dict:
        return {
            "query_image_id": self.query_image_id,
            "n_ways": self.n_ways,
            "k_shots": self.k_shots,
            "positive_classes": list(self.positive_classes),
            "negative_classes": list(self.negative_classes),
            "support_ann_ids": {str(c): list(v) for c, v in self.support_ann_ids.items()},
        }


@dataclass(eq=False)
class EpisodeTask:
    """One materialized episode: the query with retained annotations and an
    ordered class -> K support crops map."""

    query: ImageRecord
    support: dict[int, list[SupportCrop]]
    n_ways: int
    positive_classes: tuple[int, ...]
    negative_classes: tuple[int, ...]

    def __post_init__(self):
        keys = tuple(self.support.keys())
        if len(keys) != self.n_ways:
            raise ValueError(f"support has {len(keys)} classes, expected {self.n_ways}")
        if set(self.positive_classes) | set(self.negative_classes) != set(keys):
            raise ValueError("positive + negative classes must equal support keys")
        if set(self.positive_classes) & set(self.negative_classes):
            raise ValueError("positive and negative classes overlap")
        for ann in self.query.annotations:
            if ann.class_id not in self.positive_classes:
                raise ValueError(f"retained annotation of class {ann.class_id} not positive")


def _shot_pool(ds: DetectionDataset, class_id: int) -> list[tuple[ImageRecord, Annotation]]:
    pool = ds.annotations_by_class().get(class_id, [])
    return sorted(pool, key=lambda pair: pair[1].ann_id)


def _sample_shots(ds: DetectionDataset, class_id: int, k: int, rng: np.random.Generator) -> tuple[int, ...]:
    pool = _shot_pool(ds, class_id)
    if len(pool) < k:
        raise SamplingError(
            f"class {class_id} has {len(pool)} annotations, cannot sample {k} shots"
        )
    idx = rng.choice(len(pool), size=k, replace=False)
    return tuple(pool[int(i)][1].ann_id for i in idx)


def sample_episode_plan(
    ds: DetectionDataset,
    query: ImageRecord,
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> EpisodePlan | Skip:
    """Multi-way episode construction with class dropout.

    Every class present in the query is dropped independently with
    dropout_prob; an episode whose classes are all dropped is skipped. If
    more than n_ways classes survive, a uniform subset of n_ways is kept and
    the rest are treated as background for this task. Remaining slots are
    backfilled with distinct negative classes drawn uniformly from the base
    classes absent from the query. A class with fewer than k_shots
    annotations in the pool cannot fill a lane on either side; like a
    dropped class, it falls back to background.
    """
    query_classes = sorted(query.class_ids)
    if not query_classes:
        raise ValueError(f"query image {query.image_id} has no annotations")

    pools = ds.annotations_by_class()

    def has_shots(c: int) -> bool:
        return len(pools.get(c, ())) >= cfg.k_shots

    coins = rng.random(len(query_classes))
    survivors = [c for c, u in zip(query_classes, coins)
                 if u >= cfg.dropout_prob and has_shots(c)]
    if not survivors:
        return SKIP
    if len(survivors) > cfg.n_ways:
        picked = rng.choice(len(survivors), size=cfg.n_ways, replace=False)
        survivors = sorted(survivors[int(i)] for i in picked)

    support: dict[int, tuple[int, ...]] = {}
    for c in survivors:
        support[c] = _sample_shots(ds, c, cfg.k_shots, rng)

    negatives: list[int] = []
    candidates = [c for c in ds.base_class_ids
                  if c not in query_classes and has_shots(c)]
    while len(support) < cfg.n_ways:
        remaining = [c for c in candidates if c not in support]
        if not remaining:
            raise SamplingError(
                f"no negative class available: base classes exhausted for query {query.image_id}"
            )
        z = int(rng.choice(np.asarray(remaining)))
        support[z] = _sample_shots(ds, z, cfg.k_shots, rng)
        negatives.append(z)

    return EpisodePlan(
        query_image_id=query.image_id,
        n_ways=cfg.n_ways,
        k_shots=cfg.k_shots,
        positive_classes=tuple(survivors),
        negative_classes=tuple(negatives),
        support_ann_ids=support,
    )


def sample_binary_episode_plan(
    ds: DetectionDataset,
    query: ImageRecord,
    class_id: int,
    k_shots: int,
    rng: np.random.Generator,
) -> EpisodePlan:
    """Baseline two-way episode: one positive class from the query plus one
    random negative; every other query annotation becomes background."""
    if class_id not in query.class_ids:
        raise ValueError(f"class {class_id} does not occur in query image {query.image_id}")
    support = {class_id: _sample_shots(ds, class_id, k_shots, rng)}
    pools = ds.annotations_by_class()
    candidates = [c for c in ds.base_class_ids
                  if c not in query.class_ids and len(pools.get(c, ())) >= k_shots]
    if not candidates:
        raise SamplingError("no negative class available for a binary episode")
    z = int(rng.choice(np.asarray(candidates)))
    support[z] = _sample_shots(ds, z, k_shots, rng)
    return EpisodePlan(
        query_image_id=query.image_id,
        n_ways=2,
        k_shots=k_shots,
        positive_classes=(class_id,),
        negative_classes=(z,),
        support_ann_ids=support,
    )


def materialize_episode(
    ds: DetectionDataset,
    plan: EpisodePlan,
    out_size: int = DEFAULT_SUPPORT_SIZE,
) -> EpisodeTask:
    """Turn an id-level plan into pixels: filter the query's annotations to
    the positive classes and cut the support crops."""
    query = ds.record_by_id(plan.query_image_id)
    retained = tuple(a for a in query.annotations if a.class_id in plan.positive_classes)
    filtered = ImageRecord(image_id=query.image_id, pixels=query.pixels, annotations=retained)

    ann_index = ds.annotation_index()
    support: dict[int, list[SupportCrop]] = {}
    for class_id, ann_ids in plan.support_ann_ids.items():
        crops = []
        for ann_id in ann_ids:
            rec, ann = ann_index[ann_id]
            crops.append(extract_support_crop(rec, ann, out_size))
        support[class_id] = crops
    return EpisodeTask(
        query=filtered,
        support=support,
        n_ways=plan.n_ways,
        positive_classes=plan.positive_classes,
        negative_classes=plan.negative_classes,
    )


def sample_episode(
    ds: DetectionDataset,
    query: ImageRecord,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    out_size: int = DEFAULT_SUPPORT_SIZE,
) -> EpisodeTask | Skip:
    plan = sample_episode_plan(ds, query, cfg, rng)
    if plan is SKIP:
        return SKIP
    return materialize_episode(ds, plan, out_size)


def sample_binary_episode(
    ds: DetectionDataset,
    query: ImageRecord,
    class_id: int,
    k_shots: int,
    rng: np.random.Generator,
    out_size: int = DEFAULT_SUPPORT_SIZE,
) -> EpisodeTask:
    plan = sample_binary_episode_plan(ds, query, class_id, k_shots, rng)
    return materialize_episode(ds, plan, out_size)


def episode_plan_stream(ds: DetectionDataset, cfg: SamplerConfig) -> Iterator[EpisodePlan | Skip]:
    """Endless deterministic stream of episode plans; queries are drawn
    uniformly from the images that carry at least one annotation."""
    rng = np.random.default_rng(cfg.seed)
    eligible = [rec for rec in ds.records if rec.annotations]
    if not eligible:
        raise SamplingError("dataset has no annotated images to sample queries from")
    while True:
        query = eligible[int(rng.integers(len(eligible)))]
        yield sample_episode_plan(ds, query, cfg, rng)


def foreground_yield(
    ds: DetectionDataset,
    mode: str = "multiway",
    cfg: SamplerConfig | None = None,
    n_episodes: int = 2000,
    seed: int = 0,
) -> float:
    """Monte-Carlo estimate of retained foreground annotations per episode.

    Skipped episodes count as zero, so the multiway estimate at dropout p
    approaches (1 - p) * mean annotations per image; the binary estimate
    approaches the per-image mean of (annotations of one sampled class).
    """
    if mode not in ("multiway", "binary"):
        raise ValueError(f"unknown mode {mode!r}")
    cfg = cfg or SamplerConfig(n_ways=3, k_shots=1, dropout_prob=0.5, seed=seed)
    rng = np.random.default_rng(seed)
    eligible = [rec for rec in ds.records if rec.annotations]
    if not eligible:
        raise SamplingError("dataset has no annotated images")
    total = 0
    for _ in range(n_episodes):
        query = eligible[int(rng.integers(len(eligible)))]
        if mode == "binary":
            ann = query.annotations[int(rng.integers(len(query.annotations)))]
            total += sum(1 for a in query.annotations if a.class_id == ann.class_id)
            continue
        query_classes = sorted(query.class_ids)
        coins = rng.random(len(query_classes))
        survivors = {c for c, u in zip(query_classes, coins) if u >= cfg.dropout_prob}
        if survivors and len(survivors) > cfg.n_ways:
            ordered = sorted(survivors)
            picked = rng.choice(len(ordered), size=cfg.n_ways, replace=False)
            survivors = {ordered[int(i)] for i in picked}
        total += sum(1 for a in query.annotations if a.class_id in survivors)
    return total / n_episodes
