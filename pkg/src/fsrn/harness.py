"""Training and evaluation orchestration: benchmark construction, the
episodic training loop, checkpointing, meta-test adaptation, and the
ablation/receptive-field studies."""

from __future__ import annotations

import base64
import copy
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .adaptation import (
    MsdaConfig,
    flip_horizontal,
    gaussian_prototype,
    metatest_alpha,
    msda_scale,
    msda_support_sizes,
)
from .anchors import AnchorSet, decode_box, generate_anchors, match_anchors
from .config import (
    ABLATION_PRESETS,
    RunConfig,
    ablation_preset,
    config_hash,
    rf_sweep_configs,
    train_signature,
)
from .datamodel import (
    ConfigurationError,
    DetectionDataset,
    ImageRecord,
    default_class_specs,
    extract_support_crop,
    generate_shapes_dataset,
    generate_support_images,
)
from .evaluation import (
    SCORE_FLOOR,
    Detection,
    EvalReport,
    SplitMetrics,
    build_report,
    dataset_ground_truths,
    evaluate_split,
    nms,
)
from .losses import FocalParams, LossBreakdown, total_loss, focal_loss, max_margin_loss, smooth_l1
from .network import (
    PYRAMID_LEVELS,
    PYRAMID_STRIDES,
    ClassPrototype,
    FewShotDetector,
    crops_to_tensor,
    image_to_tensor,
    support_level,
)
from .sampler import (
    SKIP,
    EpisodeTask,
    SamplerConfig,
    SamplingError,
    materialize_episode,
    sample_binary_episode_plan,
    sample_episode_plan,
)

# fixed offsets carving independent rng streams out of one run seed
_STREAM_TRAIN_DATA = 1
_STREAM_TEST_DATA = 2
_STREAM_SUPPORT_DATA = 3
_STREAM_EPISODES = 4
_STREAM_FINETUNE = 5
_STREAM_MSDA = 6
_STREAM_GP = 7
_STREAM_TORCH = 8

PRE_NMS_PER_LEVEL = 200


def _stream_seed(seed: int, stream: int) -> int:
    return seed * 100 + stream


@dataclass
class Benchmark:
    """Synthetic splits: base-only training images, mixed held-out test
    images, and a K-shot support pool covering every class."""

    train: DetectionDataset
    test: DetectionDataset
    support: DetectionDataset


def build_benchmark(cfg: RunConfig) -> Benchmark:
    specs = default_class_specs()
    base_ids = [i + 1 for i, s in enumerate(specs) if s.split == "base"]
    all_ids = list(range(1, len(specs) + 1))
    size_range = (cfg.data.min_instance, cfg.data.max_instance)
    train = generate_shapes_dataset(
        seed=_stream_seed(cfg.seed, _STREAM_TRAIN_DATA),
        n_images=cfg.data.n_train_images,
        class_specs=specs,
        image_size=cfg.data.image_size,
        class_pool=base_ids,
        size_range=size_range,
    )
    test = generate_shapes_dataset(
        seed=_stream_seed(cfg.seed, _STREAM_TEST_DATA),
        n_images=cfg.data.n_test_images,
        class_specs=specs,
        image_size=cfg.data.image_size,
        class_pool=all_ids,
        size_range=size_range,
    )
    support = generate_support_images(
        seed=_stream_seed(cfg.seed, _STREAM_SUPPORT_DATA),
        class_specs=specs,
        focus_class_ids=all_ids,
        k=cfg.sampler.k_shots,
        image_size=cfg.data.image_size,
        size_range=size_range,
    )
    return Benchmark(train=train, test=test, support=support)


def pad_to_multiple(pixels: np.ndarray, multiple: int = 32) -> np.ndarray:
    h, w = pixels.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return pixels
    return np.pad(pixels, ((0, ph), (0, pw), (0, 0)))


class _AnchorCache:
    def __init__(self, n_per_pixel: int):
        self.n_per_pixel = n_per_pixel
        self._sets: dict[tuple[int, int], AnchorSet] = {}

    def for_image(self, h: int, w: int) -> AnchorSet:
        key = (h, w)
        if key not in self._sets:
            shapes = {name: (h // PYRAMID_STRIDES[name], w // PYRAMID_STRIDES[name])
                      for name in PYRAMID_LEVELS}
            self._sets[key] = generate_anchors(shapes, PYRAMID_STRIDES, self.n_per_pixel)
        return self._sets[key]


def _flat_logits(level_map: torch.Tensor) -> torch.Tensor:
    """(N, A, H, W) -> (N, H*W*A), position-major to match the anchor order."""
    n, a, h, w = level_map.shape
    return level_map.permute(0, 2, 3, 1).reshape(n, h * w * a)


def _flat_deltas(level_map: torch.Tensor) -> torch.Tensor:
    """(1, 4A, H, W) -> (H*W*A, 4); channels are laid out as A blocks of 4."""
    _, c, h, w = level_map.shape
    a = c // 4
    return level_map.reshape(a, 4, h, w).permute(2, 3, 0, 1).reshape(h * w * a, 4)


def _episode_order(task: EpisodeTask) -> tuple[int, ...]:
    return tuple(task.positive_classes) + tuple(task.negative_classes)


def episode_shot_vectors(
    detector: FewShotDetector,
    task: EpisodeTask,
    msda_cfg: MsdaConfig | None = None,
    msda_rng: np.random.Generator | None = None,
) -> dict[int, tuple[torch.Tensor, str]]:
    """Per class: (K, C) pooled support vectors and the routed level. Size
    jitter, when on, perturbs only the routing sizes; crops are already
    square close-ups."""
    out: dict[int, tuple[torch.Tensor, str]] = {}
    for cid in _episode_order(task):
        crops = task.support[cid]
        sizes = [c.source_size for c in crops]
        if msda_cfg is not None and msda_rng is not None:
            sizes, _ = msda_support_sizes(sizes, msda_cfg, msda_rng)
        level = support_level(sizes)
        vecs = detector.shot_vectors(crops_to_tensor(crops), level)
        out[cid] = (vecs, level)
    return out


def _prototypes_from_vectors(
    vectors: dict[int, tuple[torch.Tensor, str]],
    gp_rng: np.random.Generator | None = None,
) -> list[ClassPrototype]:
    protos = []
    for cid, (vecs, level) in vectors.items():
        if gp_rng is not None:
            protos.append(gaussian_prototype(cid, vecs, level, gp_rng))
        else:
            protos.append(ClassPrototype(class_id=cid, vector=vecs.mean(dim=0), source_level=level))
    return protos


def episode_loss(
    detector: FewShotDetector,
    task: EpisodeTask,
    cfg: RunConfig,
    anchors: _AnchorCache,
    alpha: float | None = None,
    gp_rng: np.random.Generator | None = None,
    msda_rng: np.random.Generator | None = None,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Forward one episode and assemble the detection objective."""
    msda_cfg = MsdaConfig(log_range=cfg.msda.log_range, alpha_train=cfg.focal.alpha) \
        if msda_rng is not None else None
    query = task.query
    if msda_rng is not None:
        query, _ = msda_scale(query, msda_cfg, msda_rng)

    pixels = pad_to_multiple(query.pixels)
    pyramid = detector.pyramid(image_to_tensor(pixels))
    anchor_set = anchors.for_image(*pixels.shape[:2])

    vectors = episode_shot_vectors(detector, task, msda_cfg, msda_rng)
    protos = _prototypes_from_vectors(vectors, gp_rng)
    cls_maps = detector.classify(pyramid, protos)
    loc_maps = detector.localize(pyramid)

    logits = torch.cat([_flat_logits(cls_maps[name]) for name in PYRAMID_LEVELS], dim=1)
    deltas = torch.cat([_flat_deltas(loc_maps[name]) for name in PYRAMID_LEVELS], dim=0)
    probs = torch.sigmoid(logits)

    order = _episode_order(task)
    labels = np.zeros((len(order), anchor_set.n_anchors), dtype=np.int8)
    loc_preds, loc_targets = [], []
    for row, cid in enumerate(order):
        gts = np.array([a.bbox for a in query.annotations if a.class_id == cid],
                       dtype=np.float64).reshape(-1, 4)
        match = match_anchors(anchor_set, gts)
        labels[row] = match.labels
        fg = np.flatnonzero(match.foreground)
        if fg.size:
            idx = torch.from_numpy(fg)
            loc_preds.append(deltas[idx])
            loc_targets.append(torch.from_numpy(match.regression_targets[fg]))

    labels_t = torch.from_numpy(labels)
    valid = labels_t >= 0
    n_fg = int((labels_t == 1).sum())
    params = FocalParams(alpha=cfg.focal.alpha if alpha is None else alpha,
                         gamma=cfg.focal.gamma)
    focal = focal_loss(probs[valid], (labels_t[valid] == 1).float(), params,
                       reduction="foreground_mean", n_foreground=n_fg)

    if loc_preds:
        loc = smooth_l1(torch.cat(loc_preds), torch.cat(loc_targets).to(deltas.dtype))
    else:
        loc = torch.zeros((), dtype=deltas.dtype)

    if cfg.loss.max_margin and len(vectors) >= 2:
        mm = max_margin_loss({cid: vecs for cid, (vecs, _) in vectors.items()})
    else:
        mm = torch.zeros(())
    loss, breakdown = total_loss(focal, loc, mm, cfg.loss.lambda_mm)
    breakdown = replace(breakdown, n_foreground=n_fg)
    return loss, breakdown


def _draw_task(
    ds: DetectionDataset,
    cfg: RunConfig,
    rng: np.random.Generator,
    dropout_prob: float | None = None,
    flip_rng: np.random.Generator | None = None,
) -> EpisodeTask:
    """Draw query images until a non-skipped episode materializes."""
    eligible = [rec for rec in ds.records if rec.annotations]
    if not eligible:
        raise SamplingError("no annotated images to sample from")
    p_drop = cfg.sampler.dropout_prob if dropout_prob is None else dropout_prob
    sampler_cfg = SamplerConfig(n_ways=cfg.sampler.n_ways, k_shots=cfg.sampler.k_shots,
                                dropout_prob=p_drop, seed=0)
    while True:
        query = eligible[int(rng.integers(len(eligible)))]
        if cfg.sampler.multiway:
            plan = sample_episode_plan(ds, query, sampler_cfg, rng)
            if plan is SKIP:
                continue
        else:
            classes = sorted(set(query.class_ids))
            cid = int(classes[int(rng.integers(len(classes)))])
            plan = sample_binary_episode_plan(ds, query, cid, cfg.sampler.k_shots, rng)
        task = materialize_episode(ds, plan)
        if flip_rng is not None and flip_rng.random() < 0.5:
            task = EpisodeTask(
                query=flip_horizontal(task.query),
                support=task.support,
                n_ways=task.n_ways,
                positive_classes=task.positive_classes,
                negative_classes=task.negative_classes,
            )
        return task


@dataclass
class RunState:
    """Mutable training state; everything needed to resume bit-exactly."""

    cfg: RunConfig
    detector: FewShotDetector
    optimizer: torch.optim.SGD
    episode: int = 0
    loss_history: list[dict] = field(default_factory=list)
    episode_rng: np.random.Generator | None = None
    flip_rng: np.random.Generator | None = None

    @property
    def last_loss(self) -> float | None:
        return self.loss_history[-1]["total"] if self.loss_history else None


def _lr_at(cfg: RunConfig, episode: int, scale: float = 1.0) -> float:
    decays = sum(1 for e in cfg.optim.decay_at if episode >= e)
    return cfg.optim.lr * (cfg.optim.decay_factor ** decays) * scale


def init_state(cfg: RunConfig) -> RunState:
    torch.manual_seed(_stream_seed(cfg.seed, _STREAM_TORCH))
    detector = FewShotDetector(cfg.network)
    optimizer = torch.optim.SGD(detector.parameters(), lr=cfg.optim.lr,
                                momentum=cfg.optim.momentum)
    return RunState(
        cfg=cfg,
        detector=detector,
        optimizer=optimizer,
        episode_rng=np.random.default_rng(_stream_seed(cfg.seed, _STREAM_EPISODES)),
        flip_rng=np.random.default_rng(_stream_seed(cfg.seed, _STREAM_EPISODES) + 50),
    )


def save_checkpoint(state: RunState, path) -> None:
    """Weight/optimizer blob plus a JSON sidecar carrying the config hash,
    episode counter, and rng states."""
    path = Path(path)
    torch.save({"model": state.detector.state_dict(),
                "optimizer": state.optimizer.state_dict()}, path)
    sidecar = {
        "config_hash": config_hash(state.cfg),
        "episode": state.episode,
        "rng_state": state.episode_rng.bit_generator.state,
        "flip_rng_state": state.flip_rng.bit_generator.state,
        "torch_rng": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode(),
        "loss_history": state.loss_history,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))


def load_checkpoint(path, cfg: RunConfig) -> RunState:
    path = Path(path)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if not path.exists() or not sidecar_path.exists():
        raise ConfigurationError(f"checkpoint {path} or its sidecar is missing")
    sidecar = json.loads(sidecar_path.read_text())
    if sidecar["config_hash"] != config_hash(cfg):
        raise ConfigurationError("checkpoint was written under a different config")
    state = init_state(cfg)
    blob = torch.load(path, weights_only=True)
    state.detector.load_state_dict(blob["model"])
    state.optimizer.load_state_dict(blob["optimizer"])
    state.episode = int(sidecar["episode"])
    state.loss_history = list(sidecar["loss_history"])
    state.episode_rng.bit_generator.state = sidecar["rng_state"]
    state.flip_rng.bit_generator.state = sidecar["flip_rng_state"]
    torch.set_rng_state(torch.frombuffer(
        bytearray(base64.b64decode(sidecar["torch_rng"])), dtype=torch.uint8))
    return state


def meta_train(
    cfg: RunConfig,
    out_dir=None,
    state: RunState | None = None,
    benchmark: Benchmark | None = None,
) -> RunState:
    """Episodic base training. Resumable: pass a loaded RunState to continue
    exactly where a checkpoint left off."""
    bench = benchmark if benchmark is not None else build_benchmark(cfg)
    if state is None:
        state = init_state(cfg)
    anchors = _AnchorCache(cfg.network.n_anchors_per_pixel)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "run.log", "a")
    try:
        state.detector.train()
        for episode in range(state.episode, cfg.run.train_episodes):
            task = _draw_task(bench.train, cfg, state.episode_rng, flip_rng=state.flip_rng)
            lr = _lr_at(cfg, episode)
            for group in state.optimizer.param_groups:
                group["lr"] = lr
            loss, breakdown = episode_loss(state.detector, task, cfg, anchors)
            state.optimizer.zero_grad()
            loss.backward()
            state.optimizer.step()
            state.episode = episode + 1
            entry = {"episode": state.episode, **breakdown.as_dict()}
            state.loss_history.append(entry)
            if log_fh is not None:
                log_fh.write(json.dumps(entry) + "\n")
            if out_dir is not None and state.episode % cfg.run.checkpoint_every == 0:
                save_checkpoint(state, out_dir / f"ckpt_{state.episode:06d}.pt")
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_dir is not None:
        save_checkpoint(state, out_dir / "ckpt_final.pt")
    return state


def class_prototypes(
    detector: FewShotDetector,
    support: DetectionDataset,
    class_ids,
) -> list[ClassPrototype]:
    """Deterministic mean prototypes from a support pool's crops."""
    by_class = support.annotations_by_class()
    protos = []
    for cid in sorted(class_ids):
        pairs = by_class.get(cid, [])
        if not pairs:
            raise ConfigurationError(f"support pool has no shots for class {cid}")
        crops = [extract_support_crop(rec, ann) for rec, ann in pairs]
        sizes = [c.source_size for c in crops]
        level = support_level(sizes)
        vecs = detector.shot_vectors(crops_to_tensor(crops), level)
        protos.append(ClassPrototype(class_id=cid, vector=vecs.mean(dim=0), source_level=level))
    return protos


def _clip_box(box, width: float, height: float):
    x, y, w, h = box
    x0 = min(max(x, 0.0), width)
    y0 = min(max(y, 0.0), height)
    x1 = min(max(x + w, 0.0), width)
    y1 = min(max(y + h, 0.0), height)
    return (x0, y0, x1 - x0, y1 - y0)


def detect_image(
    detector: FewShotDetector,
    record: ImageRecord,
    prototypes: list[ClassPrototype],
    anchors: _AnchorCache,
    score_floor: float = SCORE_FLOOR,
    pre_nms_per_level: int = PRE_NMS_PER_LEVEL,
) -> list[Detection]:
    """Raw (un-suppressed) detections for one image."""
    h, w = record.pixels.shape[:2]
    pixels = pad_to_multiple(record.pixels)
    with torch.no_grad():
        pyramid = detector.pyramid(image_to_tensor(pixels))
        cls_maps = detector.classify(pyramid, prototypes)
        loc_maps = detector.localize(pyramid)
    anchor_set = anchors.for_image(*pixels.shape[:2])
    out: list[Detection] = []
    for name in PYRAMID_LEVELS:
        probs = torch.sigmoid(_flat_logits(cls_maps[name])).numpy()
        deltas = _flat_deltas(loc_maps[name]).numpy()
        level_anchors = anchor_set.levels[name]
        boxes = decode_box(level_anchors, deltas)
        for row, proto in enumerate(prototypes):
            scores = probs[row]
            keep = np.flatnonzero(scores >= score_floor)
            if keep.size > pre_nms_per_level:
                keep = keep[np.argsort(-scores[keep], kind="stable")[:pre_nms_per_level]]
            for i in keep:
                box = _clip_box(boxes[i], w, h)
                if box[2] < 1.0 or box[3] < 1.0:
                    continue
                out.append(Detection(image_id=record.image_id,
                                     class_id=proto.class_id,
                                     bbox=box,
                                     score=float(scores[i])))
    return out


def detect_dataset(
    detector: FewShotDetector,
    ds: DetectionDataset,
    prototypes: list[ClassPrototype],
    anchors: _AnchorCache | None = None,
) -> list[Detection]:
    anchors = anchors if anchors is not None else _AnchorCache(detector.cfg.n_anchors_per_pixel)
    was_training = detector.training
    detector.eval()
    dets: list[Detection] = []
    for rec in ds.records:
        dets.extend(detect_image(detector, rec, prototypes, anchors))
    if was_training:
        detector.train()
    return nms(dets)


def finetune(
    state: RunState,
    cfg: RunConfig,
    benchmark: Benchmark,
) -> FewShotDetector:
    """Adapt a copy of the trained detector on the K-shot support pool.

    Class dropout is off here (queries carry one class); size jitter and the
    shifted focal alpha apply when MSDA is enabled, Gaussian prototype
    sampling when GP is enabled.
    """
    detector = copy.deepcopy(state.detector)
    detector.train()
    optimizer = torch.optim.SGD(detector.parameters(),
                                lr=cfg.optim.lr * cfg.run.finetune_lr_scale,
                                momentum=cfg.optim.momentum)
    rng = np.random.default_rng(_stream_seed(cfg.seed, _STREAM_FINETUNE))
    msda_rng = np.random.default_rng(_stream_seed(cfg.seed, _STREAM_MSDA)) if cfg.msda.enabled else None
    gp_rng = np.random.default_rng(_stream_seed(cfg.seed, _STREAM_GP)) if cfg.gp.enabled else None
    alpha = metatest_alpha(cfg.focal.alpha) if cfg.msda.enabled else None
    anchors = _AnchorCache(cfg.network.n_anchors_per_pixel)
    for _ in range(cfg.run.finetune_episodes):
        task = _draw_task(benchmark.support, cfg, rng, dropout_prob=0.0)
        loss, _ = episode_loss(detector, task, cfg, anchors,
                               alpha=alpha, gp_rng=gp_rng, msda_rng=msda_rng)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    detector.eval()
    return detector


def meta_test(
    state: RunState,
    cfg: RunConfig | None = None,
    benchmark: Benchmark | None = None,
) -> EvalReport:
    """Frozen-weight base evaluation plus finetuned novel evaluation.

    Base metrics always come from the meta-trained checkpoint with mean
    prototypes, so meta-test-only features cannot move them.
    """
    cfg = cfg if cfg is not None else state.cfg
    bench = benchmark if benchmark is not None else build_benchmark(cfg)
    base_ids = bench.test.base_class_ids
    novel_ids = bench.test.novel_class_ids
    if not all(bench.support.annotations_by_class().get(c) for c in novel_ids):
        raise ConfigurationError("support pool is missing novel-class shots")

    anchors = _AnchorCache(cfg.network.n_anchors_per_pixel)
    state.detector.eval()
    base_protos = class_prototypes(state.detector, bench.support, base_ids)
    base_dets = detect_dataset(state.detector, bench.test, base_protos, anchors)
    base_metrics = evaluate_split(base_dets, dataset_ground_truths(bench.test, base_ids))

    tuned = finetune(state, cfg, bench)
    novel_protos = class_prototypes(tuned, bench.support, novel_ids)
    novel_dets = detect_dataset(tuned, bench.test, novel_protos, anchors)
    novel_metrics = evaluate_split(novel_dets, dataset_ground_truths(bench.test, novel_ids))
    return build_report(base_metrics, novel_metrics)


def evaluate_base_frozen(state: RunState, benchmark: Benchmark | None = None) -> SplitMetrics:
    """Base-split metrics of the trained weights alone (no adaptation)."""
    bench = benchmark if benchmark is not None else build_benchmark(state.cfg)
    state.detector.eval()
    protos = class_prototypes(state.detector, bench.support, bench.test.base_class_ids)
    dets = detect_dataset(state.detector, bench.test, protos)
    return evaluate_split(dets, dataset_ground_truths(bench.test, bench.test.base_class_ids))


@dataclass
class AblationRow:
    """One configuration's aggregate over seeds, plus the per-seed reports."""

    name: str
    bAP: float
    bAP50: float
    nAP: float
    nAP50: float
    PT: float | None
    PT50: float | None
    RT: float | None
    reports: list[EvalReport] = field(default_factory=list)


def _aggregate_reports(name: str, reports: list[EvalReport]) -> AblationRow:
    def mean(attr):
        return float(np.mean([getattr(r, attr) for r in reports]))

    bap, bap50 = mean("bAP"), mean("bAP50")
    nap, nap50 = mean("nAP"), mean("nAP50")
    bar, nar = mean("bAR"), mean("nAR")
    return AblationRow(
        name=name,
        bAP=bap, bAP50=bap50, nAP=nap, nAP50=nap50,
        PT=nap / bap if bap > 0 else None,
        PT50=nap50 / bap50 if bap50 > 0 else None,
        RT=nar / bar if bar > 0 else None,
        reports=reports,
    )


def run_configuration(
    cfg: RunConfig,
    seeds=(0,),
    train_cache: dict | None = None,
    out_dir=None,
) -> AblationRow:
    """Train + meta-test one configuration across seeds. The cache maps
    train signatures to trained states so meta-test-only variants reuse
    checkpoints."""
    reports = []
    for seed in seeds:
        seeded = replace(cfg, seed=int(seed))
        key = train_signature(seeded)
        bench = build_benchmark(seeded)
        state = train_cache.get(key) if train_cache is not None else None
        if state is None:
            run_dir = None if out_dir is None else Path(out_dir) / f"train_{key[:12]}"
            state = meta_train(seeded, out_dir=run_dir, benchmark=bench)
            if train_cache is not None:
                train_cache[key] = state
        reports.append(meta_test(state, seeded, bench))
    return _aggregate_reports(f"seed-set {tuple(int(s) for s in seeds)}", reports)


def run_ablation(
    presets=ABLATION_PRESETS,
    base: RunConfig | None = None,
    seeds=(0,),
    out_dir=None,
    train_cache: dict | None = None,
) -> list[AblationRow]:
    """Incremental feature study: each row adds one mechanism."""
    base = base if base is not None else RunConfig()
    cache = train_cache if train_cache is not None else {}
    rows = []
    for name in presets:
        cfg = ablation_preset(name, base)
        row = run_configuration(cfg, seeds=seeds, train_cache=cache, out_dir=out_dir)
        row.name = name
        rows.append(row)
    return rows


def run_rf_sweep(
    base: RunConfig | None = None,
    seeds=(0,),
    out_dir=None,
    train_cache: dict | None = None,
) -> dict[int, AblationRow]:
    """nAP as a function of the classification subnet's post-fusion
    receptive field."""
    base = base if base is not None else RunConfig()
    cache = train_cache if train_cache is not None else {}
    out: dict[int, AblationRow] = {}
    for rf, cfg in rf_sweep_configs(base).items():
        row = run_configuration(cfg, seeds=seeds, train_cache=cache, out_dir=out_dir)
        row.name = f"rf-{rf}"
        out[rf] = row
    return out


def format_ablation_table(rows: list[AblationRow]) -> str:
    header = f"{'config':>8} {'bAP':>6} {'bAP50':>6} {'nAP':>6} {'nAP50':>6} {'PT':>6} {'PT50':>6} {'RT':>6}"
    lines = [header]
    for row in rows:
        cells = [f"{row.name:>8}"]
        for attr in ("bAP", "bAP50", "nAP", "nAP50"):
            cells.append(f"{100.0 * getattr(row, attr):6.1f}")
        for attr in ("PT", "PT50", "RT"):
            value = getattr(row, attr)
            cells.append("   n/a" if value is None else f"{value:6.2f}")
        lines.append(" ".join(cells))
    return "\n".join(lines)
