"""Command line front end.

Subcommands: gen-shapes, episodes, metrics, train, test, ablate, plot.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import (
    ABLATION_PRESETS,
    RunConfig,
    ablation_preset,
    config_hash,
    load_config,
    save_config,
)
from .datamodel import (
    ConfigurationError,
    DatasetParseError,
    DatasetValidationError,
    default_class_specs,
    generate_shapes_dataset,
    load_dataset,
    save_dataset,
)
from .evaluation import (
    build_report,
    dataset_ground_truths,
    evaluate_split,
    format_report,
    load_detections_jsonl,
    save_detections_jsonl,
)
from .sampler import SKIP, SamplerConfig, sample_episode_plan


def _gt_path(path: Path) -> Path:
    return path / "annotations.json" if path.is_dir() else path


def cmd_gen_shapes(args) -> int:
    ds = generate_shapes_dataset(
        seed=args.seed,
        n_images=args.n_images,
        class_specs=default_class_specs(),
        image_size=args.image_size,
    )
    out = save_dataset(ds, args.out)
    n_anns = sum(len(r.annotations) for r in ds.records)
    print(f"wrote {len(ds.records)} images, {n_anns} annotations to {out}")
    return 0


def cmd_episodes(args) -> int:
    cfg = load_config(args.config)
    from .harness import build_benchmark

    bench = build_benchmark(cfg)
    sampler_cfg = SamplerConfig(
        n_ways=cfg.sampler.n_ways,
        k_shots=cfg.sampler.k_shots,
        dropout_prob=cfg.sampler.dropout_prob,
        seed=cfg.seed,
    )
    import numpy as np

    rng = np.random.default_rng(cfg.seed)
    eligible = [rec for rec in bench.train.records if rec.annotations]
    emitted = skipped = 0
    while emitted < args.dry_run:
        query = eligible[int(rng.integers(len(eligible)))]
        plan = sample_episode_plan(bench.train, query, sampler_cfg, rng)
        if plan is SKIP:
            skipped += 1
            continue
        print(json.dumps(plan.as_dict()))
        emitted += 1
    print(f"# {emitted} episodes, {skipped} skipped", file=sys.stderr)
    return 0


def cmd_metrics(args) -> int:
    gt = load_dataset(_gt_path(Path(args.gt)), load_pixels=False)
    base_dets = load_detections_jsonl(args.base)
    novel_dets = load_detections_jsonl(args.novel)
    base_m = evaluate_split(base_dets, dataset_ground_truths(gt, gt.base_class_ids))
    novel_m = evaluate_split(novel_dets, dataset_ground_truths(gt, gt.novel_class_ids))
    report = build_report(base_m, novel_m)
    print(format_report(report))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        from .plots import plot_pr_curves

        names = {cid: info.name for cid, info in gt.class_table.items()}
        plot_pr_curves(base_dets, dataset_ground_truths(gt, gt.base_class_ids),
                       out / "pr_base.png", class_names=names)
        plot_pr_curves(novel_dets, dataset_ground_truths(gt, gt.novel_class_ids),
                       out / "pr_novel.png", class_names=names)
        (out / "report.json").write_text(json.dumps(report.as_dict(), indent=2) + "\n")
        print(f"figures and report.json written to {out}", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    from .harness import meta_train

    out_dir = Path(args.out) if args.out else Path("runs") / config_hash(cfg)[:12]
    state = meta_train(cfg, out_dir=out_dir)
    last = state.last_loss
    print(f"trained {state.episode} episodes; final loss "
          f"{'n/a' if last is None else f'{last:.4f}'}")
    print(f"checkpoint: {out_dir / 'ckpt_final.pt'}")
    return 0


def cmd_test(args) -> int:
    cfg = load_config(args.config)
    from .harness import (
        _AnchorCache,
        build_benchmark,
        class_prototypes,
        detect_dataset,
        finetune,
        load_checkpoint,
        meta_test,
    )

    state = load_checkpoint(args.checkpoint, cfg)
    bench = build_benchmark(cfg)
    report = meta_test(state, cfg, bench)
    print(format_report(report))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        anchors = _AnchorCache(cfg.network.n_anchors_per_pixel)
        state.detector.eval()
        base_protos = class_prototypes(state.detector, bench.support, bench.test.base_class_ids)
        base_dets = detect_dataset(state.detector, bench.test, base_protos, anchors)
        tuned = finetune(state, cfg, bench)
        novel_protos = class_prototypes(tuned, bench.support, bench.test.novel_class_ids)
        novel_dets = detect_dataset(tuned, bench.test, novel_protos, anchors)
        save_detections_jsonl(base_dets, out / "base_dets.jsonl")
        save_detections_jsonl(novel_dets, out / "novel_dets.jsonl")
        save_dataset(bench.test, out / "test_data")
        (out / "report.json").write_text(json.dumps(report.as_dict(), indent=2) + "\n")
        from .plots import plot_pr_curves

        names = {cid: info.name for cid, info in bench.test.class_table.items()}
        plot_pr_curves(base_dets, dataset_ground_truths(bench.test, bench.test.base_class_ids),
                       out / "pr_base.png", class_names=names)
        plot_pr_curves(novel_dets, dataset_ground_truths(bench.test, bench.test.novel_class_ids),
                       out / "pr_novel.png", class_names=names)
        print(f"detections, figures and report.json written to {out}", file=sys.stderr)
    return 0


def cmd_ablate(args) -> int:
    from .harness import format_ablation_table, run_ablation

    base = load_config(args.config) if args.config else RunConfig()
    seeds = tuple(int(s) for s in args.seeds.split(","))
    presets = ABLATION_PRESETS if args.preset == "all" else (args.preset,)
    rows = run_ablation(presets=presets, base=base, seeds=seeds,
                        out_dir=args.out)
    print(format_ablation_table(rows))
    if args.out:
        from .plots import plot_ablation

        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        plot_ablation(rows, out / "ablation.png")
        print(f"figure written to {out / 'ablation.png'}", file=sys.stderr)
    return 0


def cmd_plot(args) -> int:
    from .plots import plot_loss_curves, plot_pr_curves, read_loss_log

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = read_loss_log(args.log)
    if not entries:
        print("loss log is empty", file=sys.stderr)
        return 2
    written = [plot_loss_curves(entries, out / "loss.png")]
    if args.dets and args.gt:
        gt = load_dataset(_gt_path(Path(args.gt)), load_pixels=False)
        dets = load_detections_jsonl(args.dets)
        names = {cid: info.name for cid, info in gt.class_table.items()}
        written.append(plot_pr_curves(dets, dataset_ground_truths(gt),
                                      out / "pr.png", class_names=names))
    print("wrote " + ", ".join(str(p) for p in written))
    return 0


def cmd_init_config(args) -> int:
    cfg = ablation_preset(args.preset) if args.preset else RunConfig()
    save_config(cfg, args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fsrn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-shapes", help="generate a synthetic shapes dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-images", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=128)
    p.set_defaults(func=cmd_gen_shapes)

    p = sub.add_parser("episodes", help="print sampled episode plans as JSON lines")
    p.add_argument("--config", required=True)
    p.add_argument("--dry-run", type=int, required=True, metavar="N")
    p.set_defaults(func=cmd_episodes)

    p = sub.add_parser("metrics", help="score detection files against groundtruth")
    p.add_argument("--base", required=True, help="base-split detections (JSON lines)")
    p.add_argument("--novel", required=True, help="novel-split detections (JSON lines)")
    p.add_argument("--gt", required=True, help="annotation JSON or dataset directory")
    p.add_argument("--out", help="directory for PR figures and report.json")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("train", help="meta-train on the synthetic benchmark")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="run directory (default runs/<config hash>)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("test", help="meta-test a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="directory for detections, figures, report.json")
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("ablate", help="run ablation presets")
    p.add_argument("--preset", required=True, choices=ABLATION_PRESETS + ("all",))
    p.add_argument("--config", help="base config JSON (defaults apply otherwise)")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--out", help="directory for run logs and the summary figure")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render loss curves (and PR curves) from a run log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dets", help="detections JSON lines for a PR curve")
    p.add_argument("--gt", help="annotation JSON for the PR curve")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("init-config", help="write a default config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=ABLATION_PRESETS)
    p.set_defaults(func=cmd_init_config)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, DatasetParseError, DatasetValidationError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
