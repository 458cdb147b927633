"""End-to-end checks of the command line front end (in-process)."""

import json

import numpy as np
import pytest

from fsrn.cli import main
from fsrn.config import RunConfig, load_config
from fsrn.datamodel import (default_class_specs, generate_shapes_dataset,
                            load_dataset, save_dataset)
from fsrn.evaluation import Detection, save_detections_jsonl


MICRO = {
    "seed": 0,
    "data": {"image_size": 64, "n_train_images": 14, "n_test_images": 8,
             "min_instance": 16, "max_instance": 28},
    "network": {"n_conv_layers": 2, "n_channels": 16},
    "run": {"train_episodes": 4, "finetune_episodes": 2, "checkpoint_every": 2},
    "sampler": {"n_ways": 2, "k_shots": 2, "dropout_prob": 0.0},
}


@pytest.fixture
def micro_cfg_path(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(MICRO))
    return str(path)


def test_gen_shapes_writes_loadable_dataset(tmp_path, capsys):
    out = tmp_path / "ds"
    rc = main(["gen-shapes", "--seed", "3", "--n-images", "5", "--out", str(out)])
    assert rc == 0
    assert "wrote 5 images" in capsys.readouterr().out
    ds = load_dataset(out / "annotations.json")
    assert len(ds.records) == 5
    assert all(r.pixels.shape == (128, 128, 3) for r in ds.records)


def test_gen_shapes_seed_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["gen-shapes", "--seed", "9", "--n-images", "4", "--out", str(a)])
    main(["gen-shapes", "--seed", "9", "--n-images", "4", "--out", str(b)])
    assert (a / "annotations.json").read_text() == (b / "annotations.json").read_text()


def test_episodes_dry_run_prints_plans(micro_cfg_path, capsys):
    rc = main(["episodes", "--config", micro_cfg_path, "--dry-run", "3"])
    assert rc == 0
    out, err = capsys.readouterr()
    lines = [l for l in out.splitlines() if l.strip()]
    assert len(lines) == 3
    for line in lines:
        plan = json.loads(line)
        assert set(plan) == {"query_image_id", "n_ways", "k_shots",
                             "positive_classes", "negative_classes",
                             "support_ann_ids"}
        assert plan["k_shots"] == 2
    assert "episodes" in err


@pytest.mark.filterwarnings("ignore::UserWarning")
def test_metrics_from_files(tmp_path, capsys):
    ds = generate_shapes_dataset(seed=11, n_images=6,
                                 class_specs=default_class_specs(), image_size=96)
    gt_dir = save_dataset(ds, tmp_path / "gt")
    base, novel = [], []
    for rec in ds.records:
        for ann in rec.annotations:
            det = Detection(image_id=rec.image_id, class_id=ann.class_id,
                            bbox=ann.bbox, score=0.9)
            (base if ann.class_id in ds.base_class_ids else novel).append(det)
    base_p, novel_p = tmp_path / "base.jsonl", tmp_path / "novel.jsonl"
    save_detections_jsonl(base, base_p)
    save_detections_jsonl(novel, novel_p)
    fig_dir = tmp_path / "figs"
    rc = main(["metrics", "--base", str(base_p), "--novel", str(novel_p),
               "--gt", str(gt_dir), "--out", str(fig_dir)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "bAP50" in out and "nAP50" in out and "PT" in out
    # detections copied from groundtruth must score perfectly
    report = json.loads((fig_dir / "report.json").read_text())
    assert report["bAP50"] == pytest.approx(1.0)
    assert report["nAP50"] == pytest.approx(1.0)
    assert (fig_dir / "pr_base.png").exists()
    assert (fig_dir / "pr_novel.png").exists()


@pytest.mark.filterwarnings("ignore::UserWarning")
def test_train_then_test_roundtrip(micro_cfg_path, tmp_path, capsys):
    run_dir = tmp_path / "run"
    rc = main(["train", "--config", micro_cfg_path, "--out", str(run_dir)])
    assert rc == 0
    assert "trained 4 episodes" in capsys.readouterr().out
    ckpt = run_dir / "ckpt_final.pt"
    assert ckpt.exists() and ckpt.with_suffix(".pt.json").exists()
    log_lines = (run_dir / "run.log").read_text().splitlines()
    assert len(log_lines) == 4

    out_dir = tmp_path / "eval"
    rc = main(["test", "--checkpoint", str(ckpt), "--config", micro_cfg_path,
               "--out", str(out_dir)])
    assert rc == 0
    header = capsys.readouterr().out
    assert "bAP" in header and "RT" in header
    for name in ("base_dets.jsonl", "novel_dets.jsonl", "report.json",
                 "pr_base.png", "pr_novel.png"):
        assert (out_dir / name).exists(), name


def test_plot_renders_loss_curves(tmp_path):
    log = tmp_path / "run.log"
    rng = np.random.default_rng(0)
    with open(log, "w") as fh:
        for i in range(60):
            entry = {"episode": i + 1, "total": float(2.0 / (i + 1) + 0.1),
                     "focal": float(rng.uniform(0.1, 1.0)), "loc": 0.2,
                     "max_margin": 0.05, "lambda": 0.1,
                     "n_foreground": 12, "mm_degenerate": False}
            fh.write(json.dumps(entry) + "\n")
    out = tmp_path / "figs"
    rc = main(["plot", "--log", str(log), "--out", str(out)])
    assert rc == 0
    assert (out / "loss.png").exists()


def test_plot_empty_log_fails(tmp_path, capsys):
    log = tmp_path / "run.log"
    log.write_text("")
    rc = main(["plot", "--log", str(log), "--out", str(tmp_path / "f")])
    assert rc == 2
    assert "empty" in capsys.readouterr().err


def test_init_config_default_roundtrip(tmp_path):
    path = tmp_path / "cfg.json"
    rc = main(["init-config", "--out", str(path)])
    assert rc == 0
    assert load_config(path) == RunConfig()


def test_init_config_preset_differs(tmp_path):
    path = tmp_path / "c.json"
    assert main(["init-config", "--out", str(path), "--preset", "A"]) == 0
    cfg = load_config(path)
    assert not cfg.sampler.multiway
    assert cfg != RunConfig()


def test_missing_config_reports_error(tmp_path, capsys):
    rc = main(["episodes", "--config", str(tmp_path / "nope.json"),
               "--dry-run", "1"])
    assert rc == 2
    assert capsys.readouterr().err.startswith("error:")


def test_corrupt_detections_report_error(tmp_path, capsys):
    ds = generate_shapes_dataset(seed=1, n_images=2,
                                 class_specs=default_class_specs(), image_size=96)
    gt_dir = save_dataset(ds, tmp_path / "gt")
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"image_id": 1}\n')
    rc = main(["metrics", "--base", str(bad), "--novel", str(bad),
               "--gt", str(gt_dir)])
    assert rc == 2
    assert "error:" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::UserWarning")
def test_ablate_single_preset(micro_cfg_path, capsys):
    rc = main(["ablate", "--preset", "A", "--config", micro_cfg_path,
               "--seeds", "0"])
    assert rc == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].split()[0] == "config"
    assert any(line.split()[:1] == ["A"] for line in out.splitlines()[1:])
