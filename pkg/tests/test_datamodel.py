"""Dataset generator determinism, ingestion validation and crop round-trips."""

import json

import numpy as np
import pytest

from fsrn.datamodel import (
    Annotation,
    ClassInfo,
    ClassSpec,
    ConfigurationError,
    DatasetParseError,
    DatasetValidationError,
    DetectionDataset,
    ImageRecord,
    background_texture,
    dataset_statistics,
    default_class_specs,
    extract_support_crop,
    generate_shapes_dataset,
    generate_support_images,
    limit_shots,
    load_dataset,
    render_instance,
    resize_bilinear,
    save_dataset,
    validate_dataset,
)


def small_dataset(seed=0, n=6, size=96):
    return generate_shapes_dataset(seed, n, default_class_specs(), size)


def test_default_class_specs_layout():
    specs = default_class_specs()
    assert len(specs) == 12
    assert sum(1 for s in specs if s.split == "novel") == 4
    assert sum(1 for s in specs if s.split == "base") == 8
    # base split still covers every shape and every color
    base = [s for s in specs if s.split == "base"]
    assert {s.shape for s in base} == {"circle", "square", "triangle", "ring"}
    assert {s.color for s in base} == {"red", "green", "blue"}
    assert len({s.name for s in specs}) == 12


def test_generator_determinism_byte_equality():
    a = small_dataset(seed=3)
    b = small_dataset(seed=3)
    assert a.content_hash() == b.content_hash()
    for ra, rb in zip(a.records, b.records):
        assert ra.pixels.tobytes() == rb.pixels.tobytes()
        assert ra.annotations == rb.annotations


def test_generator_seed_sensitivity():
    a = small_dataset(seed=1)
    b = small_dataset(seed=2)
    assert a.content_hash() != b.content_hash()


def test_generator_instance_counts_and_bounds():
    ds = small_dataset(seed=5, n=20, size=128)
    for rec in ds.records:
        assert 1 <= len(rec.annotations) <= 6
        for ann in rec.annotations:
            x, y, w, h = ann.bbox
            assert w > 0 and h > 0
            assert 0 <= x and x + w <= rec.width
            assert 0 <= y and y + h <= rec.height
        assert rec.pixels.min() >= 0.0 and rec.pixels.max() <= 1.0


def test_generator_every_class_appears():
    ds = generate_shapes_dataset(0, 120, default_class_specs(), 128)
    seen = {a.class_id for r in ds.records for a in r.annotations}
    assert seen == set(ds.class_table)


def test_generator_rejects_bad_config():
    specs = default_class_specs()
    with pytest.raises(ConfigurationError):
        generate_shapes_dataset(0, 0, specs, 128)
    with pytest.raises(ConfigurationError):
        generate_shapes_dataset(0, 4, specs[:1], 128)
    with pytest.raises(ConfigurationError):
        generate_shapes_dataset(0, 4, specs, 16)  # cannot hold a 52px instance


def test_pixels_are_read_only():
    ds = small_dataset()
    with pytest.raises(ValueError):
        ds.records[0].pixels[0, 0, 0] = 1.0


def test_dataset_statistics_hand_case():
    pix = np.zeros((48, 48, 3), dtype=np.float32)
    table = {1: ClassInfo("a", "base"), 2: ClassInfo("b", "base")}
    recs = [
        ImageRecord(0, pix, (Annotation(1, (0, 0, 4, 4), 0), Annotation(1, (8, 8, 4, 4), 1))),
        ImageRecord(1, pix, tuple(Annotation(2, (4 * i, 4, 3, 3), 2 + i) for i in range(4))),
    ]
    ds = DetectionDataset(records=recs, class_table=table)
    m_bar, c_bar = dataset_statistics(ds)
    assert m_bar == 3.0
    assert c_bar == 1.0
    with pytest.raises(ValueError):
        dataset_statistics(DetectionDataset(records=[], class_table=table))


def test_dataset_statistics_matches_recount():
    ds = small_dataset(seed=0, n=15)
    m_bar, c_bar = dataset_statistics(ds)
    counts = [len(r.annotations) for r in ds.records]
    classes = [len({a.class_id for a in r.annotations}) for r in ds.records]
    assert m_bar == pytest.approx(sum(counts) / len(counts))
    assert c_bar == pytest.approx(sum(classes) / len(classes))


def test_crop_full_image_is_resized_whole_image():
    ds = small_dataset(seed=2, n=2, size=96)
    rec = ds.records[0]
    ann = Annotation(class_id=rec.annotations[0].class_id, bbox=(0.0, 0.0, 96.0, 96.0), ann_id=99)
    rec2 = ImageRecord(rec.image_id, rec.pixels, (ann,))
    crop = extract_support_crop(rec2, ann, out_size=64)
    np.testing.assert_array_equal(crop.pixels, resize_bilinear(rec.pixels, 64, 64))


def test_crop_constant_region_stays_constant():
    pix = np.full((40, 40, 3), 0.25, dtype=np.float32)
    ann = Annotation(class_id=1, bbox=(0.0, 0.0, 2.0, 2.0), ann_id=0)
    rec = ImageRecord(0, pix, (ann,))
    crop = extract_support_crop(rec, ann, out_size=64)
    np.testing.assert_allclose(crop.pixels, 0.25, atol=1e-6)


def test_crop_matches_isolated_rerender():
    specs = default_class_specs()
    ds = generate_shapes_dataset(seed=9, n_images=4, class_specs=specs, image_size=128)
    for idx, rec in enumerate(ds.records):
        bg = background_texture(np.random.default_rng([9, idx, 0]), 128, 128).copy()
        for ann in rec.annotations:
            spec = specs[ann.class_id - 1]
            canvas = bg.copy()
            render_instance(canvas, spec.shape, spec.color, ann.bbox)
            composed = extract_support_crop(rec, ann, out_size=64)
            x, y, w, h = (int(v) for v in ann.bbox)
            isolated = resize_bilinear(canvas[y:y + h, x:x + w], 64, 64)
            assert np.abs(composed.pixels - isolated).max() <= 2.0 / 255.0


def test_crop_requires_owning_record():
    ds = small_dataset()
    stray = Annotation(class_id=1, bbox=(0.0, 0.0, 5.0, 5.0), ann_id=12345)
    with pytest.raises(ValueError):
        extract_support_crop(ds.records[0], stray)


def test_save_load_round_trip(tmp_path):
    ds = small_dataset(seed=4, n=3)
    path = save_dataset(ds, tmp_path)
    loaded = load_dataset(path)
    assert loaded.class_table == ds.class_table
    assert len(loaded.records) == len(ds.records)
    for ra, rb in zip(ds.records, loaded.records):
        assert ra.image_id == rb.image_id
        assert [a.bbox for a in ra.annotations] == [b.bbox for b in rb.annotations]
        assert [a.class_id for a in ra.annotations] == [b.class_id for b in rb.annotations]
        # png round trip quantizes to 8 bits
        assert np.abs(ra.pixels - rb.pixels).max() <= 0.5 / 255.0 + 1e-6
    again = load_dataset(path)
    assert again.content_hash() == loaded.content_hash()


def _write_payload(tmp_path, payload):
    p = tmp_path / "anns.json"
    p.write_text(json.dumps(payload))
    return p


def _minimal_payload():
    return {
        "images": [
            {"id": 0, "file_name": "x.png", "width": 32, "height": 32},
            {"id": 1, "file_name": "y.png", "width": 32, "height": 32},
        ],
        "annotations": [
            {"image_id": 0, "class_id": 1, "bbox": [1, 1, 5, 5]},
            {"image_id": 0, "class_id": 2, "bbox": [10, 10, 6, 6]},
            {"image_id": 1, "class_id": 1, "bbox": [2, 2, 4, 4]},
        ],
        "classes": [
            {"id": 1, "name": "a", "split": "base"},
            {"id": 2, "name": "b", "split": "novel"},
        ],
    }


def test_load_minimal_file(tmp_path):
    p = _write_payload(tmp_path, _minimal_payload())
    ds = load_dataset(p, load_pixels=False)
    assert len(ds.records) == 2
    assert len(ds.class_table) == 2
    assert ds.base_class_ids == (1,) and ds.novel_class_ids == (2,)
    assert sum(len(r.annotations) for r in ds.records) == 3


def test_load_rejects_conflicting_duplicate_class(tmp_path):
    payload = _minimal_payload()
    payload["classes"].append({"id": 1, "name": "a", "split": "novel"})
    p = _write_payload(tmp_path, payload)
    with pytest.raises(DatasetValidationError):
        load_dataset(p, load_pixels=False)


def test_load_rejects_degenerate_bbox(tmp_path):
    payload = _minimal_payload()
    payload["annotations"][0]["bbox"] = [1, 1, 0, 5]
    p = _write_payload(tmp_path, payload)
    with pytest.raises(DatasetValidationError):
        load_dataset(p, load_pixels=False)


def test_load_rejects_unknown_references(tmp_path):
    payload = _minimal_payload()
    payload["annotations"][0]["image_id"] = 77
    with pytest.raises(DatasetParseError) as exc:
        load_dataset(_write_payload(tmp_path, payload), load_pixels=False)
    assert "annotations[0]" in str(exc.value)

    payload = _minimal_payload()
    payload["annotations"][1]["class_id"] = 9
    with pytest.raises(DatasetParseError):
        load_dataset(_write_payload(tmp_path, payload), load_pixels=False)


def test_load_rejects_missing_key_and_bad_json(tmp_path):
    payload = _minimal_payload()
    del payload["classes"]
    with pytest.raises(DatasetParseError):
        load_dataset(_write_payload(tmp_path, payload), load_pixels=False)
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    with pytest.raises(DatasetParseError):
        load_dataset(p)


def test_load_split_spec_override(tmp_path):
    p = _write_payload(tmp_path, _minimal_payload())
    ds = load_dataset(p, split_spec={1: "novel", 2: "base"}, load_pixels=False)
    assert ds.novel_class_ids == (1,)
    assert ds.base_class_ids == (2,)


def test_load_clips_boxes_to_image(tmp_path):
    payload = _minimal_payload()
    payload["annotations"][0]["bbox"] = [30, 30, 10, 10]  # spills past 32x32
    ds = load_dataset(_write_payload(tmp_path, payload), load_pixels=False)
    ann = ds.records[0].annotations[0]
    assert ann.bbox == (30.0, 30.0, 2.0, 2.0)


def test_support_images_meet_shot_budget():
    specs = default_class_specs()
    novel = tuple(i + 1 for i, s in enumerate(specs) if s.split == "novel")
    base = tuple(i + 1 for i, s in enumerate(specs) if s.split == "base")
    ds = generate_support_images(11, specs, novel, k=3, image_size=96, distractors_from=base)
    assert ds.shot_budget == 3
    counts = {}
    for rec in ds.records:
        for a in rec.annotations:
            counts[a.class_id] = counts.get(a.class_id, 0) + 1
    for cid in novel:
        assert counts[cid] == 3
    validate_dataset(ds)
    with pytest.raises(ConfigurationError):
        generate_support_images(11, specs, novel, 3, 96, distractors_from=novel[:1])


def test_limit_shots_enforces_budget():
    ds = generate_shapes_dataset(6, 40, default_class_specs(), 128)
    trimmed = limit_shots(ds, 2)
    assert trimmed.shot_budget == 2
    validate_dataset(trimmed)
    for cid in trimmed.novel_class_ids:
        n = sum(1 for r in trimmed.records for a in r.annotations if a.class_id == cid)
        assert n == 2
    # base classes untouched
    for cid in trimmed.base_class_ids:
        before = sum(1 for r in ds.records for a in r.annotations if a.class_id == cid)
        after = sum(1 for r in trimmed.records for a in r.annotations if a.class_id == cid)
        assert before == after
    with pytest.raises(DatasetValidationError):
        limit_shots(ds, 10_000)


def test_render_instance_touches_box_edges():
    canvas = np.zeros((40, 40, 3), dtype=np.float32)
    render_instance(canvas, "square", "red", (5, 7, 10, 8))
    filled = canvas.sum(axis=2) > 0
    ys, xs = np.nonzero(filled)
    assert (xs.min(), xs.max()) == (5, 14)
    assert (ys.min(), ys.max()) == (7, 14)
    # circle touches all four edge midpoints
    canvas = np.zeros((40, 40, 3), dtype=np.float32)
    render_instance(canvas, "circle", "blue", (4, 4, 12, 12))
    filled = canvas.sum(axis=2) > 0
    assert filled[10, 4] and filled[10, 15] and filled[4, 10] and filled[15, 10]


def test_render_ring_has_hole():
    canvas = np.zeros((40, 40, 3), dtype=np.float32)
    render_instance(canvas, "ring", "green", (5, 5, 20, 20))
    filled = canvas.sum(axis=2) > 0
    assert filled[15, 5 + 1]        # on the band
    assert not filled[15, 15]       # hollow center


def test_class_spec_unknown_shape_rejected():
    canvas = np.zeros((20, 20, 3), dtype=np.float32)
    with pytest.raises(ValueError):
        render_instance(canvas, "hexagon", "red", (2, 2, 8, 8))
