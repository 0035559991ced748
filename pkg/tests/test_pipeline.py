import json

import numpy as np
import pytest

from facepipe import nn
from facepipe.dataset import preprocess
from facepipe.font import GLYPH_H, text_mask
from facepipe.imageio import ImageBuffer, read_image
from facepipe.model import backward, build_alexnet, forward, init_weights
from facepipe.modelfile import load_model
from facepipe.pipeline import (UNKNOWN, LabeledFace, PipelineConfig, _threaded,
                               anchor_label, bbox_outline, classify_face, crop_face, decide_label,
                               label_text, process_stream, render_overlay, text_origin, text_scale)
from facepipe.synth import make_identities, render_identity_face


def _frame(h=60, w=80, value=10):
    return ImageBuffer(np.full((h, w, 3), value, np.uint8))


# cropping

def test_crop_full_frame_is_identity(rng):
    f = ImageBuffer(rng.integers(0, 256, (20, 30, 3), dtype=np.uint8))
    assert crop_face(f, (0, 0, 30, 20), 0.0) == f


def test_crop_margin_doubles_size():
    c = crop_face(_frame(100, 100), (40, 30, 20, 30), 0.5)
    assert (c.width, c.height) == (40, 60)


def test_crop_clamps_at_corner():
    # x0 = 2 - 0.5*10 = -3 -> 0, x1 = 2 + 10 + 5 = 17; y0 = 1 - 0.5*8 -> 0, y1 = 1 + 8 + 4 = 13
    c = crop_face(_frame(50, 50), (2, 1, 10, 8), 0.5)
    assert (c.width, c.height) == (17, 13)


def test_crop_outside_frame():
    with pytest.raises(ValueError, match="does not intersect"):
        crop_face(_frame(10, 10), (20, 20, 5, 5))


# labels

def test_decide_label_rules():
    labels = ["Ada", "Bao", "Cleo"]
    assert decide_label([0.9, 0.05, 0.05], labels, 0.5) == ("Ada", 0.9)
    assert decide_label([0.3, 0.3, 0.4], labels, 0.5) == (UNKNOWN, 0.4)
    assert decide_label([0.5, 0.5, 0.0], labels, 0.5) == ("Ada", 0.5)


def test_classify_overfit_face():
    ident = make_identities(3, seed=0)
    face = render_identity_face(ident[1], 48, np.random.default_rng(0))
    g = init_weights(build_alexnet("tiny", ["Ada", "Bao", "Cleo"], input_size=32), 0)
    x = preprocess(face, (32, 32))
    vel = {}
    for step in range(50):
        logits, cache = forward(g, x, train=True, rng=np.random.default_rng(step), keep_cache=True)
        _, _, d = nn.softmax_cross_entropy(logits, [1])
        nn.sgd_update(g.params, backward(g, cache, d), 0.01, 0.9, vel)
        g.version += 1
    label, conf = classify_face(g, face, 0.5)
    assert label == "Bao" and conf > 0.99


# overlay geometry

def test_anchor_diagonal():
    assert anchor_label((0, 20, 3, 4), (100, 100)).diagonal == 5.0


def test_anchor_position():
    a = anchor_label((10, 50, 30, 40), (200, 200), 0.2)
    assert (a.x, a.y) == (25.0, 40.0)


def test_anchor_clamped_at_top():
    assert anchor_label((10, 0, 30, 40), (200, 200)).y == 0.0


def test_empty_overlay_is_identity(rng):
    f = ImageBuffer(rng.integers(0, 256, (30, 40, 3), dtype=np.uint8))
    assert render_overlay(f, []) == f


def test_overlay_changes_only_outline_and_text():
    frame = _frame(80, 120, value=7)
    face = LabeledFace(1, (40, 30, 30, 30), "Ada", 0.87)
    out = render_overlay(frame, [face])
    changed = np.any(out.pixels != frame.pixels, axis=2)
    expected = bbox_outline(frame.pixels.shape, face.bbox)
    scale = text_scale(120)
    top, left = text_origin(face, 120, 80, 0.2, scale)
    mask = text_mask(label_text(face), scale)
    expected[top:top + mask.shape[0], left:left + mask.shape[1]] |= mask
    assert np.array_equal(changed, expected)
    assert label_text(face) == "Ada 87%"
    assert expected[30, 40] and expected[31, 41] and not expected[32, 42]


def test_overlay_z_order_by_track_id():
    frame = _frame(60, 60)
    a = LabeledFace(2, (10, 10, 30, 30), "Ada", 0.9)
    b = LabeledFace(1, (10, 10, 30, 30), "Bao", 0.9)
    out1 = render_overlay(frame, [a, b]).pixels
    out2 = render_overlay(frame, [b, a]).pixels
    assert np.array_equal(out1, out2)
    # the shared outline carries the colour of the higher track id
    assert tuple(out1[10, 20]) != tuple(render_overlay(frame, [b]).pixels[10, 20])


def test_text_stays_inside_frame():
    face = LabeledFace(3, (0, 0, 10, 10), "Unknown", 0.42)
    top, left = text_origin(face, 40, 30)
    assert top >= 0 and left >= 0
    assert top + GLYPH_H <= 30


# stream processing

def test_threaded_preserves_order_and_errors():
    assert list(_threaded(iter(range(100)), 3)) == list(range(100))

    def boom():
        yield 1
        raise RuntimeError("source failed")

    it = _threaded(boom(), 2)
    assert next(it) == 1
    with pytest.raises(RuntimeError, match="source failed"):
        next(it)


def test_empty_directory(tmp_path, stock_cascade, trained_model):
    (tmp_path / "in").mkdir()
    summary = process_stream(tmp_path / "in", stock_cascade, load_model(trained_model),
                             out_dir=tmp_path / "out")
    assert summary["frames"] == 0
    assert (tmp_path / "out" / "events.jsonl").read_text() == ""
    assert sorted(p.name for p in (tmp_path / "out").iterdir()) == ["events.jsonl"]


def test_moving_face_single_track(frames_dir, tmp_path, stock_cascade, trained_model):
    summary = process_stream(frames_dir, stock_cascade, load_model(trained_model),
                             PipelineConfig(stride=5), tmp_path / "out")
    events = [json.loads(line) for line in (tmp_path / "out" / "events.jsonl").read_text().splitlines()]
    assert summary["frames"] == len(events) == 10
    assert sum(e["detection"] == "full" for e in events) == 2 == summary["full_detections"]
    ids = {t["id"] for e in events for t in e["tracks"]}
    assert ids == {1}
    assert all(len(e["tracks"]) == 1 for e in events)
    assert len(list((tmp_path / "out").glob("out_*.ppm"))) == 10


def test_corrupt_frame_is_logged_and_skipped(frames_dir, tmp_path, stock_cascade, trained_model):
    src = tmp_path / "in"
    src.mkdir()
    for p in sorted(frames_dir.iterdir())[:3]:
        (src / p.name).write_bytes(p.read_bytes())
    (src / "frame_000001.ppm").write_bytes(b"P6\n64 64\n255\n\x00")
    summary = process_stream(src, stock_cascade, load_model(trained_model), out_dir=tmp_path / "out")
    lines = (tmp_path / "out" / "events.jsonl").read_text().splitlines()
    assert summary == {**summary, "frames": 2, "skipped": 1}
    assert "corrupt image" in json.loads(lines[1])["skipped"]


def test_threaded_and_serial_agree(frames_dir, tmp_path, stock_cascade, trained_model):
    graph = load_model(trained_model)
    process_stream(frames_dir, stock_cascade, graph, PipelineConfig(threaded=True), tmp_path / "a")
    process_stream(frames_dir, stock_cascade, graph, PipelineConfig(threaded=False), tmp_path / "b")
    for p in sorted((tmp_path / "a").iterdir()):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_timings_only_when_requested(frames_dir, tmp_path, stock_cascade, trained_model):
    process_stream(frames_dir, stock_cascade, load_model(trained_model),
                   PipelineConfig(log_timings=True), tmp_path / "t")
    first = json.loads((tmp_path / "t" / "events.jsonl").read_text().splitlines()[0])
    assert all(isinstance(v, float) for v in first["timings_ms"].values())


def test_pipeline_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(unknown_threshold=1.5)
    with pytest.raises(ValueError):
        PipelineConfig(stride=0)
    assert PipelineConfig(detector={"min_neighbors": 0}).detector.min_neighbors == 0


def test_annotated_frame_has_outline(frames_dir, tmp_path, stock_cascade, trained_model):
    process_stream(frames_dir, stock_cascade, load_model(trained_model), out_dir=tmp_path / "o")
    event = json.loads((tmp_path / "o" / "events.jsonl").read_text().splitlines()[0])
    x, y, w, h = event["tracks"][0]["bbox"]
    out = read_image(tmp_path / "o" / "out_000000.ppm")
    src = read_image(frames_dir / "frame_000000.ppm")
    assert not np.array_equal(out.pixels[y, x:x + w], src.pixels[y, x:x + w])
