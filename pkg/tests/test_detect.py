import math
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facepipe import kernels
from facepipe.detect import (STOCK_CASCADE, CascadeParseError, CascadeValidationError, Detection,
                             Tracker, detect_multiscale, evaluate_window, integral_image, iou, nms,
                             parse_cascade, rect_sum, scale_ladder, scan_windows)
from facepipe.imageio import ImageBuffer, to_gray
from facepipe.synth import face_crop, pasted_face_frame
from oracles import naive_cascade_decision, rect_sum_naive


def stump_xml(stage_threshold=-1.0, node_threshold=0.0, rects=("0 0 12 24 -1.", "12 0 12 24 1."),
              leaves=("-1.0", "1.0")):
    rect_xml = "".join(f"<_>{r}</_>" for r in rects)
    return f"""<?xml version="1.0"?>
<opencv_storage><cascade>
  <featureType>HAAR</featureType><height>24</height><width>24</width><stageNum>1</stageNum>
  <stages><_>
    <stageThreshold>{stage_threshold}</stageThreshold>
    <weakClassifiers><_>
      <internalNodes>0 -1 0 {node_threshold}</internalNodes>
      <leafValues>{leaves[0]} {leaves[1]}</leafValues>
    </_></weakClassifiers>
  </_></stages>
  <features><_><rects>{rect_xml}</rects></_></features>
</cascade></opencv_storage>""".encode()


# integral image

def test_integral_ones():
    ii = integral_image(np.ones((4, 4), np.uint8))
    assert ii.sum[4, 4] == 16
    assert rect_sum(ii, (0, 0, 4, 4)) == 16
    assert rect_sum(ii, (2, 1, 0, 3)) == 0


def test_integral_zeros():
    ii = integral_image(np.zeros((5, 3), np.uint8))
    assert not ii.sum.any() and not ii.sqsum.any()


def test_every_rect_of_small_image(rng):
    gray = rng.integers(0, 256, (16, 16), dtype=np.uint8)
    ii = integral_image(gray)
    for y in range(17):
        for h in range(17 - y):
            for x in range(0, 17, 3):
                for w in range(0, 17 - x, 2):
                    assert rect_sum(ii, (x, y, w, h)) == rect_sum_naive(gray, x, y, w, h)


def test_rect_sum_bounds():
    ii = integral_image(np.ones((4, 4), np.uint8))
    with pytest.raises(ValueError, match="outside"):
        rect_sum(ii, (2, 2, 3, 1))


def test_squared_table(rng):
    gray = rng.integers(0, 256, (9, 7), dtype=np.uint8)
    ii = integral_image(gray)
    assert rect_sum(ii, (1, 2, 5, 6), table="sq") == int((gray[2:8, 1:6].astype(np.int64) ** 2).sum())


# parsing

def test_stock_cascade_stage_count(stock_cascade):
    declared = int(re.search(rb"<stageNum>(\d+)</stageNum>", STOCK_CASCADE.read_bytes()).group(1))
    assert len(stock_cascade.stages) == declared == 25
    assert stock_cascade.width == stock_cascade.height == 24


def test_fixture_cascade(tiny_cascade):
    assert len(tiny_cascade.stages) == 2
    assert tiny_cascade.stages[1].classifiers[0].nodes[0][:2] == (1, -1)


def test_rect_outside_window_names_stage():
    with pytest.raises(CascadeValidationError, match="stage 0"):
        parse_cascade(stump_xml(rects=("0 0 12 24 -1.", "20 0 12 24 1.")))


def test_malformed_xml_reports_position():
    with pytest.raises(CascadeParseError, match=r"line \d+, column \d+"):
        parse_cascade(b"<opencv_storage><cascade><width>24</cascade>")


def test_structural_errors():
    with pytest.raises(CascadeParseError):
        parse_cascade(b"<opencv_storage></opencv_storage>")
    with pytest.raises(CascadeValidationError, match="tilted"):
        parse_cascade(stump_xml().replace(b"</rects>", b"</rects><tilted>1</tilted>"))
    with pytest.raises(CascadeValidationError, match="declares"):
        parse_cascade(stump_xml().replace(b"<stageNum>1", b"<stageNum>3"))
    with pytest.raises(CascadeValidationError, match="leaf index"):
        parse_cascade(stump_xml().replace(b"0 -1 0 0.0", b"0 -5 0 0.0"))


# window evaluation

def _textured(rng, h=40, w=40):
    return integral_image(rng.integers(0, 256, (h, w), dtype=np.uint8))


def test_single_stump_matches_hand_evaluation(rng):
    c = parse_cascade(stump_xml(node_threshold=0.05, stage_threshold=0.0))
    gray = rng.integers(0, 256, (30, 30), dtype=np.uint8)
    ii = integral_image(gray)
    for x, y in [(0, 0), (3, 4), (6, 2)]:
        g = gray.astype(np.int64)
        inner = g[y + 1:y + 23, x + 1:x + 23]
        area = inner.size
        var = (inner ** 2).sum() / area - (inner.sum() / area) ** 2
        value = (-g[y:y + 24, x:x + 12].sum() + g[y:y + 24, x + 12:x + 24].sum()) / area
        expected = value >= 0.05 * math.sqrt(var)  # right leaf (+1) passes the 0 threshold
        assert evaluate_window(c, ii, x, y, 1.0).accepted == expected


def test_always_pass_and_never_pass(rng):
    ii = _textured(rng)
    always = parse_cascade(stump_xml(leaves=("1.0", "1.0"), stage_threshold=0.5))
    never = parse_cascade(stump_xml(leaves=("1.0", "1.0"), stage_threshold="inf"))
    for x, y in [(0, 0), (5, 7), (16, 16)]:
        assert evaluate_window(always, ii, x, y, 1.0).accepted
        assert not evaluate_window(never, ii, x, y, 1.0).accepted


def test_uniform_image_matches_naive(stock_cascade):
    gray = np.full((48, 48), 128, np.uint8)
    ii = integral_image(gray)
    for x, y, s in [(0, 0, 1.0), (10, 5, 1.5), (3, 3, 1.2)]:
        assert evaluate_window(stock_cascade, ii, x, y, s).accepted == \
            naive_cascade_decision(stock_cascade, gray, x, y, s)[0]


def test_face_windows_match_naive(stock_cascade, rng):
    frame = pasted_face_frame(80, 80, (10, 12, 56, 56), seed=2)
    gray = to_gray(frame)
    ii = integral_image(gray)
    for _ in range(60):
        s = float(rng.choice([1.0, 1.3, 2.0, 2.3]))
        span = 80 - max(stock_cascade.scaled(s).extent)
        x, y = (int(v) for v in rng.integers(0, span + 1, 2))
        mine = evaluate_window(stock_cascade, ii, x, y, s)
        ref = naive_cascade_decision(stock_cascade, gray, x, y, s)
        assert (mine.accepted, mine.stages_passed) == ref
    assert evaluate_window(stock_cascade, ii, 12, 14, 2.2).stages_passed > 5


def test_early_exit_matches_full(stock_cascade, rng):
    frame = pasted_face_frame(64, 64, (8, 8, 48, 48), seed=5)
    ii = integral_image(to_gray(frame))
    for _ in range(200):
        s = float(rng.uniform(1.0, 2.5))
        span = 64 - max(stock_cascade.scaled(s).extent)
        x, y = (int(v) for v in rng.integers(0, span + 1, 2))
        assert evaluate_window(stock_cascade, ii, x, y, s).accepted == \
            evaluate_window(stock_cascade, ii, x, y, s, early_exit=False).accepted


def test_window_outside_image(stock_cascade):
    with pytest.raises(ValueError):
        evaluate_window(stock_cascade, integral_image(np.zeros((30, 30), np.uint8)), 10, 10, 1.0)


# multiscale detection

def test_image_smaller_than_window(stock_cascade):
    assert detect_multiscale(stock_cascade, np.zeros((20, 30), np.uint8)) == []


def test_pasted_face_found(stock_cascade):
    bbox = (30, 20, 60, 60)
    frame = pasted_face_frame(120, 140, bbox, seed=1)
    dets = detect_multiscale(stock_cascade, frame)
    assert dets
    assert max(iou(d, bbox) for d in dets) >= 0.5


def test_background_only_has_no_faces(stock_cascade):
    from facepipe.synth import background
    assert detect_multiscale(stock_cascade, background(96, 96, seed=3)) == []


def test_finer_scale_step_scans_more(stock_cascade):
    ii = integral_image(to_gray(pasted_face_frame(100, 100, (20, 20, 56, 56), seed=4)))
    fine = scan_windows(stock_cascade, ii, scale_factor=1.1)
    coarse = scan_windows(stock_cascade, ii, scale_factor=1.3)
    assert len(fine) >= len(coarse) > 0


def test_backends_agree(stock_cascade):
    if len(kernels.available_backends()) < 2:
        pytest.skip("compiled kernels not built")
    ii = integral_image(to_gray(pasted_face_frame(90, 110, (25, 15, 58, 58), seed=6)))
    a = scan_windows(stock_cascade, ii, backend="python")
    b = scan_windows(stock_cascade, ii, backend="compiled")
    assert [d.bbox for d in a] == [d.bbox for d in b]
    np.testing.assert_allclose([d.score for d in a], [d.score for d in b], rtol=1e-12)


def test_scan_agrees_with_window_evaluation(stock_cascade):
    ii = integral_image(to_gray(pasted_face_frame(64, 64, (6, 6, 50, 50), seed=7)))
    raw = scan_windows(stock_cascade, ii, scale_factor=1.25, step=2.0)
    assert raw
    scale_of = {stock_cascade.scaled(s).window[0]: s for s in scale_ladder(stock_cascade, 64, 64, 1.25)}
    for d in raw:
        decision = evaluate_window(stock_cascade, ii, d.x, d.y, scale_of[d.w])
        assert decision.accepted
        assert decision.margin == pytest.approx(d.score, abs=1e-9)


def test_roi_limits_search(stock_cascade):
    frame = pasted_face_frame(120, 160, (90, 30, 56, 56), seed=8)
    assert detect_multiscale(stock_cascade, frame, roi=(0, 0, 70, 120)) == []
    assert detect_multiscale(stock_cascade, frame, roi=(70, 10, 90, 100))


# suppression

def test_nms_identical_boxes():
    out = nms([Detection(0, 0, 10, 10, 0.9), Detection(0, 0, 10, 10, 0.8)])
    assert [(d.bbox, d.score) for d in out] == [((0, 0, 10, 10), 0.9)]
    assert out[0].neighbors == 1


def test_nms_disjoint_boxes():
    out = nms([Detection(0, 0, 10, 10, 0.5), Detection(50, 50, 10, 10, 0.9)])
    assert len(out) == 2


def test_nms_chain():
    a = Detection(0, 0, 10, 10, 0.9)
    b = Detection(5, 0, 10, 10, 0.8)
    c = Detection(10, 0, 10, 10, 0.7)
    assert iou(a, b) > 0.3 and iou(b, c) > 0.3 and iou(a, c) == 0
    assert [d.bbox for d in nms([c, b, a])] == [a.bbox, c.bbox]


boxes = st.tuples(st.integers(0, 50), st.integers(0, 50), st.integers(1, 30), st.integers(1, 30))


@settings(max_examples=100)
@given(st.lists(st.tuples(boxes, st.floats(0, 1)), max_size=20), st.floats(0.05, 0.95))
def test_nms_kept_boxes_do_not_overlap(items, thr):
    dets = [Detection(*b, s) for b, s in items]
    kept = nms(dets, thr)
    for i in range(len(kept)):
        for j in range(i + 1, len(kept)):
            assert iou(kept[i], kept[j]) <= thr
    assert sum(d.neighbors for d in kept) + len(kept) == len(dets)


@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    assert iou(a, b) == pytest.approx(iou(b, a))
    assert 0.0 <= iou(a, b) <= 1.0
    assert iou(a, a) == 1.0


# tracking

def test_track_genesis_and_continuity():
    t = Tracker()
    first = t.update([(10, 10, 20, 20)])
    assert [(tr.id, tr.frames_since_seen) for tr in first] == [(1, 0)]
    assert [tr.id for tr in t.update([(10, 10, 20, 20)])] == [1]


def test_tracks_age_out():
    t = Tracker(max_age=2)
    t.update([(0, 0, 10, 10)])
    for _ in range(2):
        assert len(t.update([])) == 1
    assert t.update([]) == []
    assert t.update([(0, 0, 10, 10)])[0].id == 2


def test_crossing_boxes_keep_ids():
    t = Tracker()
    ids = []
    for f in range(5):
        a = (6 * f, 0, 20, 20)
        b = (24 - 6 * f, 12, 20, 20)
        tracks = t.update([Detection(*b, 1.0), Detection(*a, 1.0)] if f % 2 else [a, b])
        ids.append({tr.bbox: tr.id for tr in tracks})
        assert ids[-1][a] != ids[-1][b]
    assert {d[(6 * f, 0, 20, 20)] for f, d in enumerate(ids)} == {ids[0][(0, 0, 20, 20)]}
    assert {d[(24 - 6 * f, 12, 20, 20)] for f, d in enumerate(ids)} == {ids[0][(24, 12, 20, 20)]}


def test_face_crop_fixture_is_rgb():
    crop = face_crop()
    assert isinstance(crop, ImageBuffer) and crop.channels == 3 and crop.height == crop.width == 100
