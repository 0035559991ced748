"""End-to-end recognition: detect/track, crop, classify, anchor, render."""

import json
import math
import queue
import threading
import time
from collections import Counter, deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import IMAGE_SUFFIXES, preprocess
from .detect import Tracker, detect_multiscale, integral_image, nms
from .font import GLYPH_H, text_mask
from .imageio import ImageBuffer, ImageFormatError, read_image, to_gray, write_image
from .model import predict

UNKNOWN = "Unknown"
PALETTE = ((255, 64, 64), (64, 255, 64), (64, 160, 255), (255, 220, 32), (255, 64, 255), (32, 255, 255))


@dataclass
class LabeledFace:
    track_id: int
    bbox: tuple
    label: str
    confidence: float


@dataclass(frozen=True)
class OverlayAnchor:
    x: float
    y: float
    diagonal: float
    offset: float


@dataclass
class DetectorConfig:
    scale_factor: float = 1.1
    min_size: int = 24
    step: float = 2.0
    min_neighbors: int = 2
    iou_threshold: float = 0.3


@dataclass
class PipelineConfig:
    unknown_threshold: float = 0.5
    stride: int = 5
    smoothing_window: int = 5
    crop_margin: float = 0.2
    offset_fraction: float = 0.2
    iou_match: float = 0.3
    max_age: int = 10
    queue_capacity: int = 8
    threaded: bool = True
    log_timings: bool = False
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def __post_init__(self):
        if not 0 <= self.unknown_threshold <= 1:
            raise ValueError("unknown_threshold must be in [0, 1]")
        if self.stride < 1 or self.smoothing_window < 1 or self.queue_capacity < 1:
            raise ValueError("stride, smoothing_window and queue_capacity must be >= 1")
        if isinstance(self.detector, dict):
            self.detector = DetectorConfig(**self.detector)


def crop_face(frame, bbox, margin=0.0):
    """Crop ``bbox`` grown by ``margin`` x its size on every side, clamped."""
    x, y, w, h = bbox
    px = frame.pixels
    fh, fw = px.shape[:2]
    x0 = max(0, int(math.floor(x - margin * w + 0.5)))
    y0 = max(0, int(math.floor(y - margin * h + 0.5)))
    x1 = min(fw, int(math.floor(x + w + margin * w + 0.5)))
    y1 = min(fh, int(math.floor(y + h + margin * h + 0.5)))
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"bbox {bbox} does not intersect the {fw}x{fh} frame")
    return ImageBuffer(px[y0:y1, x0:x1].copy())


def decide_label(probs, labels, threshold):
    """Argmax label, or ``Unknown`` when the top probability is below
    ``threshold``. Ties go to the lowest label index."""
    probs = np.asarray(probs, dtype=np.float64)
    best = int(np.argmax(probs))
    conf = float(probs[best])
    if conf < threshold:
        return UNKNOWN, conf
    return labels[best], conf


def classify_face(graph, face, threshold=0.5):
    c, h, w = graph.input_shape
    x = preprocess(face, (h, w), graph.input_mean, channels=c)
    return decide_label(predict(graph, x), graph.labels, threshold)


def anchor_label(bbox, frame_dims, offset_fraction=0.2):
    """Text anchor above the bbox top centre, offset by a fraction of the
    bbox diagonal and clamped into the frame. ``frame_dims`` is (w, h)."""
    x, y, w, h = bbox
    fw, fh = frame_dims
    diagonal = math.hypot(w, h)
    offset = offset_fraction * diagonal
    ax = min(max(x + w / 2.0, 0.0), fw - 1.0)
    ay = min(max(y - offset, 0.0), fh - 1.0)
    return OverlayAnchor(ax, ay, diagonal, offset)


def label_text(face):
    return f"{face.label} {int(round(face.confidence * 100))}%"


def _paint(px, mask, top, left, color):
    """Paint ``mask`` onto ``px`` at (top, left), clipping to the frame."""
    h, w = px.shape[:2]
    mh, mw = mask.shape
    y0, x0 = max(top, 0), max(left, 0)
    y1, x1 = min(top + mh, h), min(left + mw, w)
    if y1 <= y0 or x1 <= x0:
        return
    sub = mask[y0 - top:y1 - top, x0 - left:x1 - left]
    region = px[y0:y1, x0:x1]
    region[sub] = color[:px.shape[2]] if px.shape[2] == 3 else color[0]


def text_origin(face, frame_w, frame_h, offset_fraction=0.2, scale=1):
    """Top-left corner of the label text: centred on the anchor, sitting
    just above it, and kept inside the frame where it fits."""
    anchor = anchor_label(face.bbox, (frame_w, frame_h), offset_fraction)
    mask_w = text_mask(label_text(face), scale).shape[1]
    left = int(round(anchor.x - mask_w / 2))
    top = int(round(anchor.y)) - GLYPH_H * scale
    left = min(max(left, 0), max(frame_w - mask_w, 0))
    top = min(max(top, 0), max(frame_h - GLYPH_H * scale, 0))
    return top, left


def bbox_outline(shape, bbox, stroke=2):
    h, w = shape[:2]
    x, y, bw, bh = bbox
    mask = np.zeros((h, w), dtype=bool)
    inner = np.zeros((h, w), dtype=bool)
    mask[max(y, 0):max(min(y + bh, h), 0), max(x, 0):max(min(x + bw, w), 0)] = True
    iy0, ix0 = y + stroke, x + stroke
    iy1, ix1 = y + bh - stroke, x + bw - stroke
    if iy1 > iy0 and ix1 > ix0:
        inner[max(iy0, 0):max(min(iy1, h), 0), max(ix0, 0):max(min(ix1, w), 0)] = True
    return mask & ~inner


def text_scale(frame_w):
    return max(1, frame_w // 160)


def render_overlay(frame, faces, offset_fraction=0.2):
    """Draw bbox outlines (2 px) and labels on a copy of ``frame``.

    Faces are drawn in increasing track id so later ids end up on top.
    """
    out = frame.pixels.copy()
    fh, fw = out.shape[:2]
    scale = text_scale(fw)
    for face in sorted(faces, key=lambda f: f.track_id):
        color = np.array(PALETTE[(face.track_id - 1) % len(PALETTE)], dtype=np.uint8)
        outline = bbox_outline(out.shape, face.bbox)
        out[outline] = color[:out.shape[2]] if out.shape[2] == 3 else color[0]
        top, left = text_origin(face, fw, fh, offset_fraction, scale)
        _paint(out, text_mask(label_text(face), scale), top, left, color)
    return ImageBuffer(out)


def _majority(history):
    counts = Counter(label for label, _ in history)
    top = max(counts.values())
    # most recent among the tied labels
    for label, conf in reversed(history):
        if counts[label] == top:
            return label, conf
    raise AssertionError("unreachable")


class FramePipeline:
    """Per-frame state machine: tracker, per-track label history."""

    def __init__(self, cascade, graph, config=None):
        self.cascade = cascade
        self.graph = graph
        self.config = config or PipelineConfig()
        self.tracker = Tracker(self.config.iou_match, self.config.max_age)
        self.labels = {}

    def _local_detections(self, ii):
        det_cfg = self.config.detector
        found = []
        for t in self.tracker.tracks:
            x, y, w, h = t.bbox
            roi = (x - w // 2, y - h // 2, 2 * w, 2 * h)
            found += detect_multiscale(self.cascade, ii, det_cfg.scale_factor,
                                       max(det_cfg.min_size, int(0.75 * w)), det_cfg.step,
                                       det_cfg.min_neighbors, det_cfg.iou_threshold, roi=roi,
                                       max_size=int(1.34 * max(w, h)) + 1)
        return nms(found, det_cfg.iou_threshold)

    def detect(self, index, frame):
        """Full detection on stride frames, local re-detection otherwise.

        Returns ``(live tracks, mode)``. The tracks are snapshots, so a
        later frame cannot change them while they wait in a queue.
        """
        det_cfg = self.config.detector
        ii = integral_image(to_gray(frame))
        if index % self.config.stride == 0:
            mode = "full"
            dets = detect_multiscale(self.cascade, ii, det_cfg.scale_factor, det_cfg.min_size,
                                     det_cfg.step, det_cfg.min_neighbors, det_cfg.iou_threshold)
        else:
            mode = "track"
            dets = self._local_detections(ii)
        tracks = self.tracker.update(dets)
        return [replace(t, history=list(t.history)) for t in tracks], mode

    def classify(self, frame, tracks, mode):
        """Label the tracks seen in this frame; forget labels of dead tracks."""
        live = {t.id for t in tracks}
        for tid in [k for k in self.labels if k not in live]:
            del self.labels[tid]
        faces = []
        cfg = self.config
        for t in sorted(tracks, key=lambda t: t.id):
            if t.frames_since_seen:
                continue
            hist = self.labels.setdefault(t.id, deque(maxlen=cfg.smoothing_window))
            if mode == "full" or not hist:
                crop = crop_face(frame, t.bbox, cfg.crop_margin)
                hist.append(classify_face(self.graph, crop, cfg.unknown_threshold))
            label, conf = _majority(hist)
            faces.append(LabeledFace(t.id, tuple(int(v) for v in t.bbox), label, conf))
        return faces

    def render(self, frame, faces):
        return render_overlay(frame, faces, self.config.offset_fraction)


def list_frames(frame_dir):
    frame_dir = Path(frame_dir)
    files = sorted(p for p in frame_dir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    named = [p for p in files if p.name.startswith("frame_")]
    return named or files


_DONE = object()


class _Failure:
    def __init__(self, exc):
        self.exc = exc


def _threaded(items, capacity):
    """Re-yield ``items`` produced on a worker thread through a bounded queue."""
    q = queue.Queue(maxsize=capacity)

    def run():
        try:
            for item in items:
                q.put(item)
        except BaseException as exc:  # forwarded to the consumer
            q.put(_Failure(exc))
        q.put(_DONE)

    threading.Thread(target=run, daemon=True).start()
    while True:
        item = q.get()
        if item is _DONE:
            return
        if isinstance(item, _Failure):
            raise item.exc
        yield item


def process_stream(frame_dir, cascade, graph, config=None, out_dir=None):
    """Annotate every frame of ``frame_dir`` into ``out_dir``.

    Writes ``out_%06d.ppm`` per readable frame and ``events.jsonl`` with one
    record per input frame. Returns a summary dict.
    """
    cfg = config or PipelineConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = list_frames(frame_dir)
    pipe = FramePipeline(cascade, graph, cfg)
    clock = time.perf_counter

    def read_stage():
        for i, path in enumerate(files):
            try:
                yield i, path.name, read_image(path), None
            except (OSError, ImageFormatError) as exc:
                yield i, path.name, None, str(exc)

    def detect_stage(items):
        for i, name, frame, err in items:
            if frame is None:
                yield i, name, None, err, None, None
                continue
            t0 = clock()
            tracks, mode = pipe.detect(i, frame)
            yield i, name, frame, (tracks, mode), None, {"detect": (clock() - t0) * 1e3}

    def classify_stage(items):
        for i, name, frame, state, _, timings in items:
            if frame is None:
                yield i, name, None, state, None, None
                continue
            tracks, mode = state
            t0 = clock()
            faces = pipe.classify(frame, tracks, mode)
            timings["classify"] = (clock() - t0) * 1e3
            yield i, name, frame, mode, faces, timings

    stages = [detect_stage, classify_stage]
    items = read_stage()
    if cfg.threaded:
        items = _threaded(items, cfg.queue_capacity)
    for stage in stages:
        items = stage(items)
        if cfg.threaded:
            items = _threaded(items, cfg.queue_capacity)

    written = skipped = full = 0
    with open(out_dir / "events.jsonl", "w", encoding="utf-8") as log:
        for i, name, frame, mode, faces, timings in items:
            if frame is None:
                skipped += 1
                log.write(json.dumps({"frame": i, "source": name, "skipped": mode}) + "\n")
                continue
            t0 = clock()
            image = pipe.render(frame, faces)
            write_image(out_dir / f"out_{i:06d}.ppm", image)
            timings["render"] = (clock() - t0) * 1e3
            if mode == "full":
                full += 1
            record = {
                "frame": i,
                "source": name,
                "detection": mode,
                "tracks": [{"id": f.track_id, "bbox": list(f.bbox), "label": f.label,
                            "confidence": round(f.confidence, 6)} for f in faces],
                "timings_ms": ({k: round(v, 3) for k, v in timings.items()} if cfg.log_timings
                               else dict.fromkeys(("detect", "classify", "render"))),
            }
            log.write(json.dumps(record) + "\n")
            written += 1
    return {"frames": written, "skipped": skipped, "full_detections": full,
            "events": str(out_dir / "events.jsonl")}
