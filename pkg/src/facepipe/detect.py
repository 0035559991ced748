"""Boosted Haar-cascade face detection and IoU tracking.

The cascade is read from the OpenCV-style XML schema (``docs/cascade_xml.md``).
Features are scaled to the window rather than rescaling the image, so one
integral image serves every scale.
"""

import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import kernels
from .imageio import ImageBuffer, to_gray

MIN_VARIANCE = 1.0
STOCK_CASCADE = Path(__file__).parent / "data" / "haarcascade_frontalface_default.xml"


class CascadeParseError(ValueError):
    pass


class CascadeValidationError(ValueError):
    pass


def _round(v):
    return int(math.floor(v + 0.5))


@dataclass(frozen=True)
class IntegralImage:
    """(H+1) x (W+1) prefix sums of pixel values and squared values."""

    sum: np.ndarray
    sqsum: np.ndarray

    @property
    def width(self):
        return self.sum.shape[1] - 1

    @property
    def height(self):
        return self.sum.shape[0] - 1


def integral_image(gray):
    if isinstance(gray, ImageBuffer):
        if gray.channels != 1:
            raise ValueError("integral_image needs a single-channel image")
        gray = gray.pixels[:, :, 0]
    px = np.asarray(gray, dtype=np.int64)
    if px.ndim != 2:
        raise ValueError("integral_image needs a 2-D array")
    h, w = px.shape
    s = np.zeros((h + 1, w + 1), dtype=np.int64)
    sq = np.zeros((h + 1, w + 1), dtype=np.int64)
    s[1:, 1:] = px.cumsum(0).cumsum(1)
    sq[1:, 1:] = (px * px).cumsum(0).cumsum(1)
    return IntegralImage(s, sq)


def rect_sum(ii, rect, table="sum"):
    x, y, w, h = (int(v) for v in rect)
    if x < 0 or y < 0 or w < 0 or h < 0 or x + w > ii.width or y + h > ii.height:
        raise ValueError(f"rect {rect} outside {ii.width}x{ii.height} image")
    t = ii.sum if table == "sum" else ii.sqsum
    return int(t[y + h, x + w] - t[y + h, x] - t[y, x + w] + t[y, x])


@dataclass(frozen=True)
class WeakClassifier:
    nodes: tuple  # (left, right, feature index, threshold) per internal node
    leaves: tuple


@dataclass(frozen=True)
class Stage:
    threshold: float
    classifiers: tuple


@dataclass(frozen=True, eq=False)
class Cascade:
    width: int
    height: int
    stages: tuple
    features: tuple  # each a tuple of (x, y, w, h, weight) rects

    def __post_init__(self):
        if not self.stages:
            raise CascadeValidationError("cascade has no stages")
        for si, stage in enumerate(self.stages):
            for clf in stage.classifiers:
                for _, _, f, _ in clf.nodes:
                    if not 0 <= f < len(self.features):
                        raise CascadeValidationError(f"stage {si}: feature index {f} out of range")
                    for x, y, w, h, _ in self.features[f]:
                        if x < 0 or y < 0 or w <= 0 or h <= 0 or x + w > self.width or y + h > self.height:
                            raise CascadeValidationError(
                                f"stage {si}: feature {f} rect ({x}, {y}, {w}, {h}) lies outside "
                                f"the {self.width}x{self.height} base window")

    @property
    def tables(self):
        return _flatten(self)

    def scaled(self, scale):
        return _scaled(self, float(scale))


@lru_cache(maxsize=8)
def _flatten(c):
    node_feature, node_threshold, node_left, node_right = [], [], [], []
    clf_node_start, clf_leaf_start, leaves, stage_clf_start, stage_threshold = [], [], [], [0], []
    for stage in c.stages:
        for clf in stage.classifiers:
            clf_node_start.append(len(node_feature))
            clf_leaf_start.append(len(leaves))
            for left, right, f, thr in clf.nodes:
                node_left.append(left)
                node_right.append(right)
                node_feature.append(f)
                node_threshold.append(thr)
            leaves.extend(clf.leaves)
        stage_clf_start.append(len(clf_node_start))
        stage_threshold.append(stage.threshold)
    i64 = lambda v: np.ascontiguousarray(v, dtype=np.int64)  # noqa: E731
    f64 = lambda v: np.ascontiguousarray(v, dtype=np.float64)  # noqa: E731
    return (i64(node_feature), f64(node_threshold), i64(node_left), i64(node_right),
            i64(clf_node_start), i64(clf_leaf_start), f64(leaves),
            i64(stage_clf_start), f64(stage_threshold))


class ScaledCascade(NamedTuple):
    scale: float
    window: tuple  # (w, h)
    extent: tuple  # (w, h) of the region touched by any lookup
    equ: tuple  # variance-normalisation rect relative to the window origin
    inv_area: float
    rects: np.ndarray  # (F, 3, 4) int64, zero width marks an unused slot
    weights: np.ndarray  # (F, 3) float64, area-normalised and corrected


@lru_cache(maxsize=256)
def _scaled(c, s):
    ww, wh = _round(c.width * s), _round(c.height * s)
    equ = (_round(s), _round(s), _round((c.width - 2) * s), _round((c.height - 2) * s))
    inv_area = 1.0 / (equ[2] * equ[3])
    n = len(c.features)
    rects = np.zeros((n, 3, 4), dtype=np.int64)
    weights = np.zeros((n, 3), dtype=np.float64)
    ext_w, ext_h = max(ww, equ[0] + equ[2]), max(wh, equ[1] + equ[3])
    for fi, feat in enumerate(c.features):
        area0 = 0
        rest = 0.0
        for k, (x, y, w, h, wt) in enumerate(feat):
            tr = (_round(x * s), _round(y * s), max(1, _round(w * s)), max(1, _round(h * s)))
            rects[fi, k] = tr
            weights[fi, k] = wt * inv_area
            if k == 0:
                area0 = tr[2] * tr[3]
            else:
                rest += weights[fi, k] * tr[2] * tr[3]
            ext_w = max(ext_w, tr[0] + tr[2])
            ext_h = max(ext_h, tr[1] + tr[3])
        if len(feat) > 1:
            # keep the feature zero-mean after rounding the scaled rects
            weights[fi, 0] = -rest / area0
    return ScaledCascade(s, (ww, wh), (ext_w, ext_h), equ, inv_area, rects, weights)


def _text(el, tag):
    child = el.find(tag)
    if child is None or child.text is None:
        raise CascadeParseError(f"missing <{tag}> in <{el.tag}>")
    return child.text.strip()


def parse_cascade(data):
    """Parse cascade XML bytes (or a path) into a :class:`Cascade`."""
    if isinstance(data, (str, Path)) and not str(data).lstrip().startswith("<"):
        data = Path(data).read_bytes()
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        line, col = exc.position
        raise CascadeParseError(f"malformed cascade XML at line {line}, column {col}") from exc
    casc = root if root.tag == "cascade" else root.find("cascade")
    if casc is None:
        raise CascadeParseError("no <cascade> element found")
    try:
        if casc.find("featureType") is not None and _text(casc, "featureType").upper() != "HAAR":
            raise CascadeParseError("only HAAR feature cascades are supported")
        width = int(_text(casc, "width"))
        height = int(_text(casc, "height"))
        feats_el = casc.find("features")
        if feats_el is None:
            raise CascadeParseError("missing <features>")
        features = []
        for fi, f_el in enumerate(feats_el.findall("_")):
            tilted = f_el.find("tilted")
            if tilted is not None and tilted.text and int(tilted.text) != 0:
                raise CascadeValidationError(f"feature {fi}: tilted features are not supported")
            rects = []
            rects_el = f_el.find("rects")
            if rects_el is None:
                raise CascadeParseError(f"feature {fi} has no <rects>")
            for r_el in rects_el.findall("_"):
                vals = r_el.text.split()
                if len(vals) != 5:
                    raise CascadeParseError(f"feature {fi}: rect needs 5 values, got {len(vals)}")
                x, y, w, h = (int(float(v)) for v in vals[:4])
                rects.append((x, y, w, h, float(vals[4])))
            if not 1 <= len(rects) <= 3:
                raise CascadeValidationError(f"feature {fi}: expected 1-3 rects, got {len(rects)}")
            features.append(tuple(rects))
        stages = []
        stages_el = casc.find("stages")
        if stages_el is None:
            raise CascadeParseError("missing <stages>")
        for si, s_el in enumerate(stages_el.findall("_")):
            thr = float(_text(s_el, "stageThreshold"))
            clfs = []
            wc_el = s_el.find("weakClassifiers")
            if wc_el is None:
                raise CascadeParseError(f"stage {si} has no <weakClassifiers>")
            for c_el in wc_el.findall("_"):
                nums = _text(c_el, "internalNodes").split()
                leaves = tuple(float(v) for v in _text(c_el, "leafValues").split())
                if not nums or len(nums) % 4:
                    raise CascadeParseError(f"stage {si}: internalNodes must come in groups of 4")
                nodes = tuple((int(nums[i]), int(nums[i + 1]), int(nums[i + 2]), float(nums[i + 3]))
                              for i in range(0, len(nums), 4))
                for left, right, _, _ in nodes:
                    for child in (left, right):
                        if child <= 0 and -child >= len(leaves):
                            raise CascadeValidationError(f"stage {si}: leaf index {-child} out of range")
                        if child > 0 and child >= len(nodes):
                            raise CascadeValidationError(f"stage {si}: node index {child} out of range")
                clfs.append(WeakClassifier(nodes, leaves))
            stages.append(Stage(thr, tuple(clfs)))
        declared = casc.find("stageNum")
        if declared is not None and int(declared.text) != len(stages):
            raise CascadeValidationError(
                f"cascade declares {declared.text} stages but contains {len(stages)}")
    except ValueError as exc:
        if isinstance(exc, (CascadeParseError, CascadeValidationError)):
            raise
        raise CascadeParseError(f"invalid number in cascade: {exc}") from exc
    return Cascade(width, height, tuple(stages), tuple(features))


def load_cascade(path=None):
    return parse_cascade(Path(path or STOCK_CASCADE).read_bytes())


class WindowDecision(NamedTuple):
    accepted: bool
    stages_passed: int
    margin: float  # last evaluated stage sum minus its threshold


def _window_std(ii, sc, x, y):
    ex, ey, ew, eh = sc.equ
    s = rect_sum(ii, (x + ex, y + ey, ew, eh))
    s2 = rect_sum(ii, (x + ex, y + ey, ew, eh), table="sq")
    mean = s * sc.inv_area
    return s2 * sc.inv_area - mean * mean


def evaluate_window(cascade, ii, x, y, scale, early_exit=True):
    """Evaluate the cascade on the window at ``(x, y)`` for ``scale``.

    With ``early_exit`` false every stage is evaluated; the decision is the
    same, only the reported stage count and margin can differ.
    """
    sc = cascade.scaled(scale)
    if x < 0 or y < 0 or x + sc.extent[0] > ii.width or y + sc.extent[1] > ii.height:
        raise ValueError("window does not fit inside the image")
    var = _window_std(ii, sc, x, y)
    if var < MIN_VARIANCE:
        return WindowDecision(False, 0, -math.inf)
    std = math.sqrt(var)
    passed = 0
    accepted = True
    margin = 0.0
    for stage in cascade.stages:
        total = 0.0
        for clf in stage.classifiers:
            node = 0
            while True:
                left, right, f, thr = clf.nodes[node]
                val = 0.0
                for k in range(len(cascade.features[f])):
                    rx, ry, rw, rh = (int(v) for v in sc.rects[f, k])
                    val += sc.weights[f, k] * rect_sum(ii, (x + rx, y + ry, rw, rh))
                nxt = left if val < thr * std else right
                if nxt <= 0:
                    total += clf.leaves[-nxt]
                    break
                node = nxt
        margin = total - stage.threshold
        if total < stage.threshold:
            accepted = False
            if early_exit:
                break
        elif accepted:
            passed += 1
    return WindowDecision(accepted, passed, margin)


@dataclass
class Detection:
    x: int
    y: int
    w: int
    h: int
    score: float
    neighbors: int = 0

    @property
    def bbox(self):
        return (self.x, self.y, self.w, self.h)


def iou(a, b):
    ax, ay, aw, ah = a.bbox if isinstance(a, Detection) else a
    bx, by, bw, bh = b.bbox if isinstance(b, Detection) else b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def nms(dets, iou_threshold=0.3):
    """Greedy non-maximum suppression by descending score.

    Each kept detection's ``neighbors`` counts the boxes it suppressed.
    """
    if not 0 < iou_threshold < 1:
        raise ValueError("iou_threshold must be in (0, 1)")
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    kept = []
    for i in order:
        d = dets[i]
        for k in kept:
            if iou(k, d) > iou_threshold:
                k.neighbors += 1
                break
        else:
            kept.append(Detection(d.x, d.y, d.w, d.h, d.score, 0))
    return kept


def scale_ladder(cascade, width, height, scale_factor=1.1, min_size=24, max_size=None):
    if scale_factor <= 1:
        raise ValueError("scale_factor must be > 1")
    s = max(1.0, min_size / min(cascade.width, cascade.height))
    limit = min(width, height) if max_size is None else min(width, height, max_size)
    scales = []
    while True:
        sc = cascade.scaled(s)
        if sc.extent[0] > width or sc.extent[1] > height or max(sc.window) > limit:
            break
        scales.append(s)
        s *= scale_factor
    return scales


def scan_windows(cascade, ii, scale_factor=1.1, min_size=24, step=2.0, roi=None, max_size=None,
                 backend=None):
    """Every accepted window, ordered by (scale, y, x)."""
    impl = kernels.get_backend(backend)
    tables = cascade.tables
    x0, y0, rw, rh = roi if roi is not None else (0, 0, ii.width, ii.height)
    x0, y0 = max(0, x0), max(0, y0)
    rw, rh = min(rw, ii.width - x0), min(rh, ii.height - y0)
    raw = []
    if rw <= 0 or rh <= 0:
        return raw
    for s in scale_ladder(cascade, rw, rh, scale_factor, min_size, max_size):
        sc = cascade.scaled(s)
        stride = max(1, _round(step * s))
        xs = np.arange(x0, x0 + rw - sc.extent[0] + 1, stride, dtype=np.int64)
        ys = np.arange(y0, y0 + rh - sc.extent[1] + 1, stride, dtype=np.int64)
        ax, ay, margin = impl.scan_scale(ii.sum, ii.sqsum, xs, ys, sc.equ, sc.inv_area, sc.rects,
                                         sc.weights, *tables, MIN_VARIANCE)
        order = np.lexsort((ax, ay))
        ww, wh = sc.window
        raw.extend(Detection(int(ax[i]), int(ay[i]), ww, wh, float(margin[i])) for i in order)
    return raw


def detect_multiscale(cascade, img, scale_factor=1.1, min_size=24, step=2.0, min_neighbors=2,
                      iou_threshold=0.3, roi=None, max_size=None, backend=None):
    """Detect faces in ``img`` (ImageBuffer, array, or IntegralImage).

    Windows grow geometrically by ``scale_factor`` from ``min_size``; the
    scan stride is ``max(1, round(step * scale))`` pixels. Accepted windows
    are merged by :func:`nms` and detections backed by fewer than
    ``min_neighbors`` suppressed windows are dropped.
    """
    ii = img if isinstance(img, IntegralImage) else integral_image(to_gray(img))
    raw = scan_windows(cascade, ii, scale_factor, min_size, step, roi, max_size, backend)
    return [d for d in nms(raw, iou_threshold) if d.neighbors >= min_neighbors]


@dataclass
class Track:
    id: int
    bbox: tuple
    frames_since_seen: int = 0
    hits: int = 1
    history: list = field(default_factory=list)


class Tracker:
    """Greedy IoU association of detections to persistent track ids."""

    def __init__(self, iou_match=0.3, max_age=10):
        self.iou_match = iou_match
        self.max_age = max_age
        self.tracks = []
        self.next_id = 1

    def update(self, dets):
        boxes = [d.bbox if isinstance(d, Detection) else tuple(d) for d in dets]
        pairs = []
        for ti, t in enumerate(self.tracks):
            for di, b in enumerate(boxes):
                v = iou(t.bbox, b)
                if v > self.iou_match:
                    pairs.append((-v, t.id, di, ti))
        pairs.sort()
        used_t, used_d = set(), set()
        for _, _, di, ti in pairs:
            if ti in used_t or di in used_d:
                continue
            used_t.add(ti)
            used_d.add(di)
            t = self.tracks[ti]
            t.bbox = boxes[di]
            t.frames_since_seen = 0
            t.hits += 1
            t.history.append(boxes[di])
        survivors = []
        for ti, t in enumerate(self.tracks):
            if ti not in used_t:
                t.frames_since_seen += 1
                if t.frames_since_seen > self.max_age:
                    continue
            survivors.append(t)
        for di, b in enumerate(boxes):
            if di not in used_d:
                survivors.append(Track(self.next_id, b, history=[b]))
                self.next_id += 1
        self.tracks = survivors
        return self.tracks


def update_tracks(tracker, dets):
    return tracker.update(dets)


def detections_to_csv(rows):
    """``rows`` of (frame, Detection) as ``frame,x,y,w,h,score`` CSV text."""
    lines = ["frame,x,y,w,h,score"]
    lines += [f"{fr},{d.x},{d.y},{d.w},{d.h},{d.score:.6f}" for fr, d in rows]
    return "\n".join(lines) + "\n"
