"""Per-stage latency percentiles and end-to-end throughput."""

import json
import time
from dataclasses import asdict, dataclass

import numpy as np

from .pipeline import FramePipeline, PipelineConfig


@dataclass
class BenchReport:
    stages: dict  # name -> {"p50", "p95", "p99"} in milliseconds
    fps: float
    frames: int
    total_seconds: float

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def benchmark(stages, frames, warmup=30, min_frames=30):
    """Time ``stages`` (``(name, fn)`` pairs, each fed the previous stage's
    output) over every frame after ``warmup`` untimed frames."""
    frames = list(frames)
    if len(frames) < min_frames:
        raise ValueError(f"need at least {min_frames} measured frames, got {len(frames)}")
    for i in range(warmup):
        value = frames[i % len(frames)]
        for _, fn in stages:
            value = fn(value)
    samples = {name: [] for name, _ in stages}
    clock = time.perf_counter
    start = clock()
    for frame in frames:
        value = frame
        for name, fn in stages:
            t0 = clock()
            value = fn(value)
            samples[name].append((clock() - t0) * 1e3)
    total = clock() - start
    pct = {name: {f"p{q}": float(np.percentile(v, q)) for q in (50, 95, 99)}
           for name, v in samples.items()}
    return BenchReport(pct, len(frames) / total, len(frames), total)


def pipeline_stages(cascade, graph, config=None):
    """The recognition pipeline split into detect/classify/render stages."""
    pipe = FramePipeline(cascade, graph, config or PipelineConfig(threaded=False))
    counter = {"i": 0}

    def detect(frame):
        i = counter["i"]
        counter["i"] += 1
        tracks, mode = pipe.detect(i, frame)
        return frame, tracks, mode

    def classify(state):
        frame, tracks, mode = state
        return frame, pipe.classify(frame, tracks, mode)

    def render(state):
        frame, faces = state
        return pipe.render(frame, faces)

    return [("detect", detect), ("classify", classify), ("render", render)]
