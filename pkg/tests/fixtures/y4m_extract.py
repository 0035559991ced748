"""Tiny stand-in for an external video decoder.

Usage: y4m_extract.py INPUT.y4m FPS OUTDIR

Reads a 4:4:4 or mono YUV4MPEG2 stream and writes frame_%06d.ppm files,
keeping frames so the output rate approximates FPS.
"""

import sys
from pathlib import Path

import numpy as np


def read_y4m(path):
    data = Path(path).read_bytes()
    head, _, rest = data.partition(b"\n")
    tokens = head.split()
    if not tokens or tokens[0] != b"YUV4MPEG2":
        raise ValueError("not a YUV4MPEG2 stream")
    params = {t[:1]: t[1:].decode() for t in tokens[1:]}
    w, h = int(params[b"W"]), int(params[b"H"])
    num, den = (int(v) for v in params.get(b"F", "25:1").split(":"))
    planes = 1 if params.get(b"C", "444").startswith("mono") else 3
    size = w * h * planes
    frames = []
    while rest:
        marker, _, rest = rest.partition(b"\n")
        if not marker.startswith(b"FRAME") or len(rest) < size:
            raise ValueError("truncated frame")
        yuv = np.frombuffer(rest[:size], dtype=np.uint8).reshape(planes, h, w).astype(np.float64)
        rest = rest[size:]
        if planes == 1:
            rgb = np.repeat(yuv[0][..., None], 3, axis=2)
        else:
            y, u, v = yuv[0], yuv[1] - 128.0, yuv[2] - 128.0
            rgb = np.stack([y + 1.402 * v, y - 0.344136 * u - 0.714136 * v, y + 1.772 * u], axis=2)
        frames.append(np.clip(np.floor(rgb + 0.5), 0, 255).astype(np.uint8))
    return frames, num / den


def main(argv):
    src, fps, outdir = argv[1], float(argv[2]), Path(argv[3])
    frames, rate = read_y4m(src)
    outdir.mkdir(parents=True, exist_ok=True)
    step = max(1.0, rate / fps)
    n, t = 0, 0.0
    while int(t) < len(frames):
        px = frames[int(t)]
        h, w = px.shape[:2]
        (outdir / f"frame_{n + 1:06d}.ppm").write_bytes(b"P6\n%d %d\n255\n" % (w, h) + px.tobytes())
        n += 1
        t += step
    return 0


if __name__ == "__main__":
    try:
        sys.exit(main(sys.argv))
    except (ValueError, KeyError, IndexError, OSError) as exc:
        print(f"y4m_extract: {exc}", file=sys.stderr)
        sys.exit(1)
