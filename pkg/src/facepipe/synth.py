"""Desk-generated fixtures: procedural face identities and pasted-face frames.

``render_identity_face`` draws cartoon faces whose identity is a fixed set of
geometric and colour traits, with per-image pose, expression, lighting and
noise variation. ``pasted_face_frame`` places a real face crop (a public
domain NASA portrait shipped in ``data/face_crop.ppm``) on a synthetic
background at a known bounding box.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import resize_bilinear
from .imageio import ImageBuffer, read_image, write_image

FACE_CROP = Path(__file__).parent / "data" / "face_crop.ppm"
IDENTITY_NAMES = ("Ada", "Bao", "Cleo", "Dev", "Eli", "Fay", "Gus", "Hana")


@dataclass(frozen=True)
class Identity:
    name: str
    head_w: float
    head_h: float
    skin: tuple
    hair: tuple
    hair_style: int  # 0 short cap, 1 long sides, 2 bald, 3 fringe
    eye_gap: float
    eye_y: float
    eye_size: float
    iris: tuple
    brow_tilt: float
    nose_len: float
    mouth_w: float
    glasses: bool
    beard: bool


def make_identities(n=4, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        out.append(Identity(
            name=IDENTITY_NAMES[i] if i < len(IDENTITY_NAMES) else f"id{i}",
            head_w=rng.uniform(0.28, 0.36),
            head_h=rng.uniform(0.36, 0.44),
            skin=tuple(np.array([95, 60, 45]) + rng.uniform(0.2, 1.0) * np.array([145, 140, 130])),
            hair=tuple(rng.uniform(10, 200, size=3)),
            hair_style=i % 4,
            eye_gap=rng.uniform(0.17, 0.25),
            eye_y=rng.uniform(-0.12, -0.04),
            eye_size=rng.uniform(0.035, 0.06),
            iris=tuple(rng.uniform(0, 160, size=3)),
            brow_tilt=rng.uniform(-0.4, 0.4),
            nose_len=rng.uniform(0.08, 0.16),
            mouth_w=rng.uniform(0.10, 0.20),
            glasses=i % 3 == 1,
            beard=i % 4 == 2,
        ))
    return out


def _ellipse(gx, gy, cx, cy, rx, ry, soft=1.0):
    d = np.sqrt(((gx - cx) / rx) ** 2 + ((gy - cy) / ry) ** 2)
    return np.clip((1.0 - d) * min(rx, ry) / soft + 0.5, 0.0, 1.0)


def _blend(canvas, mask, color):
    canvas *= 1.0 - mask[..., None]
    canvas += mask[..., None] * np.asarray(color, dtype=np.float64)


def render_identity_face(ident, size=64, rng=None):
    """Render one RGB image of ``ident`` with random nuisance variation."""
    rng = np.random.default_rng() if rng is None else rng
    scale = size * rng.uniform(0.88, 1.12)
    cx = size / 2 + rng.uniform(-0.08, 0.08) * size
    cy = size / 2 + rng.uniform(-0.06, 0.08) * size
    angle = np.deg2rad(rng.uniform(-12, 12))
    yaw = rng.uniform(-0.05, 0.05)
    smile = rng.uniform(-0.6, 1.0)
    blink = rng.uniform(0.35, 1.0)
    light_dir = rng.uniform(0, 2 * np.pi)
    light_amp = rng.uniform(0.0, 0.35)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    ca, sa = np.cos(angle), np.sin(angle)
    # face-frame coordinates in units of ``scale``
    u = ((xx - cx) * ca + (yy - cy) * sa) / scale - yaw
    v = (-(xx - cx) * sa + (yy - cy) * ca) / scale
    px = 1.0 / scale

    bg0 = rng.uniform(0, 255, size=3)
    bg1 = rng.uniform(0, 255, size=3)
    t = (xx / size)[..., None]
    canvas = bg0 * (1 - t) + bg1 * t
    canvas += rng.normal(0, 10, size=(size // 8 + 1, size // 8 + 1, 1)).repeat(8, 0).repeat(8, 1)[:size, :size]

    hw, hh = ident.head_w, ident.head_h
    if ident.hair_style == 1:
        _blend(canvas, _ellipse(u, v, 0, 0.05, hw * 1.25, hh * 1.15, px), ident.hair)
    _blend(canvas, _ellipse(u, v, 0, 0, hw, hh, px), ident.skin)
    if ident.hair_style in (0, 1, 3):
        cap = _ellipse(u, v, 0, -hh * 0.55, hw * 1.05, hh * 0.55, px) * (v < -hh * 0.35 + 0.03 * u)
        if ident.hair_style == 3:
            cap = np.maximum(cap, _ellipse(u, v, -hw * 0.3, -hh * 0.45, hw * 0.6, hh * 0.25, px))
        _blend(canvas, cap, ident.hair)
    if ident.beard:
        jaw = _ellipse(u, v, 0, hh * 0.55, hw * 0.9, hh * 0.5, px) * (v > hh * 0.2)
        _blend(canvas, jaw * _ellipse(u, v, 0, 0, hw, hh, px), ident.hair)

    for side in (-1, 1):
        ex = side * ident.eye_gap / 2
        ey = ident.eye_y
        r = ident.eye_size
        _blend(canvas, _ellipse(u, v, ex, ey, r * 1.4, r * blink, px), (245, 245, 245))
        _blend(canvas, _ellipse(u, v, ex, ey, r * 0.7, r * 0.7 * blink, px), ident.iris)
        by = ey - r * 2.2
        brow = (np.abs(v - by - side * ident.brow_tilt * (u - ex)) < r * 0.45) * (np.abs(u - ex) < r * 1.8)
        _blend(canvas, brow.astype(np.float64), np.asarray(ident.hair) * 0.6)
        if ident.glasses:
            ring = _ellipse(u, v, ex, ey, r * 2.4, r * 2.0, px) - _ellipse(u, v, ex, ey, r * 2.0, r * 1.6, px)
            _blend(canvas, np.clip(ring, 0, 1), (20, 20, 20))

    nose = (np.abs(u) < 0.018) * (v > ident.eye_y + 0.02) * (v < ident.eye_y + 0.02 + ident.nose_len)
    _blend(canvas, nose.astype(np.float64) * 0.6, np.asarray(ident.skin) * 0.55)
    my = ident.eye_y + ident.nose_len + 0.1
    curve = my - smile * 0.06 * (1 - (u / ident.mouth_w) ** 2)
    mouth = (np.abs(v - curve) < 0.018) * (np.abs(u) < ident.mouth_w)
    _blend(canvas, mouth.astype(np.float64), (150, 40, 50))

    shade = 1.0 + light_amp * ((xx - size / 2) * np.cos(light_dir) + (yy - size / 2) * np.sin(light_dir)) / size
    canvas = canvas * shade[..., None] * rng.uniform(0.85, 1.15, size=3)
    canvas += rng.normal(0, 6, size=canvas.shape)
    return ImageBuffer(np.clip(np.floor(canvas + 0.5), 0, 255).astype(np.uint8))


def write_identity_dataset(root, n_identities=4, per_class=100, size=64, seed=0):
    """Write ``root/<name>/img_%04d.ppm`` for each generated identity."""
    root = Path(root)
    idents = make_identities(n_identities, seed)
    for k, ident in enumerate(idents):
        d = root / ident.name
        d.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng([seed, k])
        for i in range(per_class):
            write_image(d / f"img_{i:04d}.ppm", render_identity_face(ident, size, rng))
    return [ident.name for ident in idents]


def face_crop():
    return read_image(FACE_CROP)


def background(height, width, seed=0):
    """Smooth low-texture RGB background."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width)
    base = rng.uniform(60, 190, size=3)
    grad = rng.uniform(-40, 40, size=(2, 3))
    img = base + xx[..., None] * grad[0] + yy[..., None] * grad[1]
    img += rng.normal(0, 3, size=img.shape)
    return np.clip(img, 0, 255)


def pasted_face_frame(height, width, bbox, seed=0, face=None):
    """Background frame with the face crop resized into ``bbox`` (x, y, w, h)."""
    face = face_crop() if face is None else face
    x, y, w, h = bbox
    img = background(height, width, seed)
    patch = resize_bilinear(face.pixels, h, w)
    if patch.shape[2] == 1:
        patch = np.repeat(patch, 3, axis=2)
    img[y:y + h, x:x + w] = patch
    return ImageBuffer(np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8))


def moving_face_sequence(n_frames=10, height=64, width=64, face_size=44, start=(4, 6), velocity=(1, 0),
                         seed=0):
    """Frames of one pasted face moving ``velocity`` pixels per frame.

    Returns ``(frames, boxes)``.
    """
    face = face_crop()
    frames, boxes = [], []
    for i in range(n_frames):
        x = start[0] + velocity[0] * i
        y = start[1] + velocity[1] * i
        box = (x, y, face_size, face_size)
        frames.append(pasted_face_frame(height, width, box, seed, face))
        boxes.append(box)
    return frames, boxes
