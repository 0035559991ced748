"""Dataset construction: frame extraction, split manifests, preprocessing."""

import csv
import io
import shlex
import shutil
import subprocess
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageio import ImageBuffer, read_image

SPLITS = ("train", "validation", "test")
IMAGE_SUFFIXES = {".ppm", ".pgm", ".png"}
DEFAULT_EXTRACTOR = "ffmpeg -hide_banner -loglevel error -i {input} -vf fps={fps} {outdir}/frame_%06d.ppm"


class DatasetError(ValueError):
    pass


class ConfigurationError(RuntimeError):
    pass


class FrameExtractionError(RuntimeError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple = (0.75, 0.25, 0.0)
    seed: int = 0

    def __post_init__(self):
        fr = tuple(float(f) for f in self.fractions)
        if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be 3 non-negative values summing to 1, got {fr}")
        object.__setattr__(self, "fractions", fr)


@dataclass
class DatasetManifest:
    entries: list  # (relative path, label, split)
    root: str = "."
    seed: int = 0
    fractions: tuple = (0.75, 0.25, 0.0)

    labels: list = field(init=False)

    def __post_init__(self):
        self.entries = [tuple(e) for e in self.entries]
        self.labels = sorted({label for _, label, _ in self.entries})
        paths = [p for p, _, _ in self.entries]
        if len(set(paths)) != len(paths):
            raise DatasetError("manifest paths must be unique")
        for _, _, split in self.entries:
            if split not in SPLITS:
                raise DatasetError(f"unknown split {split!r}")

    def split(self, name):
        return [(p, label) for p, label, s in self.entries if s == name]

    def counts(self):
        """{label: {split: count}}"""
        out = {label: dict.fromkeys(SPLITS, 0) for label in self.labels}
        for _, label, split in self.entries:
            out[label][split] += 1
        return out

    def resolve(self, rel_path):
        return Path(self.root) / rel_path

    def to_csv(self):
        buf = io.StringIO()
        fr = ",".join(repr(f) for f in self.fractions)
        buf.write(f"# facepipe manifest seed={self.seed} fractions={fr} root={self.root}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["path", "label", "split"])
        writer.writerows(self.entries)
        return buf.getvalue()

    def save(self, path):
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def from_csv(cls, text, root=None):
        lines = text.splitlines()
        seed, fractions, stored_root = 0, (0.75, 0.25, 0.0), "."
        body = []
        for line in lines:
            if line.startswith("#"):
                for tok in line[1:].split():
                    key, _, val = tok.partition("=")
                    if key == "seed":
                        seed = int(val)
                    elif key == "fractions":
                        fractions = tuple(float(v) for v in val.split(","))
                    elif key == "root":
                        stored_root = line.split("root=", 1)[1].strip()
                continue
            body.append(line)
        rows = list(csv.reader(body))
        if not rows or rows[0] != ["path", "label", "split"]:
            raise DatasetError("manifest must start with a path,label,split header")
        return cls([tuple(r) for r in rows[1:] if r], root if root is not None else stored_root,
                   seed, fractions)

    @classmethod
    def load(cls, path, root=None):
        return cls.from_csv(Path(path).read_text(encoding="utf-8"), root)


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def split_counts(n, fractions):
    n_train = max(1, _round_half_up(fractions[0] * n)) if n else 0
    n_train = min(n_train, n)
    n_val = min(_round_half_up(fractions[1] * n), n - n_train)
    return n_train, n_val, n - n_train - n_val


def assign_splits(files_by_label, spec):
    """Shuffle each label's files with a per-label seeded RNG and cut them
    into train/validation/test by ``spec.fractions``."""
    entries = []
    for label in sorted(files_by_label):
        files = sorted(files_by_label[label])
        if not files:
            raise DatasetError(f"label {label!r} has no images")
        rng = np.random.default_rng([spec.seed, zlib.crc32(label.encode("utf-8"))])
        order = rng.permutation(len(files))
        n_train, n_val, _ = split_counts(len(files), spec.fractions)
        for rank, idx in enumerate(order):
            split = "train" if rank < n_train else "validation" if rank < n_train + n_val else "test"
            entries.append((files[idx], label, split))
    split_rank = {s: i for i, s in enumerate(SPLITS)}
    entries.sort(key=lambda e: (e[1], split_rank[e[2]], e[0]))
    return entries


def build_manifest(root_dir, spec=SplitSpec()):
    """One label per immediate subdirectory of ``root_dir``."""
    root = Path(root_dir)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    files_by_label = {}
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        files = [f"{sub.name}/{f.name}" for f in sorted(sub.iterdir())
                 if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES]
        if not files:
            raise DatasetError(f"label directory {sub.name!r} contains no images")
        files_by_label[sub.name] = files
    if not files_by_label:
        raise DatasetError(f"no label directories under {root}")
    return DatasetManifest(assign_splits(files_by_label, spec), str(root_dir), spec.seed, spec.fractions)


def extract_frames(video_path, output_dir, fps, command=DEFAULT_EXTRACTOR):
    """Run the configured external decoder to dump ``frame_%06d`` images.

    ``command`` is a template with ``{input}``, ``{outdir}`` and ``{fps}``
    placeholders. Returns the number of frames written.
    """
    if fps <= 0:
        raise ValueError("fps must be positive")
    template = shlex.split(command)
    if not template:
        raise ConfigurationError("frame_extractor_cmd is empty")
    exe = template[0]
    if shutil.which(exe) is None:
        raise ConfigurationError(
            f"frame extractor {exe!r} not found; install it or set dataset.frame_extractor_cmd")
    if not Path(video_path).is_file():
        raise FrameExtractionError(f"video {video_path} does not exist")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    argv = [tok.format(input=str(video_path), outdir=str(out), fps=fps) for tok in template]
    proc = subprocess.run(argv, capture_output=True, text=True)
    if proc.returncode != 0:
        raise FrameExtractionError(
            f"{exe} exited with status {proc.returncode}: {proc.stderr.strip()}")
    return sum(1 for p in out.iterdir() if p.name.startswith("frame_"))


def resize_bilinear(px, height, width):
    """Bilinear resize with half-pixel centres; ``px`` is (H, W, C)."""
    src_h, src_w = px.shape[:2]
    src = px.astype(np.float64)
    ys = np.clip((np.arange(height) + 0.5) * (src_h / height) - 0.5, 0, src_h - 1)
    xs = np.clip((np.arange(width) + 0.5) * (src_w / width) - 0.5, 0, src_w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, src_h - 1)
    x1 = np.minimum(x0 + 1, src_w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bottom = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def preprocess(img, target, mean=None, channels=None):
    """Resize to ``target`` (h, w), scale to [0, 1], subtract per-channel mean.

    Returns a float32 tensor of shape 1xCxhxw.
    """
    h, w = target
    if h < 1 or w < 1:
        raise ValueError("target extent must be positive")
    px = img.pixels if isinstance(img, ImageBuffer) else np.asarray(img)
    if px.size == 0:
        raise ValueError("empty image")
    if channels == 3 and px.shape[2] == 1:
        px = np.repeat(px, 3, axis=2)
    elif channels == 1 and px.shape[2] == 3:
        from .imageio import to_gray
        px = to_gray(px)[:, :, None]
    if px.shape[:2] == (h, w):
        out = px.astype(np.float64)
    else:
        out = resize_bilinear(px, h, w)
    out = out / 255.0
    if mean is not None:
        out = out - np.asarray(mean, dtype=np.float64).reshape(1, 1, -1)
    return np.ascontiguousarray(out.transpose(2, 0, 1)[None], dtype=np.float32)


def augment(img, seed, flip_p=0.5, max_crop=0.1, force_flip=None):
    """Random horizontal flip and random crop of up to ``max_crop`` per side
    length. Deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    draw_flip, draw_cy, draw_cx, draw_oy, draw_ox = rng.random(5)
    flip = bool(force_flip) if force_flip is not None else draw_flip < flip_p
    px = img.pixels
    h, w = px.shape[:2]
    ch = h - int(np.floor(draw_cy * max_crop * h))
    cw = w - int(np.floor(draw_cx * max_crop * w))
    oy = int(np.floor(draw_oy * (h - ch + 1)))
    ox = int(np.floor(draw_ox * (w - cw + 1)))
    px = px[oy:oy + ch, ox:ox + cw]
    if flip:
        px = px[:, ::-1]
    return ImageBuffer(px.copy())


def compute_mean(images, target):
    """Per-channel mean of the preprocessed (unnormalised) images."""
    total = None
    for img in images:
        t = preprocess(img, target)[0].astype(np.float64).mean(axis=(1, 2))
        total = t if total is None else total + t
    return tuple(float(v) for v in total / len(images))


def load_images(manifest, split):
    """Decode every image of ``split``; returns (images, labels)."""
    pairs = manifest.split(split)
    return [read_image(manifest.resolve(p)) for p, _ in pairs], [label for _, label in pairs]


def to_tensor_batch(images, input_shape, mean=None):
    c, h, w = input_shape
    if not images:
        return np.zeros((0, c, h, w), dtype=np.float32)
    return np.concatenate([preprocess(img, (h, w), mean, channels=c) for img in images])
