"""8-bit raster buffers and binary PPM/PGM (plus PNG) codecs."""

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


@dataclass
class ImageBuffer:
    """Row-major 8-bit samples stored as an (height, width, channels) array."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"image must be HxWx1 or HxWx3, got {px.shape}")
        self.pixels = np.ascontiguousarray(px, dtype=np.uint8)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return self.pixels.shape[2]

    @property
    def samples(self):
        return self.pixels.reshape(-1)

    def copy(self):
        return ImageBuffer(self.pixels.copy())

    def __eq__(self, other):
        return isinstance(other, ImageBuffer) and np.array_equal(self.pixels, other.pixels)


def to_gray(img):
    """Luma ``round(0.299 R + 0.587 G + 0.114 B)`` as an (H, W) uint8 array."""
    px = img.pixels if isinstance(img, ImageBuffer) else np.asarray(img)
    if px.ndim == 2:
        return px.astype(np.uint8)
    if px.shape[2] == 1:
        return px[:, :, 0].copy()
    rgb = px.astype(np.float64)
    luma = 0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2]
    return np.clip(np.floor(luma + 0.5), 0, 255).astype(np.uint8)


def _pnm_header(data):
    """Return (magic, width, height, maxval, data_offset)."""
    fields = []
    pos = 2
    n = len(data)
    while len(fields) < 3:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError("corrupt image: malformed PNM header")
        fields.append(int(data[start:pos]))
    if pos >= n or not data[pos:pos + 1].isspace():
        raise ImageFormatError("corrupt image: malformed PNM header")
    return data[:2], fields[0], fields[1], fields[2], pos + 1


def decode_pnm(data):
    magic, width, height, maxval, offset = _pnm_header(data)
    if width < 1 or height < 1:
        raise ImageFormatError("corrupt image: zero image extent")
    if not 1 <= maxval <= 255:
        raise ImageFormatError(f"unsupported format: maxval {maxval} (8-bit only)")
    channels = 3 if magic == b"P6" else 1
    size = width * height * channels
    if len(data) - offset < size:
        raise ImageFormatError("corrupt image: truncated pixel data")
    px = np.frombuffer(data, dtype=np.uint8, count=size, offset=offset).reshape(height, width, channels)
    if maxval != 255:
        px = np.round(px.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return ImageBuffer(px)


def decode_image(data):
    """Decode binary PPM (P6), PGM (P5) or PNG bytes."""
    data = bytes(data)
    if data[:2] in (b"P5", b"P6"):
        return decode_pnm(data)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        try:
            with Image.open(io.BytesIO(data)) as im:
                im.load()
                if im.mode not in ("L", "RGB"):
                    im = im.convert("RGB" if "A" in im.mode or im.mode == "P" else "L")
                return ImageBuffer(np.asarray(im))
        except (OSError, SyntaxError) as exc:
            raise ImageFormatError(f"corrupt image: {exc}") from exc
    raise ImageFormatError("unsupported format")


def encode_pnm(img):
    """PGM for single-channel buffers, PPM for RGB."""
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + f"\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.pixels.tobytes()


def encode_png(img):
    from PIL import Image

    px = img.pixels[:, :, 0] if img.channels == 1 else img.pixels
    buf = io.BytesIO()
    Image.fromarray(px).save(buf, format="PNG")
    return buf.getvalue()


def read_image(path):
    return decode_image(Path(path).read_bytes())


def write_image(path, img):
    path = Path(path)
    data = encode_png(img) if path.suffix.lower() == ".png" else encode_pnm(img)
    path.write_bytes(data)
    return path
