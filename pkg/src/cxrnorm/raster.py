"""Grayscale images, binary masks, warping, box rasterization, and file I/O.

Intensities use a normalized real [0, 1] value model regardless of the
source bit depth.  Warps iterate output pixels and sample the source
through the inverse transform: bilinear with zero fill for intensities,
nearest-neighbor for masks.  Sampling positions use the package-wide
convention that integer coordinates are pixel centers.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import IoFailure, ToolkitError
from .geometry import AffineTransform, invert

Image.MAX_IMAGE_PIXELS = None


class UnsupportedFormat(ToolkitError):
    pass


class CorruptFile(ToolkitError):
    pass


@dataclass(frozen=True)
class GrayImage:
    """A width x height grayscale raster with values in [0, 1].

    pixels is a (height, width) float32 array; rows are y, columns x.
    """

    pixels: np.ndarray

    def __post_init__(self) -> None:
        a = self.pixels
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise ValueError(f"expected a non-empty 2-D array, got shape {a.shape}")
        if a.dtype != np.float32:
            raise ValueError(f"expected float32 pixels, got {a.dtype}")
        if not np.isfinite(a).all():
            raise ValueError("image contains non-finite values")
        if float(a.min()) < 0.0 or float(a.max()) > 1.0:
            raise ValueError("image values must lie in [0, 1]")

    @classmethod
    def from_array(cls, a: np.ndarray) -> "GrayImage":
        return cls(np.ascontiguousarray(a, dtype=np.float32))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class BinaryMask:
    """A width x height raster of {0, 1} bits stored as uint8."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        a = self.bits
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise ValueError(f"expected a non-empty 2-D array, got shape {a.shape}")
        if a.dtype != np.uint8:
            raise ValueError(f"expected uint8 bits, got {a.dtype}")
        if a.max(initial=0) > 1:
            raise ValueError("mask values must be strictly 0 or 1")

    @classmethod
    def from_array(cls, a: np.ndarray) -> "BinaryMask":
        return cls(np.ascontiguousarray(a, dtype=np.uint8))

    @classmethod
    def zeros(cls, w: int, h: int) -> "BinaryMask":
        return cls(np.zeros((h, w), dtype=np.uint8))

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]


@dataclass(frozen=True)
class Box:
    """Axis-aligned half-open box [x0, x1) x [y0, y1) in pixel units."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self) -> None:
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {self}")


def _inverse_sample_grid(t: AffineTransform, out_w: int, out_h: int):
    """Map every output pixel center through invert(t); returns float64 (u, v)."""
    inv = invert(t)
    xs = np.arange(out_w, dtype=np.float64)
    ys = np.arange(out_h, dtype=np.float64)
    X, Y = np.meshgrid(xs, ys)
    u = inv.a * X + inv.b * Y + inv.e
    v = inv.c * X + inv.d * Y + inv.f
    return u, v


def warp_image(src: GrayImage, t: AffineTransform, out_w: int, out_h: int) -> GrayImage:
    """Inverse-mapped bilinear warp; samples outside the source read as 0."""
    u, v = _inverse_sample_grid(t, out_w, out_h)
    h, w = src.pixels.shape
    # 2-pixel zero border lets all four neighbor fetches clip into zeros
    padded = np.zeros((h + 4, w + 4), dtype=np.float64)
    padded[2:-2, 2:-2] = src.pixels
    u0 = np.floor(u)
    v0 = np.floor(v)
    fu = u - u0
    fv = v - v0
    iu = np.clip(u0.astype(np.int64), -2, w) + 2
    iv = np.clip(v0.astype(np.int64), -2, h) + 2
    p00 = padded[iv, iu]
    p01 = padded[iv, iu + 1]
    p10 = padded[iv + 1, iu]
    p11 = padded[iv + 1, iu + 1]
    out = ((1.0 - fv) * ((1.0 - fu) * p00 + fu * p01)
           + fv * ((1.0 - fu) * p10 + fu * p11))
    return GrayImage(out.astype(np.float32))


def warp_mask(src: BinaryMask, t: AffineTransform, out_w: int, out_h: int) -> BinaryMask:
    """Inverse-mapped nearest-neighbor warp; out-of-bounds samples read as 0."""
    u, v = _inverse_sample_grid(t, out_w, out_h)
    h, w = src.bits.shape
    iu = np.floor(u + 0.5).astype(np.int64)
    iv = np.floor(v + 0.5).astype(np.int64)
    inside = (iu >= 0) & (iu < w) & (iv >= 0) & (iv < h)
    out = np.zeros((out_h, out_w), dtype=np.uint8)
    out[inside] = src.bits[iv[inside], iu[inside]]
    return BinaryMask(out)


def rasterize_boxes(boxes: list[Box], w: int, h: int) -> BinaryMask:
    """Set every pixel whose center lies in at least one half-open box.

    Boxes are clamped to the image bounds; pixel centers sit at integer
    coordinates, so a box (x0, y0, x1, y1) covers columns ceil(x0) ..
    ceil(x1)-1 and likewise for rows.
    """
    bits = np.zeros((h, w), dtype=np.uint8)
    for b in boxes:
        cx0 = max(0, int(np.ceil(b.x0)))
        cy0 = max(0, int(np.ceil(b.y0)))
        cx1 = min(w, int(np.ceil(b.x1)))
        cy1 = min(h, int(np.ceil(b.y1)))
        if cx0 < cx1 and cy0 < cy1:
            bits[cy0:cy1, cx0:cx1] = 1
    return BinaryMask(bits)


def crop_scale_transform(w: int, h: int, out: int) -> AffineTransform:
    """Similarity mapping source coords to the center-crop-and-scale frame."""
    side = min(w, h)
    k = out / side
    off_x = (w - side) / 2.0
    off_y = (h - side) / 2.0
    return AffineTransform(k, 0.0, 0.0, k, -k * off_x, -k * off_y)


def center_crop_scale(src: GrayImage, out: int) -> GrayImage:
    """Central square crop of side min(w, h), resampled bilinearly to out x out."""
    return warp_image(src, crop_scale_transform(src.width, src.height, out), out, out)


def _to_uint(img: GrayImage, bit_depth: int) -> np.ndarray:
    maxval = (1 << bit_depth) - 1
    q = np.rint(img.pixels.astype(np.float64) * maxval)
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    return q.astype(dtype)


def write_image(img: GrayImage, path: str | Path, bit_depth: int = 16) -> None:
    """Write a grayscale PNG (8 or 16 bit) or a binary PGM (P5, by extension)."""
    if bit_depth not in (8, 16):
        raise UnsupportedFormat(f"bit depth must be 8 or 16, got {bit_depth}")
    path = Path(path)
    arr = _to_uint(img, bit_depth)
    try:
        if path.suffix.lower() == ".pgm":
            _write_pgm(arr, path, bit_depth)
        else:
            Image.fromarray(arr).save(path, format="PNG")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def write_mask(mask: BinaryMask, path: str | Path) -> None:
    """Write a mask as an 8-bit PNG with bits scaled to {0, 255}."""
    try:
        Image.fromarray(mask.bits * np.uint8(255)).save(Path(path), format="PNG")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_mask(path: str | Path) -> BinaryMask:
    img = read_image(path)
    return BinaryMask((img.pixels >= 0.5).astype(np.uint8))


def read_image(path: str | Path) -> GrayImage:
    """Read an 8/16-bit grayscale PNG or a P5 PGM into a [0, 1] image."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return _read_pgm(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "L":
                arr = np.asarray(im, dtype=np.float64) / 255.0
            elif mode in ("I;16", "I;16B", "I;16L"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            elif mode == "I":
                raw = np.asarray(im, dtype=np.float64)
                if raw.max(initial=0.0) > 65535.0 or raw.min(initial=0.0) < 0.0:
                    raise UnsupportedFormat(f"{path}: integer image outside 16-bit range")
                arr = raw / 65535.0
            else:
                raise UnsupportedFormat(f"{path}: unsupported mode {mode!r} (grayscale only)")
    except FileNotFoundError as exc:
        raise IoFailure(f"no such file: {path}") from exc
    except UnidentifiedImageError as exc:
        raise CorruptFile(f"unreadable image file: {path}") from exc
    except (SyntaxError, ValueError) as exc:
        raise CorruptFile(f"corrupt image file {path}: {exc}") from exc
    except OSError as exc:
        raise CorruptFile(f"cannot decode {path}: {exc}") from exc
    return GrayImage(arr.astype(np.float32))


def _write_pgm(arr: np.ndarray, path: Path, bit_depth: int) -> None:
    maxval = (1 << bit_depth) - 1
    h, w = arr.shape
    payload = arr.astype(">u2").tobytes() if bit_depth == 16 else arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(payload)


def _read_pgm(path: Path) -> GrayImage:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise IoFailure(f"no such file: {path}") from exc
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if not data.startswith(b"P5"):
        raise UnsupportedFormat(f"{path}: not a binary PGM (P5) file")
    # header: magic, width, height, maxval -- whitespace/comment separated
    fields: list[int] = []
    pos = 2
    while len(fields) < 3 and pos < len(data):
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        try:
            fields.append(int(data[start:pos]))
        except ValueError as exc:
            raise CorruptFile(f"{path}: malformed PGM header") from exc
    if len(fields) < 3:
        raise CorruptFile(f"{path}: truncated PGM header")
    w, h, maxval = fields
    pos += 1  # single whitespace after maxval
    if maxval not in (255, 65535):
        raise UnsupportedFormat(f"{path}: PGM maxval must be 255 or 65535, got {maxval}")
    dtype = np.uint8 if maxval == 255 else np.dtype(">u2")
    try:
        raw = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos)
    except ValueError as exc:
        raise CorruptFile(f"{path}: truncated PGM payload") from exc
    arr = raw.reshape(h, w).astype(np.float64) / maxval
    return GrayImage(arr.astype(np.float32))
