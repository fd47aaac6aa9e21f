"""Portable pixmap codec and frame-directory ingestion."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

logger = logging.getLogger(__name__)

PNM_SUFFIXES = {".ppm", ".pnm", ".pgm"}
IMAGE_SUFFIXES = PNM_SUFFIXES | {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


class ImageDecodeError(ValueError):
    pass


def write_ppm(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as binary P6 with maxval 255."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"write_ppm expects an (H, W, 3) uint8 array, got {img.shape} {img.dtype}")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img).tobytes())


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    # header tokens separated by whitespace, '#' comments run to end of line
    toks: list[bytes] = []
    i = 0
    n = len(data)
    while len(toks) < count:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i < n and data[i : i + 1] == b"#":
            while i < n and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not data[i : i + 1].isspace() and data[i : i + 1] != b"#":
            i += 1
        if start == i:
            raise ImageDecodeError("truncated PNM header")
        toks.append(data[start:i])
    return toks, i


def decode_pnm(data: bytes) -> np.ndarray:
    """Decode P6/P5/P3/P2 into an (H, W, 3) uint8 array (grey is replicated)."""
    magic = data[:2]
    if magic not in (b"P6", b"P5", b"P3", b"P2"):
        raise ImageDecodeError(f"not a PNM file (magic {magic!r})")
    toks, pos = _tokens(data[2:], 3)
    try:
        w, h, maxval = (int(t) for t in toks)
    except ValueError as exc:
        raise ImageDecodeError(f"bad PNM header: {exc}") from exc
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise ImageDecodeError(f"bad PNM dimensions {w}x{h} maxval {maxval}")
    channels = 3 if magic in (b"P6", b"P3") else 1
    count = w * h * channels
    body_start = 2 + pos + 1  # exactly one whitespace byte follows maxval
    if magic in (b"P6", b"P5"):
        dtype = np.dtype(">u2" if maxval > 255 else np.uint8)
        raw = data[body_start : body_start + count * dtype.itemsize]
        if len(raw) < count * dtype.itemsize:
            raise ImageDecodeError(f"PNM raster truncated: {len(raw)} of {count * dtype.itemsize} bytes")
        values = np.frombuffer(raw, dtype=dtype).astype(np.float64 if maxval != 255 else np.uint8)
    else:
        parts = data[2 + pos :].split()
        if len(parts) < count:
            raise ImageDecodeError(f"PNM raster truncated: {len(parts)} of {count} samples")
        values = np.array(parts[:count], dtype=np.int64).astype(np.float64 if maxval != 255 else np.uint8)
    if maxval != 255:
        values = np.clip(np.round(values * (255.0 / maxval)), 0, 255).astype(np.uint8)
    img = values.reshape(h, w, channels)
    if channels == 1:
        img = np.repeat(img, 3, axis=2)
    return img


def read_image(path) -> np.ndarray:
    """Read any supported image file as (H, W, 3) uint8."""
    path = Path(path)
    if path.suffix.lower() in PNM_SUFFIXES:
        return decode_pnm(path.read_bytes())
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"cannot decode {path.name}: {exc}") from exc


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of an (H, W, 3) uint8 image to size x size; a no-op when already that size."""
    if image.shape[0] == size and image.shape[1] == size:
        return image
    return np.asarray(Image.fromarray(image).resize((size, size), Image.BILINEAR), dtype=np.uint8)


def to_chw(image: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [0, 1]."""
    return np.ascontiguousarray(image.transpose(2, 0, 1), dtype=np.float32) / np.float32(255.0)


def load_frame(path, size: int) -> np.ndarray:
    return to_chw(resize_bilinear(read_image(path), size))


@dataclass
class SkippedFile:
    path: str
    reason: str


@dataclass
class Ingested:
    frames: np.ndarray
    paths: list[str]
    skipped: list[SkippedFile]

    def __len__(self) -> int:
        return len(self.frames)


def list_frames(path) -> list[Path]:
    """Regular files of ``path`` in lexicographic filename order."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"frame directory {root} does not exist")
    return sorted((p for p in root.iterdir() if p.is_file()), key=lambda p: p.name)


def ingest_directory(path, target_size: int) -> Ingested:
    """Decode, resize and normalize every image in ``path``.

    Files that fail to decode are skipped and reported in ``skipped``; an
    empty result raises ``ValueError``.
    """
    frames, paths, skipped = [], [], []
    for p in list_frames(path):
        try:
            frames.append(load_frame(p, target_size))
            paths.append(os.fspath(p))
        except (ImageDecodeError, ValueError) as exc:
            logger.warning("skipping %s: %s", p.name, exc)
            skipped.append(SkippedFile(os.fspath(p), str(exc)))
    if not frames:
        raise ValueError(f"no decodable frames in {path}")
    return Ingested(np.stack(frames), paths, skipped)
