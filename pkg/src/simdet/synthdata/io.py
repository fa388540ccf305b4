"""Annotation text files and binary PPM images."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from simdet.errors import FormatError, InvalidInputError, ParseError
from simdet.geometry import BBox


class ClassRangeError(InvalidInputError):
    """A class id lies outside ``[0, K)``."""


def format_annotations(annotations: Iterable[tuple[int, BBox]]) -> str:
    return "".join(f"{cls} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}\n" for cls, b in annotations)


def write_annotations(path, annotations: Iterable[tuple[int, BBox]]) -> None:
    Path(path).write_text(format_annotations(annotations), encoding="ascii", newline="\n")


def parse_annotations(text: str, num_classes: int | None = None, source: str = "<text>") -> list[tuple[int, BBox]]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 5:
            raise ParseError(f"{source}: expected 5 fields, got {len(fields)}", lineno)
        try:
            cls = int(fields[0])
            vals = [float(v) for v in fields[1:]]
            box = BBox(*vals)
        except ValueError as exc:
            raise ParseError(f"{source}: {exc}", lineno) from exc
        if cls < 0 or (num_classes is not None and cls >= num_classes):
            raise ClassRangeError(f"{source}: line {lineno}: class id {cls} outside [0, {num_classes})")
        out.append((cls, box))
    return out


def read_annotations(path, num_classes: int | None = None) -> list[tuple[int, BBox]]:
    path = Path(path)
    return parse_annotations(path.read_text(encoding="ascii"), num_classes, str(path))


def write_ppm(path, image: np.ndarray) -> None:
    """Write an ``(H, W, 3)`` uint8 array as binary P6."""
    img = np.ascontiguousarray(image, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidInputError(f"PPM needs an (H, W, 3) array, got {img.shape}")
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_ppm(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.find(b"\n", pos) + 1 or len(data)
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PPM header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    body = data[pos : pos + w * h * 3]
    if len(body) != w * h * 3:
        raise FormatError(f"{path}: expected {w * h * 3} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def load_image(path) -> np.ndarray:
    """PPM file as float32 in [0, 1]."""
    return read_ppm(path).astype(np.float32) / 255.0


def class_counts(annotations: Sequence[tuple[int, BBox]], num_classes: int) -> list[int]:
    counts = [0] * num_classes
    for cls, _ in annotations:
        counts[cls] += 1
    return counts
