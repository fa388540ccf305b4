"""Binary weight files and segment-wise weight transfer.

Layout (little-endian)::

    b"SDW1"  u32 n_segments
    per segment:  u8 name_len, name, u32 n_params,
                  per param: u32 rank, u32 dims[rank], f32 data[prod(dims)]
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from simdet.diffcore.net import SEGMENT_NAMES, DetectorNet
from simdet.errors import ConfigurationError, FormatError

MAGIC = b"SDW1"


def encode_weights(segments: dict[str, list[np.ndarray]]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(segments)))
    for name, params in segments.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<B", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", len(params)))
        for arr in params:
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.source}: truncated weight file (need {n} bytes at offset {self.pos})")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode_weights(data: bytes, source: str = "<bytes>") -> dict[str, list[np.ndarray]]:
    r = _Reader(data, source)
    magic = r.take(4)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    out: dict[str, list[np.ndarray]] = {}
    for _ in range(r.u32()):
        (name_len,) = struct.unpack("<B", r.take(1))
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{source}: segment name is not utf-8") from exc
        params = []
        for _ in range(r.u32()):
            rank = r.u32()
            shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
            count = int(np.prod(shape)) if rank else 1
            params.append(np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape))
        out[name] = params
    if r.pos != len(data):
        raise FormatError(f"{source}: {len(data) - r.pos} trailing bytes after last segment")
    return out


def save_weights(net: DetectorNet, path) -> None:
    path = Path(path)
    try:
        path.write_bytes(encode_weights(net.state()))
    except OSError as exc:
        raise OSError(f"cannot write weights to {path}: {exc}") from exc


def load_weights(path) -> dict[str, list[np.ndarray]]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read weights from {path}: {exc}") from exc
    return decode_weights(data, str(path))


def transfer_weights(dst: DetectorNet, src_file, segments: Iterable[str]) -> None:
    """Overwrite the named segments of ``dst`` with values stored in ``src_file``.

    Shapes are validated for every requested segment before anything is
    written, so a failed transfer leaves ``dst`` untouched.
    """
    names = list(dict.fromkeys(segments))
    unknown = set(names) - set(SEGMENT_NAMES)
    if unknown:
        raise ConfigurationError(f"unknown segment(s) {sorted(unknown)}; valid: {list(SEGMENT_NAMES)}")
    src = load_weights(src_file)
    for name in names:
        if name not in src:
            raise FormatError(f"{src_file}: segment {name!r} missing from weight file")
        dst_params = dst.segments[name].params()
        src_params = src[name]
        if len(src_params) != len(dst_params) or any(
            a.shape != p.data.shape for a, p in zip(src_params, dst_params)
        ):
            raise FormatError(
                f"{src_file}: segment {name!r} shape mismatch: file has "
                f"{[a.shape for a in src_params]}, network expects {[p.data.shape for p in dst_params]}"
            )
    for name in names:
        for p, a in zip(dst.segments[name].params(), src[name]):
            p.data = a.astype(p.data.dtype, copy=True)
            p.grad = None
            dst.velocity.pop(p.name, None)
