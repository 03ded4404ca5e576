"""Little-endian binary framing shared by codec, model, trace, cache and adapter files.

Every file starts with an 8-byte magic and a u32 version. Arrays are stored as
binary32, little-endian, row-major, each preceded by a name and shape header.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

VERSION = 1


class FormatError(ValueError):
    """Raised for truncated, corrupt, or version-mismatched files."""


class Writer:
    def __init__(self, magic: bytes, version: int = VERSION):
        if len(magic) != 8:
            raise ValueError("magic must be 8 bytes")
        self.buf = io.BytesIO()
        self.buf.write(magic)
        self.u32(version)

    def u8(self, v: int) -> None:
        self.buf.write(struct.pack("<B", v))

    def u16(self, v: int) -> None:
        self.buf.write(struct.pack("<H", v))

    def u32(self, v: int) -> None:
        self.buf.write(struct.pack("<I", v))

    def f32(self, v: float) -> None:
        self.buf.write(struct.pack("<f", v))

    def f64(self, v: float) -> None:
        self.buf.write(struct.pack("<d", v))

    def text(self, s: str) -> None:
        b = s.encode("utf-8")
        self.u16(len(b))
        self.buf.write(b)

    def blob(self, b: bytes) -> None:
        self.u32(len(b))
        self.buf.write(b)

    def payload(self, arr: np.ndarray) -> None:
        self.buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    def named_array(self, name: str, arr: np.ndarray) -> None:
        arr = np.asarray(arr)
        self.text(name)
        self.u8(arr.ndim)
        for d in arr.shape:
            self.u32(d)
        self.payload(arr)

    def getvalue(self) -> bytes:
        return self.buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_bytes(self.getvalue())


class Reader:
    def __init__(self, data: bytes, magic: bytes, version: int = VERSION):
        self.data = data
        self.pos = 0
        got = self._take(8)
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}")
        v = self.u32()
        if v != version:
            raise FormatError(f"version mismatch: file has {v}, reader expects {version}")

    @classmethod
    def open(cls, path, magic: bytes, version: int = VERSION) -> "Reader":
        return cls(Path(path).read_bytes(), magic, version)

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"truncated file: need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self._take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self._take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def text(self) -> str:
        n = self.u16()
        return self._take(n).decode("utf-8")

    def blob(self) -> bytes:
        n = self.u32()
        return self._take(n)

    def payload(self, shape) -> np.ndarray:
        count = int(np.prod(shape)) if len(shape) else 1
        raw = self._take(4 * count)
        return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)

    def named_array(self) -> tuple[str, np.ndarray]:
        name = self.text()
        ndim = self.u8()
        shape = tuple(self.u32() for _ in range(ndim))
        return name, self.payload(shape)

    def at_end(self) -> bool:
        return self.pos == len(self.data)

    def expect_end(self) -> None:
        if not self.at_end():
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes after payload")


def save_state(path, magic: bytes, meta: dict, arrays: dict[str, np.ndarray], ints=()) -> None:
    """Write a checkpoint: magic, version, header ints, JSON meta, named arrays."""
    w = Writer(magic)
    for v in ints:
        w.u32(int(v))
    w.blob(json.dumps(meta, sort_keys=True).encode("utf-8"))
    w.u32(len(arrays))
    for name, arr in arrays.items():
        w.named_array(name, arr)
    w.save(path)


def load_state(path, magic: bytes, n_ints: int = 0):
    r = Reader.open(path, magic)
    ints = tuple(r.u32() for _ in range(n_ints))
    meta = json.loads(r.blob().decode("utf-8"))
    count = r.u32()
    arrays = {}
    for _ in range(count):
        name, arr = r.named_array()
        arrays[name] = arr
    r.expect_end()
    return ints, meta, arrays
