"""F4D1 record container.

Layout::

    b"F4D1" | u32 LE header length | UTF-8 JSON header | records | u32 LE CRC32(records)

Each record is the arrays named in ``header["layout"]`` as raw float32
little-endian data, in declaration order, followed by 16 bytes of metadata
(four float32: VENC x/y/z and a fourth scalar, the fluid fraction).
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ChecksumError, FormatError, TruncatedFileError, ValidationError, VersionMismatchError

MAGIC = b"F4D1"
FORMAT_VERSION = 1
META_FIELDS = ("venc_x", "venc_y", "venc_z", "fluid_fraction")
_DT = np.dtype("<f4")
_CHUNK = 1 << 22


@dataclass
class Record:
    arrays: dict[str, np.ndarray]
    meta: np.ndarray  # float32[4]

    @property
    def venc(self) -> tuple[float, float, float]:
        return tuple(float(v) for v in self.meta[:3])

    @property
    def scalar(self) -> float:
        return float(self.meta[3])


def _normalize_layout(layout) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    for name, shape in layout:
        out.append((str(name), tuple(int(s) for s in shape)))
    return out


def record_nbytes(layout) -> int:
    return sum(int(np.prod(shape)) for _, shape in layout) * 4 + 16


class ContainerWriter:
    """Append-only writer; the final file appears atomically on ``close``.

    Records are staged in a sibling temp file so the header can carry the
    final count, and nothing is left at ``path`` if writing fails.
    """

    def __init__(self, path, layout, header: dict | None = None):
        self.path = Path(path)
        if not self.path.parent.exists():
            raise FileNotFoundError(f"output directory does not exist: {self.path.parent}")
        self.layout = _normalize_layout(layout)
        self.header = dict(header or {})
        self.count = 0
        self._crc = 0
        self._tmp_path = self.path.with_name(self.path.name + ".records.tmp")
        self._tmp = open(self._tmp_path, "wb")

    def append(self, arrays: dict[str, np.ndarray] | Sequence[np.ndarray], meta) -> None:
        if not isinstance(arrays, dict):
            arrays = dict(zip((n for n, _ in self.layout), arrays))
        meta = np.asarray(meta, dtype=_DT).reshape(-1)
        if meta.size != 4:
            raise ValidationError("record metadata must be four float32 values")
        chunks = []
        for name, shape in self.layout:
            if name not in arrays:
                raise ValidationError(f"record missing array {name!r}")
            a = np.ascontiguousarray(arrays[name], dtype=_DT)
            if a.shape != shape:
                raise ValidationError(f"array {name!r} has shape {a.shape}, layout says {shape}")
            chunks.append(a.tobytes())
        chunks.append(meta.tobytes())
        for c in chunks:
            self._crc = zlib.crc32(c, self._crc)
            self._tmp.write(c)
        self.count += 1

    def extend(self, records: Iterable[Record]) -> None:
        for r in records:
            self.append(r.arrays, r.meta)

    def close(self) -> dict:
        self._tmp.close()
        header = dict(self.header)
        header.update(
            format="F4D1",
            version=FORMAT_VERSION,
            layout=[[n, list(s)] for n, s in self.layout],
            meta_fields=list(META_FIELDS),
            count=self.count,
        )
        hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
        final_tmp = self.path.with_name(self.path.name + ".tmp")
        try:
            with open(final_tmp, "wb") as out, open(self._tmp_path, "rb") as src:
                out.write(MAGIC)
                out.write(struct.pack("<I", len(hbytes)))
                out.write(hbytes)
                while True:
                    buf = src.read(_CHUNK)
                    if not buf:
                        break
                    out.write(buf)
                out.write(struct.pack("<I", self._crc & 0xFFFFFFFF))
            os.replace(final_tmp, self.path)
        finally:
            if self._tmp_path.exists():
                self._tmp_path.unlink()
            if final_tmp.exists():
                final_tmp.unlink()
        return header

    def abort(self) -> None:
        self._tmp.close()
        if self._tmp_path.exists():
            self._tmp_path.unlink()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self.abort()
        return False


def write_container(path, layout, records: Iterable[Record], header: dict | None = None) -> dict:
    with ContainerWriter(path, layout, header) as w:
        w.extend(records)
    return read_header(path)


def read_header(path) -> dict:
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) < 8:
            raise TruncatedFileError(f"{path}: file too short for an F4D1 header")
        if head[:4] != MAGIC:
            raise FormatError(f"{path}: bad magic {head[:4]!r}, expected {MAGIC!r}")
        (hlen,) = struct.unpack("<I", head[4:8])
        raw = f.read(hlen)
    if len(raw) < hlen:
        raise TruncatedFileError(f"{path}: header truncated")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable JSON header ({e})") from e
    if header.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path}: container version {header.get('version')!r}, reader supports {FORMAT_VERSION}"
        )
    header["_data_offset"] = 8 + hlen
    return header


class Container:
    """Random-access, read-only view of an F4D1 file backed by a memory map."""

    def __init__(self, path, verify: bool = True):
        self.path = Path(path)
        self.header = read_header(self.path)
        self.layout = _normalize_layout(self.header["layout"])
        self.count = int(self.header["count"])
        self.record_size = record_nbytes(self.layout)
        self._offset = self.header.pop("_data_offset")
        expected = self._offset + self.count * self.record_size + 4
        actual = self.path.stat().st_size
        if actual < expected:
            raise TruncatedFileError(f"{self.path}: {actual} bytes, header implies {expected}")
        if actual > expected:
            raise FormatError(f"{self.path}: {actual - expected} unexpected trailing bytes")
        self._map = None
        if self.count:
            self._map = np.memmap(self.path, dtype=np.uint8, mode="r", offset=self._offset,
                                  shape=(self.count * self.record_size,))
        if verify:
            self.verify()

    def verify(self) -> None:
        crc = 0
        payload = self.count * self.record_size
        with open(self.path, "rb") as f:
            f.seek(self._offset)
            remaining = payload
            while remaining:
                buf = f.read(min(_CHUNK, remaining))
                if not buf:
                    raise TruncatedFileError(f"{self.path}: payload truncated")
                crc = zlib.crc32(buf, crc)
                remaining -= len(buf)
            tail = f.read(4)
        if len(tail) != 4:
            raise TruncatedFileError(f"{self.path}: missing CRC trailer")
        (stored,) = struct.unpack("<I", tail)
        if stored != crc & 0xFFFFFFFF:
            raise ChecksumError(f"{self.path}: CRC mismatch (stored {stored:#010x}, computed {crc:#010x})")

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int) -> Record:
        if not -self.count <= i < self.count:
            raise IndexError(i)
        i %= self.count
        base = i * self.record_size
        arrays = {}
        pos = base
        for name, shape in self.layout:
            n = int(np.prod(shape)) * 4
            arrays[name] = np.frombuffer(self._map[pos:pos + n], dtype=_DT).reshape(shape).copy()
            pos += n
        meta = np.frombuffer(self._map[pos:pos + 16], dtype=_DT).copy()
        return Record(arrays, meta)

    def __iter__(self) -> Iterator[Record]:
        for i in range(self.count):
            yield self[i]

    def close(self) -> None:
        self._map = None


def iter_records(path, verify: bool = True) -> Iterator[Record]:
    """Stream records sequentially without holding the file in memory."""
    c = Container(path, verify=verify)
    try:
        yield from c
    finally:
        c.close()
