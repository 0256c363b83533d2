"""Reader/writer for the MRGF feature container.

This is an independent implementation of the format the generation
pipeline consumes, kept here so the extractor has no dependency on that
package. Layout (integers little-endian):

    magic  b"MRGF"
    u32    version (1)
    u32    record count
    u32    h, u32 w, u32 c, u32 patch_size
    per record:
        u16  id byte length
        ...  UTF-8 image id
        ...  h*w*c little-endian float32, (row, col, channel) order

All records in a file share one grid shape.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"MRGF"
VERSION = 1
HEADER = struct.Struct("<IIIIII")


class FormatError(ValueError):
    pass


def write_records(path, records: list[tuple[str, np.ndarray]], patch_size: int) -> None:
    """Write (image_id, (h, w, c) grid) pairs. Shapes must agree."""
    if not records:
        raise FormatError("refusing to write empty feature file")
    if patch_size < 1:
        raise FormatError("patch_size must be positive")
    shape = np.asarray(records[0][1]).shape
    if len(shape) != 3:
        raise FormatError(f"grids must be (h, w, c), got {shape}")
    seen = set()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(HEADER.pack(VERSION, len(records), *shape, patch_size))
        for image_id, grid in records:
            grid = np.asarray(grid, dtype="<f4")
            if grid.shape != shape:
                raise FormatError(
                    f"inconsistent grid shape {grid.shape} vs {shape} for {image_id!r}")
            if image_id in seen:
                raise FormatError(f"duplicate image_id {image_id!r}")
            seen.add(image_id)
            encoded = image_id.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise FormatError(f"image_id too long: {image_id[:32]!r}...")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(np.ascontiguousarray(grid).tobytes())


def read_records(path) -> tuple[list[tuple[str, np.ndarray]], int]:
    """Parse a file back into (id, grid) pairs plus the header patch size."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}")
    if len(data) < 4 + HEADER.size:
        raise FormatError("truncated payload: header incomplete")
    version, count, h, w, c, patch = HEADER.unpack_from(data, 4)
    if version != VERSION:
        raise FormatError(f"version mismatch: file has {version}, expected {VERSION}")

    records: list[tuple[str, np.ndarray]] = []
    seen = set()
    offset = 4 + HEADER.size
    rec_bytes = 4 * h * w * c
    for _ in range(count):
        if offset + 2 > len(data):
            raise FormatError("truncated payload: missing record header")
        (id_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        if offset + id_len + rec_bytes > len(data):
            raise FormatError("truncated payload: incomplete record")
        image_id = data[offset : offset + id_len].decode("utf-8")
        offset += id_len
        if image_id in seen:
            raise FormatError(f"duplicate image_id {image_id!r}")
        seen.add(image_id)
        grid = np.frombuffer(data, dtype="<f4", count=h * w * c, offset=offset)
        records.append((image_id, grid.reshape(h, w, c).copy()))
        offset += rec_bytes
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes after last record")
    return records, patch
