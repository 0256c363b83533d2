"""Binary container for per-image patch feature grids.

Layout (all integers little-endian):

    magic  b"MRGF"
    u32    version (currently 1)
    u32    record count
    u32    h, u32 w, u32 c, u32 patch_size
    per record:
        u16  id byte length
        ...  UTF-8 image id
        ...  h*w*c little-endian float32, (row, col, channel) order

Every record in one file shares the same grid shape. The same container
carries both transformer-extracted and synthetic features.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"MRGF"
VERSION = 1


@dataclass
class FeatureGrid:
    image_id: str
    grid: np.ndarray  # (h, w, c) float32
    patch_size: int

    def __post_init__(self):
        self.grid = np.ascontiguousarray(self.grid, dtype=np.float32)
        if self.grid.ndim != 3:
            raise ValueError(f"feature grid must be (h, w, c), got {self.grid.shape}")
        if self.patch_size < 1:
            raise ValueError("patch_size must be positive")


class FeatureFileError(ValueError):
    pass


def write_features(path, grids: list[FeatureGrid]) -> None:
    if not grids:
        raise FeatureFileError("refusing to write empty feature file")
    h, w, c = grids[0].grid.shape
    patch = grids[0].patch_size
    seen = set()
    for g in grids:
        if g.grid.shape != (h, w, c):
            raise FeatureFileError(
                f"inconsistent grid shape {g.grid.shape} vs {(h, w, c)} for {g.image_id!r}"
            )
        if g.patch_size != patch:
            raise FeatureFileError(f"inconsistent patch_size for {g.image_id!r}")
        if g.image_id in seen:
            raise FeatureFileError(f"duplicate image_id {g.image_id!r}")
        seen.add(g.image_id)

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIIIII", VERSION, len(grids), h, w, c, patch))
        for g in grids:
            id_bytes = g.image_id.encode("utf-8")
            if len(id_bytes) > 0xFFFF:
                raise FeatureFileError(f"image_id too long: {g.image_id[:32]!r}...")
            f.write(struct.pack("<H", len(id_bytes)))
            f.write(id_bytes)
            f.write(g.grid.astype("<f4", copy=False).tobytes())


def read_features(path) -> list[FeatureGrid]:
    with open(path, "rb") as f:
        data = f.read()

    if data[:4] != MAGIC:
        raise FeatureFileError(f"bad magic {data[:4]!r}")
    if len(data) < 4 + 24:
        raise FeatureFileError("truncated payload: header incomplete")
    version, count, h, w, c, patch = struct.unpack_from("<IIIIII", data, 4)
    if version != VERSION:
        raise FeatureFileError(f"version mismatch: file has {version}, expected {VERSION}")

    grids = []
    seen = set()
    offset = 28
    rec_floats = h * w * c
    for _ in range(count):
        if offset + 2 > len(data):
            raise FeatureFileError("truncated payload: missing record header")
        (id_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        if offset + id_len + 4 * rec_floats > len(data):
            raise FeatureFileError("truncated payload: incomplete record")
        image_id = data[offset : offset + id_len].decode("utf-8")
        offset += id_len
        if image_id in seen:
            raise FeatureFileError(f"duplicate image_id {image_id!r}")
        seen.add(image_id)
        grid = np.frombuffer(data, dtype="<f4", count=rec_floats, offset=offset)
        offset += 4 * rec_floats
        grids.append(FeatureGrid(image_id, grid.reshape(h, w, c).copy(), patch))
    if offset != len(data):
        raise FeatureFileError(f"{len(data) - offset} trailing bytes after last record")
    return grids
