"""PNG in/out with a fixed [-1, 1] pixel mapping.

Reads produce float32 CHW arrays via v = px * 2/255 - 1; writes invert the
map with round-half-even so an 8-bit round trip is exact.
"""

from __future__ import annotations

import numpy as np
from PIL import Image


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "RGB":
            if im.mode in ("RGBA", "P", "L", "LA"):
                raise ValueError(f"unsupported color type {im.mode!r}: need 8-bit RGB")
            raise ValueError(f"unsupported image mode {im.mode!r}")
        arr = np.asarray(im, dtype=np.float32)  # (H, W, 3) in [0, 255]
    return (arr.transpose(2, 0, 1) * (2.0 / 255.0) - 1.0).astype(np.float32)


def quantize_levels(scaled: np.ndarray) -> np.ndarray:
    """Clip to [0, 255] and round to the nearest level, ties to even."""
    return np.rint(np.clip(scaled, 0.0, 255.0)).astype(np.uint8)


def write_image(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) pixel array, got {pixels.shape}")
    scaled = (np.asarray(pixels, dtype=np.float64) + 1.0) * (255.0 / 2.0)
    quantized = quantize_levels(scaled)
    Image.fromarray(quantized.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")
