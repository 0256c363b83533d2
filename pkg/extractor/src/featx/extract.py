"""Run a patch-token featurizer over an image directory.

Two kinds of variant:

* ``dinov2-small`` / ``dinov2-base`` — pretrained self-supervised ViTs
  loaded through ``transformers``. Patch tokens only (the class token is
  dropped); needs the weights to be present or downloadable. When they are
  not, extraction fails loudly — there is deliberately no silent fallback
  to a different featurizer, since downstream clustering quality would
  change without any visible sign.
* ``random-projection`` — a weightless, fully offline featurizer: each
  patch's raw pixels are projected through a fixed seeded Gaussian matrix.
  Useful for plumbing tests and as a baseline; selected only explicitly.

Images are resized shorter-side-to-``resize`` and center cropped, so the
output grid is always (resize/patch, resize/patch, c).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .mrgf import write_records

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)
PROJECTION_DIM = 32
PROJECTION_SEED = 0x46585250  # fixed: the projection is part of the variant

PRETRAINED = {
    "dinov2-small": ("facebook/dinov2-small", 14),
    "dinov2-base": ("facebook/dinov2-base", 14),
}
VARIANTS = tuple(PRETRAINED) + ("random-projection",)


class ExtractorError(Exception):
    pass


@dataclass
class ExtractorConfig:
    variant: str = "dinov2-small"
    patch_size: int | None = None  # None: the variant's native patch size
    resize: int = 224
    device: str = "cpu"
    batch_size: int = 8

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ExtractorError(
                f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.patch_size is None:
            self.patch_size = PRETRAINED.get(self.variant, (None, 14))[1]
        if self.variant in PRETRAINED and self.patch_size != PRETRAINED[self.variant][1]:
            raise ExtractorError(
                f"{self.variant} has a fixed patch size of {PRETRAINED[self.variant][1]}")
        if self.patch_size < 1:
            raise ExtractorError("patch_size must be positive")
        if self.resize < self.patch_size:
            raise ExtractorError("resize must be at least one patch")
        if self.resize % self.patch_size != 0:
            raise ExtractorError(
                f"resize {self.resize} is not a multiple of patch size {self.patch_size}")
        if self.batch_size < 1:
            raise ExtractorError("batch_size must be positive")


def list_images(images_dir) -> list[Path]:
    root = Path(images_dir)
    if not root.is_dir():
        raise ExtractorError(f"not a directory: {root}")
    files = sorted(p for p in root.iterdir()
                   if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ExtractorError(f"no PNG/JPEG images under {root}")
    stems = [p.stem for p in files]
    dupes = sorted({s for s in stems if stems.count(s) > 1})
    if dupes:
        raise ExtractorError(f"duplicate image ids (same stem): {dupes}")
    return files


def load_rgb(path, resize: int) -> np.ndarray:
    """Decode, shorter-side resize, center crop; (resize, resize, 3) in [0, 1]."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            w, h = im.size
            scale = resize / min(w, h)
            nw, nh = max(resize, round(w * scale)), max(resize, round(h * scale))
            im = im.resize((nw, nh), Image.BICUBIC)
            left, top = (nw - resize) // 2, (nh - resize) // 2
            im = im.crop((left, top, left + resize, top + resize))
            return np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise ExtractorError(f"unreadable image {path}: {exc}") from exc


# ------------------------------------------------------------------ variants

def _projection_matrix(patch_size: int) -> np.ndarray:
    rng = np.random.default_rng(PROJECTION_SEED)
    flat = patch_size * patch_size * 3
    return (rng.standard_normal((flat, PROJECTION_DIM)) / np.sqrt(flat)).astype(np.float32)


def _random_projection_batch(batch: np.ndarray, patch: int) -> np.ndarray:
    """(B, S, S, 3) in [0,1] -> (B, S/patch, S/patch, PROJECTION_DIM)."""
    b, size = batch.shape[0], batch.shape[1]
    g = size // patch
    patches = batch.reshape(b, g, patch, g, patch, 3).transpose(0, 1, 3, 2, 4, 5)
    flat = patches.reshape(b, g, g, patch * patch * 3)
    return flat @ _projection_matrix(patch)


def _load_pretrained(variant: str, device: str):
    name = PRETRAINED[variant][0]
    try:
        import torch  # noqa: F401
        from transformers import AutoModel
    except ImportError as exc:
        raise ExtractorError(
            f"variant {variant!r} needs torch and transformers installed "
            f"(pip install 'featx[pretrained]'): {exc}") from exc
    try:
        model = AutoModel.from_pretrained(name)
    except Exception as exc:  # hub offline, missing cache, bad weights, ...
        raise ExtractorError(
            f"pretrained weights for {variant!r} ({name}) are unavailable: {exc}; "
            "fetch them on a connected machine or pick --variant "
            "random-projection explicitly") from exc
    model.eval()
    return model.to(device)


def _pretrained_batch(model, batch: np.ndarray, patch: int, device: str) -> np.ndarray:
    import torch

    normed = (batch - IMAGENET_MEAN) / IMAGENET_STD
    tensor = torch.from_numpy(normed.transpose(0, 3, 1, 2).copy()).to(device)
    with torch.no_grad():
        out = model(pixel_values=tensor)
    tokens = out.last_hidden_state[:, 1:, :].cpu().numpy()  # class token dropped
    b, n, c = tokens.shape
    g = batch.shape[1] // patch
    if n != g * g:
        raise ExtractorError(
            f"model returned {n} patch tokens, expected {g}x{g}; "
            "resize/patch mismatch with the checkpoint")
    return tokens.reshape(b, g, g, c).astype(np.float32)


# ------------------------------------------------------------------- extract

def extract(images_dir, config: ExtractorConfig, out_file) -> int:
    """Featurize every image under ``images_dir`` into ``out_file``.

    Returns the record count. Ids are file stems; records follow sorted
    file-name order, so the same directory always produces the same bytes.
    """
    files = list_images(images_dir)
    patch = config.patch_size
    model = None
    if config.variant in PRETRAINED:
        model = _load_pretrained(config.variant, config.device)

    records: list[tuple[str, np.ndarray]] = []
    for start in range(0, len(files), config.batch_size):
        chunk = files[start : start + config.batch_size]
        batch = np.stack([load_rgb(p, config.resize) for p in chunk])
        if model is None:
            grids = _random_projection_batch(batch, patch)
        else:
            grids = _pretrained_batch(model, batch, patch, config.device)
        records.extend((p.stem, grid) for p, grid in zip(chunk, grids))

    out_file = Path(out_file)
    if out_file.parent != Path(""):
        out_file.parent.mkdir(parents=True, exist_ok=True)
    write_records(out_file, records, patch)
    return len(records)
