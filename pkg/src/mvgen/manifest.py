"""Dataset manifests: a stable, lexicographically ordered image listing.

The ordering is load-bearing — it pins incremental-PCA batch order and the
shuffle seeds used in training, so regenerating a manifest over an unchanged
directory must produce an identical file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class ManifestEntry:
    image_id: str
    image: str                 # path relative to root
    features: str | None = None


@dataclass
class DatasetManifest:
    root: str
    image_size: int
    patch_size: int
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        ids = [e.image_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate image_ids in manifest: {dupes[:5]}")
        self.entries = sorted(self.entries, key=lambda e: e.image_id)

    def image_path(self, entry: ManifestEntry) -> Path:
        return Path(self.root) / entry.image

    def ids(self) -> list[str]:
        return [e.image_id for e in self.entries]


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "root": manifest.root,
        "image_size": manifest.image_size,
        "patch_size": manifest.patch_size,
        "entries": [
            {"image_id": e.image_id, "image": e.image, "features": e.features}
            for e in manifest.entries
        ],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def load_manifest(path) -> DatasetManifest:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    entries = [
        ManifestEntry(e["image_id"], e["image"], e.get("features"))
        for e in doc["entries"]
    ]
    return DatasetManifest(
        root=doc["root"],
        image_size=int(doc["image_size"]),
        patch_size=int(doc["patch_size"]),
        entries=entries,
    )


def build_manifest(root, image_size: int, patch_size: int,
                   features: str | None = None) -> DatasetManifest:
    """Scan root/images for PNGs; ids are filenames without extension."""
    root = Path(root)
    image_dir = root / "images"
    if not image_dir.is_dir():
        raise FileNotFoundError(f"no images/ directory under {root}")
    entries = [
        ManifestEntry(p.stem, str(Path("images") / p.name), features)
        for p in sorted(image_dir.glob("*.png"))
    ]
    if not entries:
        raise FileNotFoundError(f"no PNG images found in {image_dir}")
    return DatasetManifest(str(root), image_size, patch_size, entries)
