"""Synthetic cuboid dataset: flat-shaded box renders plus matching features.

Each image shows one rectangular cuboid under orthographic projection at a
yaw angle drawn from a fixed set of bins, with small translation / scale /
color jitter. Alongside the PNG we emit a simulated patch-feature grid:
per patch, a (faces + 1)-dim vector mixing one-hot face identities by their
pixel share, a background direction weighted by (1 - coverage), and Gaussian
noise. Face visibility flips as the box turns, so patch features carry pose.

Ground truth (yaw bin, per-pixel coverage) comes from the same rasterization
pass that produced the image, so masks match the renders exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import FeatureGrid, write_features
from .images import write_image
from .manifest import DatasetManifest, ManifestEntry, save_manifest
from .rng import derive_seed, seeded_normal_array

N_FACES = 6
FEATURE_DIM = N_FACES + 1  # face identities plus one background direction

# Distinct flat shades, one per face: +x, -x, +y, -y, +z, -z.
FACE_COLORS = np.array(
    [
        [0.85, 0.25, 0.20],  # +x red
        [0.20, 0.60, 0.85],  # -x blue
        [0.25, 0.75, 0.30],  # +y green
        [0.90, 0.75, 0.20],  # -y yellow
        [0.75, 0.35, 0.80],  # +z purple (top)
        [0.45, 0.30, 0.15],  # -z brown (bottom)
    ]
)
BACKGROUND_COLOR = np.array([0.08, 0.08, 0.10])
FACE_NAMES = ["+x", "-x", "+y", "-y", "+z", "-z"]

ELEVATION_DEG = 12.0
# Half extents, unequal on purpose: the silhouette must change with yaw.
_HALF_EXTENTS = np.array([0.62, 0.44, 0.38])
_BASE_RADIUS = 0.46  # object scale as a fraction of image size
_SUPERSAMPLE = 4

# Corner layout of a unit box; faces list the corner indices with outward
# normals +x, -x, +y, -y, +z, -z (counter-clockwise seen from outside).
_CORNERS = np.array(
    [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
    dtype=np.float64,
)
_FACES = [
    (4, 5, 7, 6),  # +x
    (0, 2, 3, 1),  # -x
    (2, 6, 7, 3),  # +y
    (0, 1, 5, 4),  # -y
    (1, 3, 7, 5),  # +z
    (0, 4, 6, 2),  # -z
]
_FACE_NORMALS = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
    dtype=np.float64,
)


@dataclass
class SyntheticSpec:
    yaw_bins: int = 8
    samples_per_bin: int = 200
    image_size: int = 32
    patch_size: int = 4
    jitter_translate: float = 1.5  # pixels
    jitter_scale: float = 0.08     # fraction of base scale
    jitter_color: float = 0.06
    noise_sigma: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.yaw_bins < 2:
            raise ValueError("need at least 2 yaw bins")
        if self.samples_per_bin < 1:
            raise ValueError("samples_per_bin must be positive")
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        # Worst-case projected radius must stay inside the frame.
        corner_norm = float(np.linalg.norm(_HALF_EXTENTS))
        max_scale = self.image_size * _BASE_RADIUS * (1.0 + self.jitter_scale)
        reach = max_scale * corner_norm + self.jitter_translate
        if reach > self.image_size / 2 - 0.5:
            raise ValueError(
                f"jitter can push the object off-frame (reach {reach:.1f}px "
                f"vs half-frame {self.image_size / 2 - 0.5:.1f}px)"
            )


def _view_matrix(yaw_deg: float) -> np.ndarray:
    """World->view rotation: yaw about z, then a fixed downward tilt.

    The camera looks along +y in view coordinates; screen axes are x (right)
    and z (up before the flip to raster rows).
    """
    th = np.deg2rad(yaw_deg)
    el = np.deg2rad(ELEVATION_DEG)
    rot_yaw = np.array(
        [[np.cos(th), -np.sin(th), 0.0], [np.sin(th), np.cos(th), 0.0], [0.0, 0.0, 1.0]]
    )
    rot_elev = np.array(
        [[1.0, 0.0, 0.0], [0.0, np.cos(el), -np.sin(el)], [0.0, np.sin(el), np.cos(el)]]
    )
    return rot_elev @ rot_yaw


def visible_faces(yaw_deg: float) -> list[str]:
    view = _view_matrix(yaw_deg)
    out = []
    for i in range(N_FACES):
        n = view @ _FACE_NORMALS[i]
        if n[1] < -1e-9:  # normal has a component toward the camera
            out.append(FACE_NAMES[i])
    return out


def render_cuboid(yaw_deg: float, image_size: int, scale_px: float,
                  translate_xy=(0.0, 0.0)) -> np.ndarray:
    """Rasterize to a supersampled face-id map; -1 marks background.

    Painter's algorithm: faces sorted far-to-near by mean view depth, each
    overdrawing the last, which is exact for a convex solid.
    """
    view = _view_matrix(yaw_deg)
    corners = (view @ (_CORNERS * _HALF_EXTENTS).T).T  # (8, 3) in view coords

    n = image_size * _SUPERSAMPLE
    # Sample positions at subpixel centers, in screen units centered on frame.
    axis = (np.arange(n) + 0.5) / _SUPERSAMPLE - image_size / 2
    sx = axis[None, :] - translate_xy[0]       # screen x, right
    sy = -(axis[:, None]) - translate_xy[1]    # screen y, up (rows grow down)
    face_id = np.full((n, n), -1, dtype=np.int8)

    order = sorted(
        range(N_FACES),
        key=lambda f: -float(np.mean(corners[list(_FACES[f]), 1])),  # far first
    )
    for f in order:
        quad = corners[list(_FACES[f])]
        px = quad[:, 0] * scale_px
        py = quad[:, 2] * scale_px
        # Signed area decides winding; near-degenerate (edge-on) faces skipped.
        area = 0.0
        for i in range(4):
            j = (i + 1) % 4
            area += px[i] * py[j] - px[j] * py[i]
        if abs(area) < 1e-9:
            continue
        if area < 0:
            px, py = px[::-1], py[::-1]
        inside = np.ones((n, n), dtype=bool)
        for i in range(4):
            j = (i + 1) % 4
            ex, ey = px[j] - px[i], py[j] - py[i]
            inside &= ex * (sy - py[i]) - ey * (sx - px[i]) >= 0
        face_id[inside] = f
    return face_id


def coverage_from_face_ids(face_id: np.ndarray) -> np.ndarray:
    """Per-pixel foreground coverage in [0, 1] from the supersampled id map."""
    n = face_id.shape[0]
    size = n // _SUPERSAMPLE
    fg = (face_id >= 0).astype(np.float32)
    return fg.reshape(size, _SUPERSAMPLE, size, _SUPERSAMPLE).mean(axis=(1, 3))


def _face_fractions(face_id: np.ndarray, cell: int) -> np.ndarray:
    """(h, w, N_FACES) share of each cell's samples covered by each face."""
    n = face_id.shape[0]
    h = n // cell
    blocks = face_id.reshape(h, cell, h, cell).transpose(0, 2, 1, 3).reshape(h, h, -1)
    frac = np.zeros((h, h, N_FACES), dtype=np.float64)
    for f in range(N_FACES):
        frac[:, :, f] = (blocks == f).mean(axis=2)
    return frac


def render_image(face_id: np.ndarray, face_colors: np.ndarray) -> np.ndarray:
    """Average supersamples into an anti-aliased (3, H, W) image in [-1, 1]."""
    palette = np.vstack([face_colors, BACKGROUND_COLOR[None, :]])
    rgb = palette[np.where(face_id >= 0, face_id, N_FACES)]  # (n, n, 3)
    n = face_id.shape[0]
    size = n // _SUPERSAMPLE
    rgb = rgb.reshape(size, _SUPERSAMPLE, size, _SUPERSAMPLE, 3).mean(axis=(1, 3))
    return (rgb.transpose(2, 0, 1) * 2.0 - 1.0).astype(np.float32)


def features_for_render(face_id: np.ndarray, patch_size: int,
                        noise_sigma: float = 0.0, seed: int = 0) -> np.ndarray:
    """Per-patch feature vectors (h, w, FEATURE_DIM) from a rendered id map."""
    frac = _face_fractions(face_id, patch_size * _SUPERSAMPLE)
    coverage = frac.sum(axis=2)
    feat = np.concatenate([frac, (1.0 - coverage)[:, :, None]], axis=2)
    if noise_sigma > 0.0:
        feat = feat + noise_sigma * seeded_normal_array(feat.shape, seed, dtype=np.float64)
    return feat.astype(np.float32)


def features_from_image(image: np.ndarray, patch_size: int,
                        face_colors: np.ndarray = FACE_COLORS) -> np.ndarray:
    """Recover noise-free features from pixels via nearest-palette matching.

    Works on any (3, H, W) image in [-1, 1]; used to pose-classify model
    samples with the same descriptor machinery the dataset was built with.
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got {image.shape}")
    h_px = image.shape[1]
    if h_px % patch_size != 0:
        raise ValueError("image size not divisible by patch_size")
    rgb = (np.asarray(image, dtype=np.float64).transpose(1, 2, 0) + 1.0) / 2.0
    palette = np.vstack([face_colors, BACKGROUND_COLOR[None, :]])  # (7, 3)
    d2 = ((rgb[:, :, None, :] - palette[None, None, :, :]) ** 2).sum(axis=3)
    nearest = np.argmin(d2, axis=2)  # (H, W) in [0, 6]
    h = h_px // patch_size
    blocks = nearest.reshape(h, patch_size, h, patch_size).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(h, h, -1)
    feat = np.zeros((h, h, FEATURE_DIM), dtype=np.float64)
    for f in range(FEATURE_DIM):
        feat[:, :, f] = (blocks == f).mean(axis=2)
    return feat.astype(np.float32)


def generate_synthetic(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Render the dataset under out_dir and return its manifest.

    Writes images/<id>.png, features.mrgf, manifest.json, truth.json and
    masks.npz (per-pixel coverage). Every per-image random choice comes from
    a seed derived from (spec.seed, index), so images are independent and
    the whole dataset is reproducible bit for bit.
    """
    spec.validate()
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    grids = []
    entries = []
    truth = {}
    masks = {}
    index = 0
    # Sample-major ids: the manifest sorts lexicographically, so this keeps
    # yaw bins interleaved, which the order-sensitive incremental PCA needs.
    for b in range(spec.yaw_bins):
        yaw = 360.0 * b / spec.yaw_bins
        for s in range(spec.samples_per_bin):
            image_id = f"img_{s:03d}_{b:02d}"
            gen = np.random.Generator(
                np.random.PCG64(derive_seed(spec.seed, "image", index))
            )
            translate = gen.uniform(-spec.jitter_translate, spec.jitter_translate, 2)
            scale = spec.image_size * _BASE_RADIUS * (
                1.0 + gen.uniform(-spec.jitter_scale, spec.jitter_scale)
            )
            colors = np.clip(
                FACE_COLORS + gen.uniform(-spec.jitter_color, spec.jitter_color,
                                          FACE_COLORS.shape),
                0.0, 1.0,
            )
            face_id = render_cuboid(yaw, spec.image_size, scale, translate)
            write_image(out_dir / "images" / f"{image_id}.png",
                        render_image(face_id, colors))
            grids.append(FeatureGrid(
                image_id,
                features_for_render(face_id, spec.patch_size, spec.noise_sigma,
                                    derive_seed(spec.seed, "noise", index)),
                spec.patch_size,
            ))
            masks[image_id] = coverage_from_face_ids(face_id)
            truth[image_id] = {
                "yaw_bin": b,
                "yaw_deg": yaw,
                "translate": [float(t) for t in translate],
                "scale_px": float(scale),
                "visible_faces": visible_faces(yaw),
            }
            entries.append(ManifestEntry(image_id, f"images/{image_id}.png",
                                         "features.mrgf"))
            index += 1

    write_features(out_dir / "features.mrgf", grids)
    manifest = DatasetManifest(str(out_dir), spec.image_size, spec.patch_size, entries)
    save_manifest(manifest, out_dir / "manifest.json")
    with open(out_dir / "truth.json", "w", encoding="utf-8") as f:
        json.dump(truth, f, indent=1, sort_keys=True)
    np.savez_compressed(out_dir / "masks.npz", **masks)
    return manifest
