"""Pose discovery from patch-feature grids.

The pipeline: PC1 of all token features splits object from background; each
image is centered and rescaled so its foreground box lands on a shared target
box; a second 3-component PCA on foreground tokens gives per-token semantic
coordinates; the resulting 3xHxW maps (background zeroed) are K-means
clustered, and cluster indices become pose labels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .features import FeatureGrid
from .pca import PcaModel, fit_pca_incremental, project


class MaskRejected(ValueError):
    """Image excluded: no usable foreground under either PC1 sign."""


@dataclass
class ForegroundMask:
    mask: np.ndarray  # (h, w) bool
    sign_used: int    # +1 or -1

    def __post_init__(self):
        if self.sign_used not in (-1, 1):
            raise ValueError("sign_used must be +1 or -1")
        if not self.mask.any():
            raise ValueError("foreground mask is empty")


@dataclass
class PoseAssignment:
    k: int
    labels: dict  # image_id -> int in [0, k)
    centroids: np.ndarray  # (k, 3, h, w)
    inertia: float

    def __post_init__(self):
        for image_id, lab in self.labels.items():
            if not (0 <= lab < self.k):
                raise ValueError(f"label {lab} for {image_id!r} out of range")


def _border_fraction(mask: np.ndarray) -> float:
    border = np.zeros_like(mask)
    border[0, :] = border[-1, :] = True
    border[:, 0] = border[:, -1] = True
    return float(mask[border].mean())


def foreground_mask(grid: FeatureGrid, pca1: PcaModel) -> ForegroundMask:
    """Threshold the PC1 projection of each token at zero.

    PCA leaves the component sign arbitrary, so both orientations are tried
    and the one marking fewer border tokens as foreground wins (objects
    rarely hug the frame); ties fall to the sparser mask, then to +1.
    """
    proj = project(pca1, grid.grid)[..., 0]  # (h, w)
    pos = proj > 0
    neg = (-proj) > 0
    if not pos.any() and not neg.any():
        raise MaskRejected(f"{grid.image_id!r}: no token projects off zero on PC1")
    if not neg.any():
        return ForegroundMask(pos, +1)
    if not pos.any():
        return ForegroundMask(neg, -1)
    key_pos = (_border_fraction(pos), int(pos.sum()))
    key_neg = (_border_fraction(neg), int(neg.sum()))
    if key_pos <= key_neg:
        return ForegroundMask(pos, +1)
    return ForegroundMask(neg, -1)


def default_target_box(image_size: int, fraction: float = 0.8):
    """Centered box spanning `fraction` of each side, (top, left, bottom, right) px."""
    m = image_size * (1.0 - fraction) / 2.0
    return (m, m, image_size - m, image_size - m)


def _mask_pixel_bbox(mask: np.ndarray, patch_size: int):
    rows = np.where(mask.any(axis=1))[0]
    cols = np.where(mask.any(axis=0))[0]
    return (
        rows[0] * patch_size,
        cols[0] * patch_size,
        (rows[-1] + 1) * patch_size,
        (cols[-1] + 1) * patch_size,
    )


def _bilinear_sample(image: np.ndarray, src_y: np.ndarray, src_x: np.ndarray) -> np.ndarray:
    """Sample (C, H, W) image at fractional pixel-center coords, edges clamped."""
    _, h, w = image.shape
    uy = np.clip(src_y - 0.5, 0.0, h - 1.0)
    ux = np.clip(src_x - 0.5, 0.0, w - 1.0)
    y0 = np.floor(uy).astype(int)
    x0 = np.floor(ux).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = uy - y0
    fx = ux - x0
    tl = image[:, y0, x0]
    tr = image[:, y0, x1]
    bl = image[:, y1, x0]
    br = image[:, y1, x1]
    top = tl * (1 - fx) + tr * fx
    bot = bl * (1 - fx) + br * fx
    return (top * (1 - fy) + bot * fy).astype(image.dtype)


def center_rescale(image, grid: np.ndarray, mask: ForegroundMask, target_box,
                   patch_size: int):
    """Warp so the foreground pixel box maps onto target_box.

    Image is resampled bilinearly (pass None to skip); the feature grid and
    the mask share one nearest-neighbor resampling; output sizes match the
    inputs. Anisotropic: the box corners map exactly even when aspect ratio
    changes. Returns (image', grid', mask').
    """
    h, w = mask.mask.shape
    sy0, sx0, sy1, sx1 = _mask_pixel_bbox(mask.mask, patch_size)
    ty0, tx0, ty1, tx1 = target_box
    if ty1 <= ty0 or tx1 <= tx0:
        raise ValueError(f"degenerate target_box {target_box}")
    if sy1 <= sy0 or sx1 <= sx0:
        raise ValueError("degenerate foreground box")
    h_px, w_px = h * patch_size, w * patch_size
    if not (0 <= ty0 and ty1 <= h_px and 0 <= tx0 and tx1 <= w_px):
        raise ValueError(f"target_box {target_box} outside the {h_px}x{w_px} frame")

    # dst pixel position -> src pixel position (both in pixel units)
    scale_y = (sy1 - sy0) / (ty1 - ty0)
    scale_x = (sx1 - sx0) / (tx1 - tx0)

    out_image = None
    if image is not None:
        yy = (np.arange(h_px) + 0.5 - ty0) * scale_y + sy0
        xx = (np.arange(w_px) + 0.5 - tx0) * scale_x + sx0
        out_image = _bilinear_sample(image, yy[:, None], xx[None, :])

    pc_y = ((np.arange(h) + 0.5) * patch_size - ty0) * scale_y + sy0
    pc_x = ((np.arange(w) + 0.5) * patch_size - tx0) * scale_x + sx0
    iy = np.clip((pc_y / patch_size - 0.5).round().astype(int), 0, h - 1)
    ix = np.clip((pc_x / patch_size - 0.5).round().astype(int), 0, w - 1)
    out_grid = grid[np.ix_(iy, ix)]
    out_mask = mask.mask[np.ix_(iy, ix)]
    return out_image, out_grid, out_mask


def pose_descriptor(grid: np.ndarray, mask: np.ndarray, pca2: PcaModel) -> np.ndarray:
    """(3, h, w) map: 3-component projection per foreground token, zeros elsewhere."""
    if pca2.k != 3:
        raise ValueError(f"descriptor PCA must have 3 components, got {pca2.k}")
    h, w, _ = grid.shape
    if mask.shape != (h, w):
        raise ValueError(f"mask shape {mask.shape} != grid {h, w}")
    desc = np.zeros((3, h, w), dtype=np.float64)
    if mask.any():
        proj = project(pca2, grid[mask])  # (n_fg, 3)
        desc[:, mask] = proj.T
    return desc


# ------------------------------------------------------------------ K-means

def _kmeanspp_init(x: np.ndarray, m: int, gen: np.random.Generator) -> np.ndarray:
    """Greedy k-means++: per step, draw several D^2-distributed candidates
    and keep the one that shrinks the total potential the most."""
    n = x.shape[0]
    n_candidates = 2 + int(np.log2(max(m, 2)))
    centroids = np.empty((m, x.shape[1]), dtype=np.float64)
    centroids[0] = x[gen.integers(n)]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, m):
        total = d2.sum()
        if total <= 0:
            centroids[j] = x[gen.integers(n)]  # all points coincide with picks
            continue
        cum = np.cumsum(d2)
        picks = np.searchsorted(cum, gen.uniform(0, total, size=n_candidates))
        picks = np.minimum(picks, n - 1)
        best_card = None
        best_pot = np.inf
        for idx in picks:
            pot = float(np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1)).sum())
            if pot < best_pot:
                best_pot, best_card = pot, int(idx)
        centroids[j] = x[best_card]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iters: int, tol: float):
    n, m = x.shape[0], centroids.shape[0]
    prev_inertia = np.inf
    labels = np.zeros(n, dtype=int)
    for _ in range(max_iters):
        d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d2, axis=1)  # argmin takes the lowest index on ties
        point_d2 = d2[np.arange(n), labels]

        # Re-seed any empty cluster with the globally farthest point.
        for j in range(m):
            if not np.any(labels == j):
                far = int(np.argmax(point_d2))
                centroids[j] = x[far]
                labels[far] = j
                point_d2[far] = 0.0

        inertia = float(point_d2.sum())
        assert inertia <= prev_inertia + 1e-9, "k-means objective increased"
        prev_inertia = inertia

        new_centroids = np.stack(
            [x[labels == j].mean(axis=0) for j in range(m)]
        )
        move = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if move < tol:
            break
    return labels, centroids, prev_inertia


def kmeans(descriptors: np.ndarray, m: int, seed: int, max_iters: int = 100,
           tol: float = 1e-6, ids=None) -> PoseAssignment:
    """Lloyd's algorithm with k-means++ seeding over flattened descriptors."""
    descriptors = np.asarray(descriptors, dtype=np.float64)
    n = descriptors.shape[0]
    if n < m:
        raise ValueError(f"need at least {m} descriptors, got {n}")
    if ids is None:
        ids = [str(i) for i in range(n)]
    elif len(ids) != n:
        raise ValueError("ids length does not match descriptor count")
    shape = descriptors.shape[1:]
    x = descriptors.reshape(n, -1)
    gen = np.random.Generator(np.random.PCG64(seed))
    init = _kmeanspp_init(x, m, gen)
    labels, centroids, inertia = _lloyd(x, init, max_iters, tol)
    return PoseAssignment(
        k=m,
        labels={i: int(l) for i, l in zip(ids, labels)},
        centroids=centroids.reshape((m,) + shape),
        inertia=inertia,
    )


def assign_pose(descriptor: np.ndarray, assignment: PoseAssignment) -> int:
    """Nearest centroid by L2; ties break toward the lowest cluster index."""
    descriptor = np.asarray(descriptor, dtype=np.float64)
    if descriptor.shape != assignment.centroids.shape[1:]:
        raise ValueError(
            f"descriptor shape {descriptor.shape} != centroid shape "
            f"{assignment.centroids.shape[1:]}"
        )
    d2 = ((assignment.centroids - descriptor) ** 2).sum(
        axis=tuple(range(1, assignment.centroids.ndim))
    )
    return int(np.argmin(d2))


# ----------------------------------------------------------------- pipeline

@dataclass
class PoseClusteringResult:
    assignment: PoseAssignment
    pca1: PcaModel
    pca2: PcaModel
    rejected: list = field(default_factory=list)
    target_box: tuple = ()
    patch_size: int = 0


def _token_batches(grids, batch_size, select=None):
    """Stream (batch_size, c) chunks of tokens in manifest order."""
    buf = []
    buffered = 0
    for i, g in enumerate(grids):
        tokens = g.grid.reshape(-1, g.grid.shape[2]) if select is None \
            else g.grid[select[i]]
        buf.append(np.asarray(tokens, dtype=np.float64))
        buffered += len(tokens)
        while buffered >= batch_size:
            block = np.concatenate(buf, axis=0)
            yield block[:batch_size]
            rest = block[batch_size:]
            buf = [rest] if len(rest) else []
            buffered = len(rest)
    if buffered:
        yield np.concatenate(buf, axis=0)


def describe_grid(grid: FeatureGrid, pca1: PcaModel, pca2: PcaModel,
                  target_box) -> np.ndarray:
    """Mask, rescale and project a single grid to its descriptor."""
    m1 = foreground_mask(grid, pca1)
    _, warped, wmask = center_rescale(None, grid.grid, m1, target_box,
                                      grid.patch_size)
    return pose_descriptor(warped.astype(np.float64), wmask, pca2)


def cluster_dataset(grids, m: int, seed: int, target_box=None,
                    batch_size: int = 256, max_iters: int = 100,
                    tol: float = 1e-6) -> PoseClusteringResult:
    """Run the full pose-discovery pipeline over feature grids.

    Images whose mask comes up empty at either stage are excluded and listed
    in the result instead of failing the run.
    """
    if not grids:
        raise ValueError("no feature grids given")
    # Manifest order is lexicographic; incremental PCA is order-sensitive,
    # so enforce it here rather than trusting file record order.
    grids = sorted(grids, key=lambda g: g.image_id)
    h, w, _ = grids[0].grid.shape
    patch_size = grids[0].patch_size
    if target_box is None:
        target_box = default_target_box(h * patch_size)

    pca1 = fit_pca_incremental(_token_batches(grids, batch_size), 1,
                               batch_size=batch_size)

    rejected = []
    warped = []  # (image_id, grid', mask')
    for g in grids:
        try:
            m1 = foreground_mask(g, pca1)
        except MaskRejected:
            rejected.append(g.image_id)
            continue
        _, wg, wmask = center_rescale(None, g.grid, m1, target_box, patch_size)
        warped.append((g.image_id, wg.astype(np.float64), wmask))
    if len(warped) < m:
        raise ValueError(f"only {len(warped)} usable images for m={m} clusters")

    fg_grids = [FeatureGrid(i, g, patch_size) for i, g, _ in warped]
    masks = [msk for _, _, msk in warped]
    pca2 = fit_pca_incremental(
        _token_batches(fg_grids, batch_size, select=masks), 3,
        batch_size=batch_size,
    )

    descriptors = np.stack([
        pose_descriptor(g, msk, pca2) for _, g, msk in warped
    ])
    assignment = kmeans(descriptors, m, seed, max_iters=max_iters, tol=tol,
                        ids=[i for i, _, _ in warped])
    return PoseClusteringResult(assignment, pca1, pca2, rejected,
                                tuple(float(v) for v in target_box), patch_size)


# -------------------------------------------------------------- persistence

def save_poses(path, result: PoseClusteringResult) -> None:
    doc = {
        "k": result.assignment.k,
        "labels": result.assignment.labels,
        "centroids": result.assignment.centroids.tolist(),
        "inertia": result.assignment.inertia,
        "pca1": result.pca1.to_dict(),
        "pca2": result.pca2.to_dict(),
        "rejected": list(result.rejected),
        "params": {
            "target_box": list(result.target_box),
            "patch_size": result.patch_size,
        },
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)
        f.write("\n")


def load_poses(path) -> PoseClusteringResult:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    centroids = np.asarray(doc["centroids"], dtype=np.float64)
    assignment = PoseAssignment(
        k=int(doc["k"]),
        labels={k: int(v) for k, v in doc["labels"].items()},
        centroids=centroids,
        inertia=float(doc["inertia"]),
    )
    return PoseClusteringResult(
        assignment=assignment,
        pca1=PcaModel.from_dict(doc["pca1"]),
        pca2=PcaModel.from_dict(doc["pca2"]),
        rejected=list(doc["rejected"]),
        target_box=tuple(doc["params"]["target_box"]),
        patch_size=int(doc["params"]["patch_size"]),
    )
